"""
In-process All-Reduce over virtual workers and alpha-beta cost models.

The numeric reductions run over shared buffers in a fixed order, so results
are bit-identical from call to call. The cost models price the same
algorithms on a racks -> nodes -> devices topology.
"""
from dataclasses import dataclass, field
from enum import Enum
import logging

import numpy as np

from errors import ConfigError, ShapeError
from numerics import DenseVector, as_vector

logger = logging.getLogger(__name__)


class CollectiveAlgorithm(str, Enum):
    NAIVE = "naive"
    RING = "ring"
    HIERARCHICAL = "hierarchical"
    PIPELINED_RING = "pipelined_ring"


class LinkClass(int, Enum):
    INTRA_NODE = 1
    INTER_NODE = 2
    INTER_RACK = 3


@dataclass(frozen=True)
class Topology:
    racks: int = 1
    nodes_per_rack: int = 1
    devices_per_node: int = 8
    intra_node_bw: float = 16e9
    inter_node_bw: float = 12.5e9
    inter_rack_bw: float = 12.5e9
    intra_node_lat: float = 1e-6
    inter_node_lat: float = 5e-6
    inter_rack_lat: float = 5e-6

    def __post_init__(self):
        for name in ("racks", "nodes_per_rack", "devices_per_node"):
            if getattr(self, name) < 1:
                raise ConfigError(f"topology.{name} must be >= 1, got {getattr(self, name)}")
        for name in ("intra_node_bw", "inter_node_bw", "inter_rack_bw"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"topology.{name} must be > 0, got {getattr(self, name)}")
        for name in ("intra_node_lat", "inter_node_lat", "inter_rack_lat"):
            if getattr(self, name) < 0:
                raise ConfigError(f"topology.{name} must be >= 0, got {getattr(self, name)}")

    @property
    def num_nodes(self) -> int:
        return self.racks * self.nodes_per_rack

    @property
    def num_devices(self) -> int:
        return self.num_nodes * self.devices_per_node

    def node_of(self, device: int) -> int:
        return device // self.devices_per_node

    def rack_of(self, device: int) -> int:
        return self.node_of(device) // self.nodes_per_rack

    def link_class(self, a: int, b: int) -> LinkClass:
        if self.node_of(a) == self.node_of(b):
            return LinkClass.INTRA_NODE
        if self.rack_of(a) == self.rack_of(b):
            return LinkClass.INTER_NODE
        return LinkClass.INTER_RACK

    def link(self, cls: LinkClass) -> tuple[float, float]:
        """(latency, bandwidth) of a link class."""
        if cls is LinkClass.INTRA_NODE:
            return self.intra_node_lat, self.intra_node_bw
        if cls is LinkClass.INTER_NODE:
            return self.inter_node_lat, self.inter_node_bw
        return self.inter_rack_lat, self.inter_rack_bw

    def p2p_time(self, a: int, b: int, msg_bytes: float) -> float:
        lat, bw = self.link(self.link_class(a, b))
        return lat + msg_bytes / bw


@dataclass
class WorkerGroup:
    buffers: list[DenseVector]
    topology: Topology | None = None
    devices: list[int] | None = field(default=None)

    def __post_init__(self):
        if not self.buffers:
            raise ShapeError("a worker group needs at least one worker")
        self.buffers = [as_vector(b, f"worker {i} buffer") for i, b in enumerate(self.buffers)]
        dim = self.buffers[0].shape[0]
        for i, b in enumerate(self.buffers):
            if b.shape[0] != dim:
                raise ShapeError(f"worker {i} buffer has dim {b.shape[0]}, expected {dim}")
        if self.devices is not None and len(self.devices) != len(self.buffers):
            raise ShapeError("devices must name one device per worker")

    @property
    def size(self) -> int:
        return len(self.buffers)

    @property
    def dim(self) -> int:
        return int(self.buffers[0].shape[0])

    def placement(self) -> tuple[Topology, list[int]]:
        topo = self.topology or Topology(devices_per_node=max(1, self.size))
        return topo, self.devices if self.devices is not None else list(range(self.size))


def _naive_sum(group: WorkerGroup) -> DenseVector:
    total = group.buffers[0].copy()
    for buf in group.buffers[1:]:
        total += buf
    return total


def _ring_sum(group: WorkerGroup) -> DenseVector:
    """
    Reduce-scatter then all-gather around the ring.

    Chunk c starts at worker c and travels forward; after P-1 hops worker
    c-1 owns the reduced chunk, which the all-gather copies to everyone.
    """
    p = group.size
    chunks = [np.array_split(buf, p) for buf in group.buffers]
    for step in range(p - 1):
        for sender in range(p):
            c = (sender - step) % p
            receiver = (sender + 1) % p
            chunks[receiver][c] = chunks[receiver][c] + chunks[sender][c]
    for step in range(p - 1):
        for sender in range(p):
            c = (sender + 1 - step) % p
            receiver = (sender + 1) % p
            chunks[receiver][c] = chunks[sender][c].copy()
    return np.concatenate(chunks[0])


def _hierarchical_sum(group: WorkerGroup) -> DenseVector:
    topo, devices = group.placement()
    nodes: dict[int, list[int]] = {}
    for w, dev in enumerate(devices):
        nodes.setdefault(topo.node_of(dev), []).append(w)
    node_sums: dict[int, DenseVector] = {}
    for node in sorted(nodes):
        members = nodes[node]
        acc = group.buffers[members[0]].copy()
        for w in members[1:]:
            acc += group.buffers[w]
        node_sums[node] = acc
    rack_sums: dict[int, DenseVector] = {}
    for node in sorted(node_sums):
        rack = node // topo.nodes_per_rack
        if rack in rack_sums:
            rack_sums[rack] = rack_sums[rack] + node_sums[node]
        else:
            rack_sums[rack] = node_sums[node]
    racks = sorted(rack_sums)
    total = rack_sums[racks[0]].copy()
    for rack in racks[1:]:
        total += rack_sums[rack]
    return total


def allreduce_sum(group: WorkerGroup, algo: CollectiveAlgorithm | str) -> DenseVector:
    algo = CollectiveAlgorithm(algo)
    if group.size == 1:
        return group.buffers[0].copy()
    if algo is CollectiveAlgorithm.NAIVE:
        return _naive_sum(group)
    if algo is CollectiveAlgorithm.HIERARCHICAL:
        return _hierarchical_sum(group)
    return _ring_sum(group)


def allreduce_mean(group: WorkerGroup, algo: CollectiveAlgorithm | str) -> DenseVector:
    """Arithmetic mean of every worker buffer, reduced in algo's canonical order."""
    if group.size == 1:
        return group.buffers[0].copy()
    return allreduce_sum(group, algo) / group.size


def ring_phase_cost(msg_bytes: float, k: int, lat: float, bw: float) -> float:
    """alpha-beta cost of a k-member ring all-reduce on one link class."""
    if k <= 1:
        return 0.0
    return 2 * (k - 1) * lat + 2 * ((k - 1) / k) * msg_bytes / bw


def comm_cost(
    algo: CollectiveAlgorithm | str,
    msg_bytes: float,
    P: int,
    topo: Topology,
    *,
    stride: int = 1,
    first_device: int = 0,
) -> float:
    """
    Modelled time of one all-reduce

    Group member i sits on device first_device + i*stride.

    Args:
        algo: Collective algorithm
        msg_bytes: Per-worker message size
        P: Group size
        topo: Topology the group is placed on
        stride: Device distance between consecutive members
        first_device: Device of member 0

    Returns:
        Seconds
    """
    algo = CollectiveAlgorithm(algo)
    if msg_bytes < 0:
        raise ConfigError(f"msg_bytes must be >= 0, got {msg_bytes}")
    if P < 1:
        raise ConfigError(f"P must be >= 1, got {P}")
    for name in ("intra_node_bw", "inter_node_bw", "inter_rack_bw"):
        if not getattr(topo, name) > 0:
            raise ConfigError(f"topology.{name} must be > 0")
    if P == 1:
        return 0.0
    members = [first_device + i * stride for i in range(P)]

    if algo is CollectiveAlgorithm.NAIVE:
        slowest = max(topo.link_class(members[0], m) for m in members)
        lat, bw = topo.link(slowest)
        return 2 * (P - 1) * (lat + msg_bytes / bw)

    if algo is CollectiveAlgorithm.HIERARCHICAL:
        node0 = topo.node_of(members[0])
        rack0 = topo.rack_of(members[0])
        k_node = sum(1 for m in members if topo.node_of(m) == node0)
        k_rack = len({topo.node_of(m) for m in members if topo.rack_of(m) == rack0})
        k_racks = len({topo.rack_of(m) for m in members})
        return (
            ring_phase_cost(msg_bytes, k_node, topo.intra_node_lat, topo.intra_node_bw)
            + ring_phase_cost(msg_bytes, k_rack, topo.inter_node_lat, topo.inter_node_bw)
            + ring_phase_cost(msg_bytes, k_racks, topo.inter_rack_lat, topo.inter_rack_bw)
        )

    # ring and pipelined ring price identically; overlap is applied by the simulator
    slowest = max(topo.link_class(members[i], members[(i + 1) % P]) for i in range(P))
    lat, bw = topo.link(slowest)
    return ring_phase_cost(msg_bytes, P, lat, bw)
