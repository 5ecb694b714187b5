"""
Discrete-event model of one training iteration.

Every replica runs a fill-drain pipeline whose forward and backward blocks
carry their compute, tensor-parallel all-reduces and stage-boundary sends.
The per-stage gradient all-reduce starts when the last replica finishes the
stage, pulled earlier by the overlap credit. Per-device time is then
classified by sweeping start/end events in (time, device, kind) order.
"""
from dataclasses import dataclass, field, replace
from enum import IntEnum
import heapq
import logging
import math
from typing import Mapping, Sequence

from collectives import CollectiveAlgorithm, Topology, comm_cost
from compression import wire_ratio
from errors import ConfigError, PlacementError
from strategies import Mode, Phase, StrategyConfig, build_pipeline_schedule, bubble_fraction

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CostParams:
    compute_time_per_sample_per_device: float
    activation_bytes_per_microbatch: float = 0.0
    gradient_bytes: float = 0.0
    pipeline_stage_cost_split: tuple[float, ...] | None = None
    tensor_allreduces_per_microbatch: int = 0
    backward_to_forward_ratio: float = 2.0
    sync_skew: float = 0.0
    model_state_bytes: float = 0.0
    device_memory_bytes: float = 40e9

    def __post_init__(self):
        if not self.compute_time_per_sample_per_device > 0:
            raise ConfigError("costs.compute_time_per_sample_per_device must be > 0")
        for name in (
            "activation_bytes_per_microbatch",
            "gradient_bytes",
            "tensor_allreduces_per_microbatch",
            "sync_skew",
            "model_state_bytes",
        ):
            if getattr(self, name) < 0:
                raise ConfigError(f"costs.{name} must be >= 0, got {getattr(self, name)}")
        if not self.backward_to_forward_ratio > 0 or not self.device_memory_bytes > 0:
            raise ConfigError("costs.backward_to_forward_ratio and costs.device_memory_bytes must be > 0")
        if self.pipeline_stage_cost_split is not None:
            split = tuple(float(f) for f in self.pipeline_stage_cost_split)
            if any(not f > 0 for f in split) or abs(sum(split) - 1.0) > 1e-9:
                raise ConfigError("costs.pipeline_stage_cost_split must be positive and sum to 1")
            object.__setattr__(self, "pipeline_stage_cost_split", split)

    def stage_split(self, stages: int) -> list[float]:
        if self.pipeline_stage_cost_split is None:
            return [1.0 / stages] * stages
        if len(self.pipeline_stage_cost_split) != stages:
            raise ConfigError(
                f"costs.pipeline_stage_cost_split has {len(self.pipeline_stage_cost_split)} entries "
                f"for {stages} pipeline stages"
            )
        return list(self.pipeline_stage_cost_split)

    def with_values(self, **changes) -> "CostParams":
        return replace(self, **changes)


@dataclass(frozen=True)
class DeviceTime:
    busy: float
    comm_blocked: float
    idle: float
    overlapped: float

    @property
    def total(self) -> float:
        return self.busy + self.comm_blocked + self.idle


@dataclass(frozen=True)
class IterationProfile:
    """Per-device means of one iteration's time decomposition."""

    compute_time: float
    comm_time: float
    overlapped_time: float
    idle_time: float
    wall_time: float
    effective_time: float
    bubble_fraction: float = 0.0
    devices: tuple[DeviceTime, ...] = ()

    @property
    def comm_blocked_time(self) -> float:
        return self.comm_time - self.overlapped_time

    @property
    def comm_share(self) -> float:
        return self.comm_blocked_time / self.wall_time

    @property
    def utilization(self) -> float:
        return self.compute_time / self.wall_time


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    device: int
    event_kind: str
    start_s: float
    end_s: float


@dataclass(frozen=True)
class SimReport:
    throughput: float
    speedup: float
    device_utilization: float
    comm_overhead_ms: float
    comm_share: float
    memory_utilization: float
    wall_time_ms: float
    profile: IterationProfile
    trace: tuple[TraceRecord, ...] = ()


class EventKind(IntEnum):
    # value is the tie-break rank at equal (time, device)
    COMPUTE_END = 0
    COMM_END = 1
    COMPUTE_START = 2
    COMM_START = 3


@dataclass(frozen=True, order=True)
class Event:
    time: float
    device: int
    kind: EventKind
    seq: int
    label: str = field(compare=False, default="")
    segment_start: float = field(compare=False, default=0.0)


class EventQueue:
    """Min-heap of events ordered by (time, device, kind, insertion)."""

    def __init__(self):
        self._heap: list[Event] = []
        self._seq = 0

    def push(self, time: float, device: int, kind: EventKind, label: str = "", segment_start: float = 0.0):
        heapq.heappush(self._heap, Event(time, device, kind, self._seq, label, segment_start))
        self._seq += 1

    def push_segment(self, device: int, start: float, end: float, label: str, compute: bool) -> None:
        if end <= start:
            return
        begin, finish = (
            (EventKind.COMPUTE_START, EventKind.COMPUTE_END) if compute else (EventKind.COMM_START, EventKind.COMM_END)
        )
        self.push(start, device, begin, label)
        self.push(end, device, finish, label, start)

    def pop(self) -> Event:
        return heapq.heappop(self._heap)

    def __len__(self) -> int:
        return len(self._heap)


def _sweep(queue: EventQueue, num_devices: int, wall: float, iteration: int, trace: list | None):
    computing = [0] * num_devices
    communicating = [0] * num_devices
    last = [0.0] * num_devices
    busy = [0.0] * num_devices
    blocked = [0.0] * num_devices
    idle = [0.0] * num_devices
    overlapped = [0.0] * num_devices
    now = 0.0
    while queue:
        ev = queue.pop()
        if ev.time < now:
            raise RuntimeError(f"event queue went backwards: {ev.time} < {now}")
        now = ev.time
        d = ev.device
        dt = ev.time - last[d]
        if dt > 0:
            if computing[d] and communicating[d]:
                busy[d] += dt
                overlapped[d] += dt
            elif computing[d]:
                busy[d] += dt
            elif communicating[d]:
                blocked[d] += dt
            else:
                idle[d] += dt
        last[d] = ev.time
        if ev.kind is EventKind.COMPUTE_START:
            computing[d] += 1
        elif ev.kind is EventKind.COMM_START:
            communicating[d] += 1
        elif ev.kind is EventKind.COMPUTE_END:
            computing[d] -= 1
        else:
            communicating[d] -= 1
        if trace is not None and ev.kind in (EventKind.COMPUTE_END, EventKind.COMM_END):
            trace.append(TraceRecord(iteration, d, ev.label, ev.segment_start, ev.time))
    for d in range(num_devices):
        if wall > last[d]:
            idle[d] += wall - last[d]
    return [DeviceTime(busy[d], blocked[d], idle[d], overlapped[d]) for d in range(num_devices)]


def memory_utilization(strategy: StrategyConfig, costs: CostParams) -> float:
    """Per-device bytes of parameter state plus stashed activations, over capacity."""
    T, S = strategy.tensor_degree, strategy.pipeline_stages
    split = max(costs.stage_split(S))
    activations = strategy.micro_batches * costs.activation_bytes_per_microbatch * split
    return (costs.model_state_bytes / (T * S) + activations) / costs.device_memory_bytes


def check_placement(strategy: StrategyConfig, topo: Topology, costs: CostParams | None = None) -> None:
    if strategy.devices_required > topo.num_devices:
        raise PlacementError(
            f"data_degree*tensor_degree*pipeline_stages = {strategy.devices_required} "
            f"exceeds the {topo.num_devices} devices of the topology"
        )
    if costs is not None:
        mem = memory_utilization(strategy, costs)
        if mem > 1.0:
            raise PlacementError(f"strategy needs {mem:.0%} of device memory")


def _straggler_factors(strategy: StrategyConfig, sync_skew: float) -> list[float]:
    """Compute slow-down per replica: the spread of P half-normal delays."""
    P = strategy.data_degree
    if P == 1 or sync_skew == 0:
        return [1.0] * P
    spread = sync_skew * math.sqrt(2 * math.log(P))
    return [1 + spread * p / (P - 1) for p in range(P)]


def _push_forward(queue: EventQueue, d: int, start: float, end: float, compute: float, tp: float, p2p: float):
    # [compute][tensor all-reduce][send to next stage]
    if tp == 0 and p2p == 0:
        queue.push_segment(d, start, end, "forward", compute=True)
        return
    compute_end = start + compute
    queue.push_segment(d, start, compute_end, "forward", compute=True)
    if tp > 0 and p2p > 0:
        queue.push_segment(d, compute_end, compute_end + tp, "tensor_allreduce", compute=False)
        queue.push_segment(d, compute_end + tp, end, "p2p", compute=False)
    else:
        queue.push_segment(d, compute_end, end, "tensor_allreduce" if tp > 0 else "p2p", compute=False)


def _push_backward(queue: EventQueue, d: int, start: float, end: float, compute: float, tp: float, p2p: float):
    # [receive from next stage][tensor all-reduce][compute]
    if tp == 0 and p2p == 0:
        queue.push_segment(d, start, end, "backward", compute=True)
        return
    compute_start = end - compute
    if tp > 0 and p2p > 0:
        queue.push_segment(d, start, start + p2p, "p2p", compute=False)
        queue.push_segment(d, start + p2p, compute_start, "tensor_allreduce", compute=False)
    else:
        queue.push_segment(d, start, compute_start, "tensor_allreduce" if tp > 0 else "p2p", compute=False)
    queue.push_segment(d, compute_start, end, "backward", compute=True)


def _simulate(
    strategy: StrategyConfig,
    topo: Topology,
    costs: CostParams,
    global_batch: int,
    iteration: int = 0,
    trace: list | None = None,
    check_memory: bool = True,
) -> IterationProfile:
    check_placement(strategy, topo, costs if check_memory else None)
    if global_batch < 1:
        raise ConfigError(f"global_batch must be >= 1, got {global_batch}")
    P, T = strategy.data_degree, strategy.tensor_degree
    S, M = strategy.pipeline_stages, strategy.micro_batches

    micro_batch = math.ceil(global_batch / (P * M))
    if micro_batch * P * M != global_batch:
        logger.warning(
            "global batch %d padded to %d to divide across %d replicas x %d micro-batches",
            global_batch, micro_batch * P * M, P, M,
        )

    split = costs.stage_split(S)
    ratio = costs.backward_to_forward_ratio
    fwd_compute = [
        micro_batch * costs.compute_time_per_sample_per_device * split[s] / (T * (1 + ratio)) for s in range(S)
    ]
    bwd_compute = [ratio * fc for fc in fwd_compute]
    factors = _straggler_factors(strategy, costs.sync_skew)

    def device(p: int, s: int, t: int = 0) -> int:
        return p * T * S + s * T + t

    act = costs.activation_bytes_per_microbatch
    schedules, tp, p2p_fwd, p2p_bwd = [], [], [], []
    for p in range(P):
        tp_p = [
            costs.tensor_allreduces_per_microbatch
            * split[s]
            * comm_cost(CollectiveAlgorithm.RING, act, T, topo, first_device=device(p, s))
            / 2
            for s in range(S)
        ]
        fwd_p = [topo.p2p_time(device(p, s - 1), device(p, s), act) if s > 0 else 0.0 for s in range(S)]
        bwd_p = [topo.p2p_time(device(p, s + 1), device(p, s), act) if s < S - 1 else 0.0 for s in range(S)]
        k = factors[p]
        schedules.append(
            build_pipeline_schedule(
                S,
                M,
                [fwd_compute[s] * k + tp_p[s] + fwd_p[s] for s in range(S)],
                [bwd_compute[s] * k + tp_p[s] + bwd_p[s] for s in range(S)],
            )
        )
        tp.append(tp_p)
        p2p_fwd.append(fwd_p)
        p2p_bwd.append(bwd_p)

    stage_end = [[max(slot.end for slot in sched.for_stage(s)) for s in range(S)] for sched in schedules]

    # gradient all-reduce per stage, over the P replicas holding that stage
    allreduce: list[dict[int, tuple[float, float]]] = [{} for _ in range(P)]
    if P > 1:
        for s in range(S):
            msg = costs.gradient_bytes * split[s] / T
            if msg == 0:
                continue
            msg /= wire_ratio(strategy.compressor, max(1, int(msg // 8)))
            x = comm_cost(strategy.collective, msg, P, topo, stride=T * S, first_device=s * T)
            if strategy.mode is Mode.SYNC:
                compute = M * (fwd_compute[s] + bwd_compute[s]) * max(factors)
                start = max(stage_end[p][s] for p in range(P)) - strategy.overlap_fraction * min(compute, x)
                for p in range(P):
                    allreduce[p][s] = (start, start + x)
            else:
                for p in range(P):
                    compute = M * (fwd_compute[s] + bwd_compute[s]) * factors[p]
                    start = stage_end[p][s] - strategy.overlap_fraction * min(compute, x)
                    allreduce[p][s] = (start, start + x)

    replica_wall = [max(stage_end[p] + [end for _, end in allreduce[p].values()]) for p in range(P)]
    wall = max(replica_wall)
    effective = wall if strategy.mode is Mode.SYNC else sum(replica_wall) / P

    queue = EventQueue()
    for p, sched in enumerate(schedules):
        k = factors[p]
        for s in range(S):
            for t in range(T):
                d = device(p, s, t)
                for slot in sched.for_stage(s):
                    if slot.phase is Phase.FORWARD:
                        _push_forward(queue, d, slot.start, slot.end, fwd_compute[s] * k, tp[p][s], p2p_fwd[p][s])
                    else:
                        _push_backward(queue, d, slot.start, slot.end, bwd_compute[s] * k, tp[p][s], p2p_bwd[p][s])
                if s in allreduce[p]:
                    start, end = allreduce[p][s]
                    queue.push_segment(d, start, end, "grad_allreduce", compute=False)

    num_devices = P * T * S
    devices = _sweep(queue, num_devices, wall, iteration, trace)
    n = float(num_devices)
    bubbles = sum(bubble_fraction(sched) for sched in schedules) / P
    return IterationProfile(
        compute_time=sum(d.busy for d in devices) / n,
        comm_time=sum(d.comm_blocked + d.overlapped for d in devices) / n,
        overlapped_time=sum(d.overlapped for d in devices) / n,
        idle_time=sum(d.idle for d in devices) / n,
        wall_time=wall,
        effective_time=effective,
        bubble_fraction=bubbles,
        devices=tuple(devices),
    )


def simulate_iteration(
    strategy: StrategyConfig, topo: Topology, costs: CostParams, global_batch: int
) -> IterationProfile:
    """
    Time decomposition of one training iteration

    Raises:
        PlacementError: strategy needs more devices or memory than available
    """
    return _simulate(strategy, topo, costs, global_batch)


def baseline_throughput(topo: Topology, costs: CostParams, global_batch: int) -> float:
    """Single-device, no-parallelism throughput under the same costs."""
    profile = _simulate(StrategyConfig(), topo, costs, global_batch, check_memory=False)
    return global_batch / profile.effective_time


def simulate_run(
    strategy: StrategyConfig,
    topo: Topology,
    costs: CostParams,
    global_batch: int,
    iterations: int = 1,
    trace_iterations: int = 0,
) -> SimReport:
    """
    Simulate several iterations and derive the report metrics

    Args:
        strategy: Parallelism strategy
        topo: Cluster topology
        costs: Cost-model parameters
        global_batch: Samples per iteration
        iterations: Iterations to average over
        trace_iterations: Leading iterations whose timeline is recorded

    Returns:
        SimReport
    """
    if iterations < 1:
        raise ConfigError(f"iterations must be >= 1, got {iterations}")
    profiles, trace = [], []
    for i in range(iterations):
        profiles.append(
            _simulate(strategy, topo, costs, global_batch, iteration=i, trace=trace if i < trace_iterations else None)
        )
    mean_effective = sum(p.effective_time for p in profiles) / iterations
    mean_wall = sum(p.wall_time for p in profiles) / iterations
    throughput = global_batch / mean_effective
    compute = sum(p.compute_time for p in profiles) / iterations
    blocked = sum(p.comm_blocked_time for p in profiles) / iterations
    return SimReport(
        throughput=throughput,
        speedup=throughput / baseline_throughput(topo, costs, global_batch),
        device_utilization=compute / mean_wall,
        comm_overhead_ms=blocked * 1e3,
        comm_share=blocked / mean_wall,
        memory_utilization=memory_utilization(strategy, costs),
        wall_time_ms=mean_wall * 1e3,
        profile=profiles[0],
        trace=tuple(trace),
    )


def comm_share_breakdown(profiles: Mapping[str, Sequence[IterationProfile]]) -> dict[str, float]:
    """Mean non-overlapped communication over mean wall time, per strategy."""
    if not profiles:
        raise ConfigError("comm_share_breakdown needs at least one strategy")
    shares = {}
    for name, runs in profiles.items():
        if not runs:
            raise ConfigError(f"no profiles for {name!r}")
        blocked = sum(p.comm_blocked_time for p in runs) / len(runs)
        wall = sum(p.wall_time for p in runs) / len(runs)
        shares[name] = blocked / wall
    return shares


def tune_micro_batches(
    strategy: StrategyConfig,
    topo: Topology,
    costs: CostParams,
    global_batch: int,
    candidates: Sequence[int],
) -> tuple[int, dict[int, float]]:
    """
    Pick the micro-batch count with the best simulated throughput

    Returns:
        (best M, throughput per candidate); ties go to the smaller M
    """
    if not candidates:
        raise ConfigError("no micro-batch candidates")
    results = {}
    for m in sorted(set(candidates)):
        profile = _simulate(replace(strategy, micro_batches=m), topo, costs, global_batch)
        results[m] = global_batch / profile.effective_time
    best = max(results, key=lambda m: (results[m], -m))
    logger.info("micro-batch sweep %s -> M=%d", results, best)
    return best, results
