"""
Data, tensor, pipeline and expert parallelism.

Each mechanism is implemented numerically over in-process virtual workers:
synchronous and asynchronous SGD steps, a column-split matmul, fill-drain
pipeline schedules, and a hash-gated mixture-of-experts router.
"""
from dataclasses import dataclass, field
from enum import Enum
import logging
import math
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike

from collectives import CollectiveAlgorithm, WorkerGroup, allreduce_mean, allreduce_sum
from compression import CompressorConfig, CompressorKind, ErrorFeedbackState, decompress, ef_compress_step
from errors import ConfigError, ShapeError
from numerics import DenseVector, as_matrix, as_vector, splitmix64, vec_axpy

logger = logging.getLogger(__name__)


class Mode(str, Enum):
    SYNC = "sync"
    ASYNC = "async"


@dataclass(frozen=True)
class StrategyConfig:
    data_degree: int = 1
    tensor_degree: int = 1
    pipeline_stages: int = 1
    micro_batches: int = 1
    mode: Mode = Mode.SYNC
    collective: CollectiveAlgorithm = CollectiveAlgorithm.RING
    compressor: CompressorConfig = field(default_factory=CompressorConfig)
    overlap_fraction: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "collective", CollectiveAlgorithm(self.collective))
        for name in ("data_degree", "tensor_degree", "pipeline_stages", "micro_batches"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise ConfigError(f"overlap_fraction must be in [0, 1], got {self.overlap_fraction}")

    @property
    def devices_required(self) -> int:
        return self.data_degree * self.tensor_degree * self.pipeline_stages


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float
    batch_size: int = 256
    steps: int = 1000
    reg: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.steps < 0 or self.reg < 0:
            raise ConfigError("batch_size must be >= 1, steps and reg >= 0")


Blocks = Sequence[tuple[int, int]]


def _whole(dim: int, blocks: Blocks | None) -> Blocks:
    return blocks if blocks is not None else [(0, dim)]


def fresh_ef_states(dim: int, blocks: Blocks | None = None) -> list[ErrorFeedbackState]:
    return [ErrorFeedbackState.zeros(stop - start) for start, stop in _whole(dim, blocks)]


def compress_contribution(
    g: DenseVector,
    states: Sequence[ErrorFeedbackState],
    cfg: CompressorConfig,
    blocks: Blocks | None = None,
) -> tuple[DenseVector, list[ErrorFeedbackState]]:
    """
    Pass one worker's gradient through error-feedback compression

    Each block is compressed independently with its own residual.

    Returns:
        (decompressed gradient as the aggregator sees it, new states)
    """
    parts, new_states = [], []
    for (start, stop), state in zip(_whole(g.shape[0], blocks), states):
        message, new_state = ef_compress_step(state, g[start:stop], cfg)
        parts.append(decompress(message))
        new_states.append(new_state)
    return np.concatenate(parts), new_states


@dataclass(frozen=True)
class SyncStepResult:
    params: DenseVector
    ef_states: list[list[ErrorFeedbackState]] | None
    contributions: list[DenseVector]


def sync_data_parallel_step(
    workers: WorkerGroup,
    params: ArrayLike,
    h: HyperParams,
    cfg: StrategyConfig,
    ef_states: list[list[ErrorFeedbackState]] | None = None,
    blocks: Blocks | None = None,
) -> SyncStepResult:
    """
    One synchronous data-parallel update

    Workers compress locally; the aggregator averages the decompressed
    contributions and every replica applies the same SGD step.

    Args:
        workers: Per-worker gradients for the same params
        params: Current parameters
        h: Hyper-parameters (learning rate)
        cfg: Strategy (collective and compressor)
        ef_states: Per-worker residuals, required when compressing
        blocks: Parameter slices compressed independently

    Returns:
        SyncStepResult with the updated parameters
    """
    theta = as_vector(params, "params")
    if workers.dim != theta.shape[0]:
        raise ShapeError(f"gradient dim {workers.dim} does not match params dim {theta.shape[0]}")

    if cfg.compressor.kind is CompressorKind.NONE:
        contributions = list(workers.buffers)
        new_states = ef_states
    else:
        if ef_states is None:
            ef_states = [fresh_ef_states(workers.dim, blocks) for _ in range(workers.size)]
        if len(ef_states) != workers.size:
            raise ShapeError(f"{len(ef_states)} residual sets for {workers.size} workers")
        contributions, new_states = [], []
        for g, states in zip(workers.buffers, ef_states):
            contribution, updated = compress_contribution(g, states, cfg.compressor, blocks)
            contributions.append(contribution)
            new_states.append(updated)

    group = WorkerGroup(contributions, topology=workers.topology, devices=workers.devices)
    mean = allreduce_mean(group, cfg.collective)
    return SyncStepResult(vec_axpy(-h.learning_rate, mean, theta), new_states, contributions)


def async_step(params: ArrayLike, g_p: ArrayLike, tau_p: int, eta: float) -> DenseVector:
    """Staleness-damped SGD: params - eta * g_p / (1 + tau_p)."""
    if tau_p < 0:
        raise ConfigError(f"staleness must be >= 0, got {tau_p}")
    theta = as_vector(params, "params")
    g = as_vector(g_p, "g_p")
    if g.shape != theta.shape:
        raise ShapeError(f"gradient dim {g.shape[0]} does not match params dim {theta.shape[0]}")
    if tau_p == 0:
        return vec_axpy(-eta, g, theta)
    return vec_axpy(-eta / (1 + tau_p), g, theta)


class StalenessTracker:
    """Counts global updates since each worker last pulled parameters."""

    def __init__(self, num_workers: int):
        if num_workers < 1:
            raise ConfigError("need at least one worker")
        self.version = 0
        self._pulled = [0] * num_workers
        self.max_seen = 0

    def pull(self, worker: int, version: int | None = None) -> None:
        version = self.version if version is None else version
        if not 0 <= version <= self.version:
            raise ConfigError(f"cannot pull version {version} at version {self.version}")
        self._pulled[worker] = version

    def staleness(self, worker: int) -> int:
        tau = self.version - self._pulled[worker]
        self.max_seen = max(self.max_seen, tau)
        return tau

    def advance(self) -> int:
        self.version += 1
        return self.version


def tensor_parallel_matmul(A: ArrayLike, x: ArrayLike, T: int) -> DenseVector:
    """
    Column-split matmul

    A is split into T column shards (the last zero-padded when T does not
    divide the width) and x into matching row shards; each shard's partial
    product is summed with a ring all-reduce.
    """
    am = as_matrix(A, "A")
    xv = as_vector(x, "x")
    if am.shape[1] != xv.shape[0]:
        raise ShapeError(f"tensor_parallel_matmul shape mismatch: {am.shape} x ({xv.shape[0]},)")
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if T == 1:
        return am @ xv
    width = math.ceil(am.shape[1] / T)
    pad = width * T - am.shape[1]
    if pad:
        am = np.hstack([am, np.zeros((am.shape[0], pad))])
        xv = np.concatenate([xv, np.zeros(pad)])
    partials = [am[:, t * width:(t + 1) * width] @ xv[t * width:(t + 1) * width] for t in range(T)]
    return allreduce_sum(WorkerGroup(partials), CollectiveAlgorithm.RING)


class Phase(str, Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


@dataclass(frozen=True)
class ScheduleSlot:
    stage: int
    micro_batch: int
    phase: Phase
    start: float
    end: float


@dataclass(frozen=True)
class PipelineSchedule:
    stages: int
    micro_batches: int
    slots: tuple[ScheduleSlot, ...]

    @property
    def span(self) -> float:
        return max(s.end for s in self.slots) - min(s.start for s in self.slots)

    def for_stage(self, stage: int) -> list[ScheduleSlot]:
        return sorted((s for s in self.slots if s.stage == stage), key=lambda s: s.start)


def _per_stage(cost: float | Sequence[float], S: int, name: str) -> list[float]:
    costs = [float(cost)] * S if np.isscalar(cost) else [float(c) for c in cost]
    if len(costs) != S:
        raise ConfigError(f"{name} needs {S} entries, got {len(costs)}")
    if any(not c > 0 for c in costs):
        raise ConfigError(f"{name} must be > 0")
    return costs


def build_pipeline_schedule(
    S: int,
    M: int,
    fwd_cost: float | Sequence[float],
    bwd_cost: float | Sequence[float],
) -> PipelineSchedule:
    """Fill-drain schedule: all forwards in micro-batch order, then all backwards."""
    if S < 1 or M < 1:
        raise ConfigError(f"S and M must be >= 1, got S={S}, M={M}")
    fwd = _per_stage(fwd_cost, S, "fwd_cost")
    bwd = _per_stage(bwd_cost, S, "bwd_cost")
    free = [0.0] * S
    fwd_end = [[0.0] * M for _ in range(S)]
    bwd_end = [[0.0] * M for _ in range(S)]
    slots = []
    for m in range(M):
        for s in range(S):
            start = free[s] if s == 0 else max(free[s], fwd_end[s - 1][m])
            fwd_end[s][m] = free[s] = start + fwd[s]
            slots.append(ScheduleSlot(s, m, Phase.FORWARD, start, fwd_end[s][m]))
    for m in range(M):
        for s in reversed(range(S)):
            start = free[s] if s == S - 1 else max(free[s], bwd_end[s + 1][m])
            bwd_end[s][m] = free[s] = start + bwd[s]
            slots.append(ScheduleSlot(s, m, Phase.BACKWARD, start, bwd_end[s][m]))
    return PipelineSchedule(S, M, tuple(slots))


def bubble_fraction(sched: PipelineSchedule) -> float:
    """Idle stage-time over total stage-time, counted from the slots."""
    span = sched.span
    busy = sum(s.end - s.start for s in sched.slots)
    total = sched.stages * span
    return (total - busy) / total


@dataclass(frozen=True)
class MoEConfig:
    num_experts: int
    active_k: int = 1
    seed: int = 0
    capacity_factor: float | None = None

    def __post_init__(self):
        if self.num_experts < 1:
            raise ConfigError(f"num_experts must be >= 1, got {self.num_experts}")
        if not 1 <= self.active_k <= self.num_experts:
            raise ConfigError(f"active_k must be in [1, {self.num_experts}], got {self.active_k}")
        if self.capacity_factor is not None and not self.capacity_factor > 0:
            raise ConfigError(f"capacity_factor must be > 0, got {self.capacity_factor}")


@dataclass(frozen=True)
class LoadBalanceReport:
    counts: np.ndarray
    imbalance: float
    dropped: int = 0


def gate_scores(inputs: np.ndarray, cfg: MoEConfig) -> np.ndarray:
    """Hash gate: uniform score in [0, 1) per (input, expert), fixed by cfg.seed."""
    keys = (
        np.asarray(inputs, dtype=np.uint64)[:, None] * np.uint64(cfg.num_experts)
        + np.arange(cfg.num_experts, dtype=np.uint64)[None, :]
    )
    salted = splitmix64(keys ^ splitmix64(np.uint64(cfg.seed)))
    return (salted >> np.uint64(11)).astype(np.float64) / float(2**53)


def moe_route(batch: Sequence[int], cfg: MoEConfig) -> tuple[list[list[int]], LoadBalanceReport]:
    """
    Assign each input to its active_k highest-scoring experts

    Returns:
        (per-input expert lists in descending score order, load report)
    """
    inputs = np.asarray(batch, dtype=np.int64)
    if inputs.size == 0:
        return [], LoadBalanceReport(np.zeros(cfg.num_experts, dtype=np.int64), 1.0)
    scores = gate_scores(inputs, cfg)
    chosen = np.argsort(-scores, axis=1, kind="stable")[:, : cfg.active_k]

    capacity = None
    if cfg.capacity_factor is not None:
        capacity = math.ceil(cfg.capacity_factor * inputs.size * cfg.active_k / cfg.num_experts)
    counts = np.zeros(cfg.num_experts, dtype=np.int64)
    routes, dropped = [], 0
    for row in chosen:
        kept = []
        for expert in row.tolist():
            if capacity is not None and counts[expert] >= capacity:
                dropped += 1
                continue
            counts[expert] += 1
            kept.append(expert)
        routes.append(kept)

    mean = counts.mean()
    imbalance = float(counts.max() / mean) if mean > 0 else 1.0
    if dropped:
        logger.info("MoE capacity %s dropped %d of %d assignments", capacity, dropped, inputs.size * cfg.active_k)
    return routes, LoadBalanceReport(counts, imbalance, dropped)
