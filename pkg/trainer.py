"""
Matrix-factorisation recommender trained under emulated data parallelism.

The model scores a (user, item) pair as <p_u, q_i> + b_i and is fitted with
the pairwise logistic (BPR) loss, one sampled negative per positive. Each
step the global batch is split into contiguous shards, one per virtual
worker; the workers' gradients are combined synchronously or applied one by
one with staleness damping.
"""
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
from pathlib import Path

import numpy as np
from scipy.special import expit

from collectives import WorkerGroup
from compression import CompressorKind
from config import Config
from dataset import ChronoSplit, InteractionDataset
from errors import ConfigError, DatasetError, NumericError, ShapeError
from numerics import SeededRng
from strategies import (
    HyperParams,
    Mode,
    StalenessTracker,
    StrategyConfig,
    async_step,
    compress_contribution,
    fresh_ef_states,
    sync_data_parallel_step,
)

logger = logging.getLogger(__name__)

INIT_SCALE = 0.01
NEGATIVE_RETRIES = 20


@dataclass
class RecModel:
    user_factors: np.ndarray
    item_factors: np.ndarray
    item_bias: np.ndarray

    def __post_init__(self):
        if self.user_factors.ndim != 2 or self.item_factors.ndim != 2:
            raise ShapeError("factor matrices must be 2-D")
        if self.user_factors.shape[1] != self.item_factors.shape[1] or self.user_factors.shape[1] < 1:
            raise ShapeError("user and item factors need the same dimension d >= 1")
        if self.item_bias.shape != (self.item_factors.shape[0],):
            raise ShapeError("item_bias needs one entry per item")

    @classmethod
    def init(cls, num_users: int, num_items: int, dim: int, rng: SeededRng) -> "RecModel":
        return cls(
            user_factors=rng.uniform(-INIT_SCALE, INIT_SCALE, (num_users, dim)),
            item_factors=rng.uniform(-INIT_SCALE, INIT_SCALE, (num_items, dim)),
            item_bias=np.zeros(num_items),
        )

    @property
    def dim(self) -> int:
        return int(self.user_factors.shape[1])

    @property
    def num_users(self) -> int:
        return int(self.user_factors.shape[0])

    @property
    def num_items(self) -> int:
        return int(self.item_factors.shape[0])

    def blocks(self) -> list[tuple[int, int]]:
        """Flat-vector slices of user factors, item factors and item bias."""
        u = self.user_factors.size
        i = self.item_factors.size
        return [(0, u), (u, u + i), (u + i, u + i + self.item_bias.size)]

    def params(self) -> np.ndarray:
        return np.concatenate([self.user_factors.ravel(), self.item_factors.ravel(), self.item_bias])

    def with_params(self, theta: np.ndarray) -> "RecModel":
        (_, u_end), (_, i_end), _ = self.blocks()
        return RecModel(
            user_factors=theta[:u_end].reshape(self.user_factors.shape),
            item_factors=theta[u_end:i_end].reshape(self.item_factors.shape),
            item_bias=theta[i_end:],
        )

    def score(self, user: int, items: np.ndarray) -> np.ndarray:
        return self.item_factors[items] @ self.user_factors[user] + self.item_bias[items]

    def save(self, path: str | Path) -> None:
        np.savez(path, user_factors=self.user_factors, item_factors=self.item_factors, item_bias=self.item_bias)

    @classmethod
    def load(cls, path: str | Path) -> "RecModel":
        path = Path(path)
        if not path.exists():
            raise DatasetError(f"saved model not found: {path}")
        with np.load(path) as data:
            return cls(data["user_factors"], data["item_factors"], data["item_bias"])


@dataclass(frozen=True)
class Triples:
    users: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __len__(self) -> int:
        return int(self.users.shape[0])

    def shard(self, index: np.ndarray) -> "Triples":
        return Triples(self.users[index], self.positives[index], self.negatives[index])


def bpr_loss(model: RecModel, batch: Triples, reg: float = 0.0) -> float:
    """Mean softplus(-x) over the batch plus (reg/2)*||theta||^2."""
    x = _margins(model, batch)
    penalty = 0.5 * reg * float(np.dot(model.params(), model.params())) if reg else 0.0
    return float(np.logaddexp(0.0, -x).mean()) + penalty


def _margins(model: RecModel, batch: Triples) -> np.ndarray:
    p = model.user_factors[batch.users]
    diff = model.item_factors[batch.positives] - model.item_factors[batch.negatives]
    return np.einsum("nd,nd->n", p, diff) + model.item_bias[batch.positives] - model.item_bias[batch.negatives]


def bpr_gradient(model: RecModel, batch: Triples, reg: float = 0.0) -> tuple[float, np.ndarray]:
    """
    Analytic BPR loss and gradient

    Returns:
        (loss, flat gradient in RecModel.params() layout)
    """
    x = _margins(model, batch)
    n = len(batch)
    loss = float(np.logaddexp(0.0, -x).mean())
    coef = -expit(-x) / n  # d loss / d x per sample

    p = model.user_factors[batch.users]
    q_pos = model.item_factors[batch.positives]
    q_neg = model.item_factors[batch.negatives]
    g_users = np.zeros_like(model.user_factors)
    g_items = np.zeros_like(model.item_factors)
    g_bias = np.zeros_like(model.item_bias)
    np.add.at(g_users, batch.users, coef[:, None] * (q_pos - q_neg))
    np.add.at(g_items, batch.positives, coef[:, None] * p)
    np.add.at(g_items, batch.negatives, -coef[:, None] * p)
    np.add.at(g_bias, batch.positives, coef)
    np.add.at(g_bias, batch.negatives, -coef)

    grad = np.concatenate([g_users.ravel(), g_items.ravel(), g_bias])
    if reg:
        theta = model.params()
        grad += reg * theta
        loss += 0.5 * reg * float(np.dot(theta, theta))
    return loss, grad


class TripleSampler:
    """Uniform positives from the training set, negatives the user never saw in training."""

    def __init__(self, train: InteractionDataset, rng: SeededRng):
        if len(train) == 0:
            raise DatasetError("training set is empty")
        self.train = train
        self.rng = rng
        self._seen = np.unique(train.users * train.num_items + train.items)

    def _is_seen(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        keys = users * self.train.num_items + items
        pos = np.searchsorted(self._seen, keys)
        pos = np.minimum(pos, self._seen.size - 1)
        return self._seen[pos] == keys

    def draw(self, batch_size: int) -> Triples:
        idx = self.rng.integers(0, len(self.train), size=batch_size)
        users = self.train.users[idx]
        negatives = self.rng.integers(0, self.train.num_items, size=batch_size)
        for _ in range(NEGATIVE_RETRIES):
            clash = np.flatnonzero(self._is_seen(users, negatives))
            if clash.size == 0:
                break
            negatives[clash] = self.rng.integers(0, self.train.num_items, size=clash.size)
        return Triples(users, self.train.items[idx], negatives)


@dataclass(frozen=True)
class LossPoint:
    step: int
    loss: float


@dataclass
class TrainResult:
    model: RecModel
    loss_curve: list[LossPoint] = field(default_factory=list)
    ef_identity_error: float = 0.0
    max_staleness_seen: int = 0
    dropped_updates: int = 0


def _check_preconditions(strategy: StrategyConfig, h: HyperParams) -> None:
    if strategy.tensor_degree != 1 or strategy.pipeline_stages != 1:
        raise ConfigError("training runs data parallelism only: tensor_degree and pipeline_stages must be 1")
    if h.batch_size % strategy.data_degree:
        raise ConfigError(
            f"batch_size {h.batch_size} must be divisible by data_degree {strategy.data_degree}"
        )


def _identity_error(states_before, states_after, g, contribution, blocks) -> float:
    worst = 0.0
    for (start, stop), before, after in zip(blocks, states_before, states_after):
        lhs = after.residual + contribution[start:stop]
        rhs = before.residual + g[start:stop]
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst


def train(
    model: RecModel,
    split: ChronoSplit,
    strategy: StrategyConfig,
    h: HyperParams,
    seed: int,
    loss_every: int = Config.LOSS_EVERY,
    max_workers: int = 1,
    max_staleness: int | None = None,
) -> TrainResult:
    """
    Train with P virtual data-parallel workers

    Args:
        model: Initial model (not modified)
        split: Chronological split; only the training part is used
        strategy: Data degree, sync/async mode, collective and compressor
        h: Learning rate, global batch size, steps, L2 weight
        seed: Seed for batch and negative sampling
        loss_every: Steps per loss-curve point
        max_workers: Threads used for per-worker gradients
        max_staleness: Async gradients staler than this are dropped

    Returns:
        TrainResult with the trained model and loss curve
    """
    _check_preconditions(strategy, h)
    P = strategy.data_degree
    sampler = TripleSampler(split.train, SeededRng(seed))
    shards = np.array_split(np.arange(h.batch_size), P)
    blocks = model.blocks()
    compressing = strategy.compressor.kind is not CompressorKind.NONE
    theta = model.params()
    ef_states = [fresh_ef_states(theta.size, blocks) for _ in range(P)] if compressing else None
    result = TrainResult(model=model)

    executor = ThreadPoolExecutor(max_workers=max_workers) if max_workers > 1 else None
    window: list[float] = []

    def gradients(param_sets, batch):
        jobs = [(model.with_params(params), batch.shard(shard)) for params, shard in zip(param_sets, shards)]
        if executor is None:
            return [bpr_gradient(m, b, h.reg) for m, b in jobs]
        return list(executor.map(lambda job: bpr_gradient(job[0], job[1], h.reg), jobs))

    try:
        if strategy.mode is Mode.SYNC:
            for step in range(h.steps):
                batch = sampler.draw(h.batch_size)
                outputs = gradients([theta] * P, batch)
                grads = [g for _, g in outputs]
                step_result = sync_data_parallel_step(WorkerGroup(grads), theta, h, strategy, ef_states, blocks)
                if compressing:
                    for p in range(P):
                        err = _identity_error(
                            ef_states[p], step_result.ef_states[p], grads[p], step_result.contributions[p], blocks
                        )
                        result.ef_identity_error = max(result.ef_identity_error, err)
                    ef_states = step_result.ef_states
                theta = step_result.params
                _record(result, window, step, h.steps, loss_every, float(np.mean([loss for loss, _ in outputs])))
        else:
            theta = _train_async(
                theta, sampler, shards, strategy, h, blocks, ef_states, result, window, loss_every,
                model, max_staleness,
            )
    finally:
        if executor is not None:
            executor.shutdown()

    result.model = model.with_params(theta)
    if not np.all(np.isfinite(theta)):
        raise NumericError("training diverged to non-finite parameters")
    return result


def _train_async(theta, sampler, shards, strategy, h, blocks, ef_states, result, window, loss_every, model, max_staleness):
    """
    Round-robin asynchronous updates

    Within a step workers update in index order; worker p computes its
    gradient on the parameters as they were (p mod 4) updates earlier.
    """
    P = strategy.data_degree
    delays = [p % Config.ASYNC_DELAY_PERIOD for p in range(P)]
    tracker = StalenessTracker(P)
    history: deque = deque([theta], maxlen=max(delays) + 1)
    for step in range(h.steps):
        batch = sampler.draw(h.batch_size)
        losses = []
        for p in range(P):
            pulled = max(0, tracker.version - delays[p])
            tracker.pull(p, pulled)
            stale_theta = history[pulled - tracker.version - 1]
            loss, g = bpr_gradient(model.with_params(stale_theta), batch.shard(shards[p]), h.reg)
            losses.append(loss)
            tau = tracker.staleness(p)
            result.max_staleness_seen = max(result.max_staleness_seen, tau)
            if max_staleness is not None and tau > max_staleness:
                result.dropped_updates += 1
                continue
            if ef_states is not None:
                before = ef_states[p]
                g_hat, ef_states[p] = compress_contribution(g, before, strategy.compressor, blocks)
                result.ef_identity_error = max(
                    result.ef_identity_error, _identity_error(before, ef_states[p], g, g_hat, blocks)
                )
            else:
                g_hat = g
            theta = async_step(theta, g_hat, tau, h.learning_rate)
            tracker.advance()
            history.append(theta)
        _record(result, window, step, h.steps, loss_every, float(np.mean(losses)))
    return theta


def _record(result: TrainResult, window: list, step: int, steps: int, loss_every: int, loss: float) -> None:
    window.append(loss)
    done = step + 1
    if done % loss_every == 0 or done == steps:
        result.loss_curve.append(LossPoint(done, float(np.mean(window))))
        logger.debug("step %d loss %.6f", done, result.loss_curve[-1].loss)
        window.clear()
