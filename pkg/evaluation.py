"""Sampled top-K evaluation (HR@K, NDCG@K) on the test part of a split."""
from dataclasses import dataclass
import logging
from typing import Protocol

import numpy as np

from config import Config
from dataset import ChronoSplit
from errors import DatasetError
from numerics import SeededRng

logger = logging.getLogger(__name__)


class Scorer(Protocol):
    def score(self, user: int, items: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class EvalResult:
    hr_at_10: float
    ndcg_at_10: float
    num_eval_users: int
    skipped: int = 0
    k: int = Config.EVAL_K


def rank_of_first(scores: np.ndarray, items: np.ndarray) -> int:
    """1-based rank of candidate 0; equal scores are ordered by item id."""
    target_score, target_item = scores[0], items[0]
    ahead = (scores[1:] > target_score) | ((scores[1:] == target_score) & (items[1:] < target_item))
    return 1 + int(np.count_nonzero(ahead))


def evaluate_topk(
    model: Scorer,
    split: ChronoSplit,
    K: int = Config.EVAL_K,
    negatives: int = Config.EVAL_NEGATIVES,
    seed: int = Config.DEFAULT_SEED,
) -> EvalResult:
    """
    Rank each test item against sampled negatives

    For every test interaction the candidates are the true item followed by
    up to `negatives` items drawn without replacement from those the user
    never interacted with; the model scores them in that order.

    Args:
        model: Anything with score(user, items)
        split: Chronological split; its test part is evaluated
        K: Cut-off
        negatives: Negatives per test interaction
        seed: Seed for negative sampling

    Returns:
        EvalResult; interactions whose user has no candidate negatives are skipped and counted
    """
    test = split.test
    if len(test) == 0:
        raise DatasetError("test set is empty")
    rng = SeededRng(seed)
    interacted = split.interacted()
    all_items = np.arange(split.num_items)
    hits, gains, evaluated, skipped = 0, 0.0, 0, 0

    for user, item in zip(test.users.tolist(), test.items.tolist()):
        pool = np.setdiff1d(all_items, interacted[user], assume_unique=True)
        if pool.size == 0:
            skipped += 1
            continue
        sampled = rng.choice(pool, size=min(negatives, pool.size), replace=False)
        candidates = np.concatenate([[item], sampled]).astype(np.int64)
        rank = rank_of_first(np.asarray(model.score(user, candidates), dtype=np.float64), candidates)
        evaluated += 1
        if rank <= K:
            hits += 1
            gains += 1.0 / np.log2(rank + 1)

    if skipped:
        logger.warning("skipped %d test interactions with no candidate negatives", skipped)
    if evaluated == 0:
        return EvalResult(0.0, 0.0, 0, skipped, K)
    return EvalResult(hits / evaluated, gains / evaluated, evaluated, skipped, K)
