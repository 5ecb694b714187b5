"""Interaction datasets: CSV ingestion, synthetic generation and the chronological split."""
from dataclasses import dataclass
from fractions import Fraction
import logging
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from errors import DatasetError
from numerics import SeededRng

logger = logging.getLogger(__name__)

COLUMNS = ["user_id", "item_id", "timestamp"]
ZIPF_EXPONENT = 1.1


@dataclass(frozen=True)
class InteractionDataset:
    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    num_users: int
    num_items: int
    duplicates_dropped: int = 0

    def __post_init__(self):
        n = self.users.shape[0]
        if self.items.shape[0] != n or self.timestamps.shape[0] != n:
            raise DatasetError("users, items and timestamps differ in length")
        if n and (self.users.min() < 0 or self.users.max() >= self.num_users):
            raise DatasetError(f"user ids must lie in [0, {self.num_users})")
        if n and (self.items.min() < 0 or self.items.max() >= self.num_items):
            raise DatasetError(f"item ids must lie in [0, {self.num_items})")

    def __len__(self) -> int:
        return int(self.users.shape[0])

    def take(self, index: np.ndarray) -> "InteractionDataset":
        return InteractionDataset(
            self.users[index], self.items[index], self.timestamps[index], self.num_users, self.num_items
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"user_id": self.users, "item_id": self.items, "timestamp": self.timestamps})


@dataclass(frozen=True)
class ChronoSplit:
    train: InteractionDataset
    validation: InteractionDataset
    test: InteractionDataset

    @property
    def num_users(self) -> int:
        return self.train.num_users

    @property
    def num_items(self) -> int:
        return self.train.num_items

    def interacted(self) -> dict[int, np.ndarray]:
        """Sorted unique items per user across all three parts."""
        users = np.concatenate([self.train.users, self.validation.users, self.test.users])
        items = np.concatenate([self.train.items, self.validation.items, self.test.items])
        frame = pd.DataFrame({"user": users, "item": items}).drop_duplicates()
        return {int(u): np.sort(g["item"].to_numpy()) for u, g in frame.groupby("user", sort=True)}


def load_dataset(path: str | Path) -> InteractionDataset:
    """
    Read an interaction CSV with header user_id,item_id,timestamp

    Ids are re-indexed densely in ascending order of their original value;
    duplicate (user, item, timestamp) triples are dropped and counted.

    Raises:
        DatasetError: missing or empty file, wrong header, non-integer field
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=False, encoding="utf-8")
    except pd.errors.EmptyDataError as e:
        raise DatasetError(f"{path} is empty") from e
    except pd.errors.ParserError as e:
        raise DatasetError(f"{path}: {e}") from e

    if list(frame.columns) != COLUMNS:
        raise DatasetError(f"header must be {','.join(COLUMNS)}, got {','.join(map(str, frame.columns))}", line=1)
    if frame.empty:
        raise DatasetError(f"{path} has no interactions")

    parsed = {}
    for column in COLUMNS:
        raw = frame[column].str.strip()
        bad = ~raw.str.fullmatch(r"[+-]?\d+")
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            # header is line 1
            raise DatasetError(f"non-integer {column} {frame[column].iloc[row]!r}", line=row + 2)
        parsed[column] = raw.astype(np.int64).to_numpy()

    table = pd.DataFrame(parsed)
    before = len(table)
    table = table.drop_duplicates(ignore_index=True)
    duplicates = before - len(table)
    if duplicates:
        logger.info("dropped %d duplicate interactions from %s", duplicates, path)

    user_ids, users = np.unique(table["user_id"].to_numpy(), return_inverse=True)
    item_ids, items = np.unique(table["item_id"].to_numpy(), return_inverse=True)
    return InteractionDataset(
        users=users.astype(np.int64),
        items=items.astype(np.int64),
        timestamps=table["timestamp"].to_numpy(),
        num_users=len(user_ids),
        num_items=len(item_ids),
        duplicates_dropped=duplicates,
    )


def chrono_split(ds: InteractionDataset, ratios: Sequence[float] = (0.8, 0.1, 0.1)) -> ChronoSplit:
    """
    Chronological train/validation/test split

    Records are ordered by (timestamp, user, item) and cut at
    floor(r0*N) and floor((r0+r1)*N).
    """
    n = len(ds)
    if n < 10:
        raise DatasetError(f"chronological split needs at least 10 interactions, got {n}")
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise DatasetError(f"ratios must be three non-negative fractions, got {ratios}")
    fractions = [Fraction(str(r)) for r in ratios]
    if sum(fractions) != 1:
        raise DatasetError(f"ratios must sum to 1, got {ratios}")

    order = np.lexsort((ds.items, ds.users, ds.timestamps))
    train_end = int(fractions[0] * n)
    val_end = int((fractions[0] + fractions[1]) * n)
    return ChronoSplit(
        train=ds.take(order[:train_end]),
        validation=ds.take(order[train_end:val_end]),
        test=ds.take(order[val_end:]),
    )


def generate_synthetic(num_users: int, num_items: int, num_interactions: int, seed: int) -> InteractionDataset:
    """
    Zipf-popular items, uniform users, strictly increasing timestamps

    Item 0 is the most popular; item r has weight (r + 1) ** -1.1.
    """
    if min(num_users, num_items, num_interactions) < 1:
        raise DatasetError("synthetic counts must be >= 1")
    rng = SeededRng(seed)
    weights = np.arange(1, num_items + 1, dtype=np.float64) ** -ZIPF_EXPONENT
    items = rng.choice(num_items, size=num_interactions, p=weights / weights.sum())
    users = rng.integers(0, num_users, size=num_interactions)
    timestamps = 1_600_000_000 + np.cumsum(rng.integers(1, 61, size=num_interactions))
    return InteractionDataset(
        users=np.asarray(users, dtype=np.int64),
        items=np.asarray(items, dtype=np.int64),
        timestamps=np.asarray(timestamps, dtype=np.int64),
        num_users=num_users,
        num_items=num_items,
    )
