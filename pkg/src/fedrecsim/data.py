"""Interaction logs, leave-one-out splits and per-client batch sampling."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

logger = logging.getLogger(__name__)

MIN_INTERACTIONS = 3


class DataFormatError(ValueError):
    """Raised for malformed interaction files."""


class ConfigurationError(ValueError):
    """Raised when dataset or sampling parameters cannot be satisfied."""


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    timestamp: int


@dataclass(frozen=True)
class TrainingExample:
    user_id: int
    positive: int
    negatives: tuple[int, ...] = ()


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    """Immutable leave-one-out split of an implicit-feedback log.

    ``train[u]`` holds the user's items in timestamp order minus the last two;
    ``valid[u]`` is the second-to-last item and ``test[u]`` the last one.
    """

    num_users: int
    num_items: int
    train: tuple[np.ndarray, ...]
    valid: np.ndarray
    test: np.ndarray
    num_dropped_users: int = 0
    _history: tuple[np.ndarray, ...] = field(default=(), repr=False)

    def __post_init__(self):
        if not self._history:
            hist = tuple(
                np.unique(np.concatenate([tr, [va, te]])).astype(np.int64)
                for tr, va, te in zip(self.train, self.valid, self.test)
            )
            object.__setattr__(self, "_history", hist)
        for arr in (*self.train, self.valid, self.test, *self._history):
            arr.setflags(write=False)

    @property
    def num_interactions(self) -> int:
        return sum(len(t) for t in self.train) + 2 * self.num_users

    def history(self, user_id: int) -> np.ndarray:
        """Sorted unique items the user touched across train, validation and test."""
        return self._history[user_id]

    def full_sequence(self, user_id: int) -> np.ndarray:
        return np.concatenate([self.train[user_id], [self.valid[user_id], self.test[user_id]]])

    def negative_pool(self, user_id: int) -> np.ndarray:
        return np.setdiff1d(np.arange(self.num_items), self._history[user_id], assume_unique=True)

    def fingerprint(self) -> str:
        """SHA-256 over the split arrays; equal datasets give equal digests."""
        h = hashlib.sha256()
        h.update(np.array([self.num_users, self.num_items], dtype=np.int64).tobytes())
        for tr in self.train:
            h.update(np.int64(len(tr)).tobytes())
            h.update(tr.astype(np.int64).tobytes())
        h.update(self.valid.astype(np.int64).tobytes())
        h.update(self.test.astype(np.int64).tobytes())
        return h.hexdigest()


def from_interactions(interactions: Iterable[Interaction]) -> InteractionDataset:
    """Build a split from raw interactions with arbitrary (hashable) ids.

    Users and items are re-indexed densely in first-appearance order after
    users with fewer than three interactions are dropped. Timestamp ties keep
    the input order.
    """
    per_user: dict[object, list[tuple[int, int, object]]] = {}
    order = 0
    for it in interactions:
        per_user.setdefault(it.user_id, []).append((it.timestamp, order, it.item_id))
        order += 1

    kept = {}
    dropped = 0
    for raw_user, rows in per_user.items():
        if len(rows) < MIN_INTERACTIONS:
            dropped += 1
            continue
        kept[raw_user] = rows
    if dropped:
        logger.warning("dropped %d users with fewer than %d interactions", dropped, MIN_INTERACTIONS)
    if not kept:
        raise DataFormatError("no user has at least %d interactions" % MIN_INTERACTIONS)

    # first appearance in input order, over the retained rows only
    retained = sorted(
        ((o, u, item) for u, rows in kept.items() for (_, o, item) in rows), key=lambda r: r[0]
    )
    user_index: dict[object, int] = {}
    item_index: dict[object, int] = {}
    for _, u, item in retained:
        if u not in user_index:
            user_index[u] = len(user_index)
        if item not in item_index:
            item_index[item] = len(item_index)

    num_users = len(user_index)
    train: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * num_users
    valid = np.empty(num_users, dtype=np.int64)
    test = np.empty(num_users, dtype=np.int64)
    for raw_user, rows in kept.items():
        u = user_index[raw_user]
        rows = sorted(rows, key=lambda r: (r[0], r[1]))
        seq = np.array([item_index[r[2]] for r in rows], dtype=np.int64)
        train[u] = seq[:-2]
        valid[u] = seq[-2]
        test[u] = seq[-1]
    return InteractionDataset(
        num_users=num_users,
        num_items=len(item_index),
        train=tuple(train),
        valid=valid,
        test=test,
        num_dropped_users=dropped,
    )


def parse_ml1m_lines(lines: Iterable[str]) -> list[Interaction]:
    out = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split("::")
        if len(parts) != 4:
            raise DataFormatError(f"line {lineno}: expected 4 '::'-separated fields, got {len(parts)}")
        try:
            user, item, _rating, ts = (int(p) for p in parts)
        except ValueError as exc:
            raise DataFormatError(f"line {lineno}: non-integer field ({exc})") from None
        out.append(Interaction(user, item, ts))
    return out


def load_ml1m(path: str | Path) -> InteractionDataset:
    """Load a MovieLens ``ratings.dat`` file (``UserID::MovieID::Rating::Timestamp``).

    Every rating counts as an implicit positive.
    """
    with open(path, encoding="latin-1") as fh:
        interactions = parse_ml1m_lines(fh)
    return from_interactions(interactions)


def generate_synthetic(
    num_users: int,
    num_items: int,
    num_latent_groups: int,
    interactions_per_user: int,
    seed: int,
    in_group_prob: float = 0.9,
) -> InteractionDataset:
    """Clustered implicit-feedback log.

    Users and items are each assigned to a latent group. Every interaction
    picks an item of the user's own group with probability ``in_group_prob``
    and a uniformly random item otherwise; items may repeat.
    """
    if min(num_users, num_items, num_latent_groups, interactions_per_user) <= 0:
        raise ConfigurationError("synthetic dataset parameters must be positive")
    if interactions_per_user < MIN_INTERACTIONS:
        raise ConfigurationError(f"interactions_per_user must be >= {MIN_INTERACTIONS}")
    if num_items < num_latent_groups:
        raise ConfigurationError("num_items must be >= num_latent_groups")

    rng = np.random.default_rng(seed)
    item_group = rng.permutation(num_items) % num_latent_groups
    user_group = rng.integers(num_latent_groups, size=num_users)
    members = [np.flatnonzero(item_group == g) for g in range(num_latent_groups)]

    interactions = []
    ts = 0
    for u in range(num_users):
        own = members[user_group[u]]
        in_group = rng.random(interactions_per_user) < in_group_prob
        own_pick = own[rng.integers(len(own), size=interactions_per_user)]
        any_pick = rng.integers(num_items, size=interactions_per_user)
        items = np.where(in_group, own_pick, any_pick)
        for item in items:
            interactions.append(Interaction(u, int(item), ts))
            ts += 1
    return from_interactions(interactions)


def sample_negatives(dataset: InteractionDataset, user_id: int, size, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws (with replacement) from items outside the user's full history."""
    pool = dataset.negative_pool(user_id)
    if len(pool) == 0:
        raise ConfigurationError(f"user {user_id} interacted with every item; no negatives available")
    return pool[rng.integers(len(pool), size=size)]


def sample_batch(
    dataset: InteractionDataset, user_id: int, num_negatives: int, rng: np.random.Generator
) -> list[TrainingExample]:
    """One example per training positive of ``user_id``."""
    positives = dataset.train[user_id]
    if len(positives) == 0:
        raise ConfigurationError(f"user {user_id} has no training interactions")
    if num_negatives == 0:
        return [TrainingExample(user_id, int(p)) for p in positives]
    negs = sample_negatives(dataset, user_id, (len(positives), num_negatives), rng)
    return [
        TrainingExample(user_id, int(p), tuple(int(n) for n in row)) for p, row in zip(positives, negs)
    ]


def examples_to_arrays(examples: list[TrainingExample]) -> tuple[np.ndarray, np.ndarray]:
    """Stack examples into ``(positives[E], negatives[E, P])``; all must share P."""
    pos = np.fromiter((e.positive for e in examples), dtype=np.int64, count=len(examples))
    widths = {len(e.negatives) for e in examples}
    if len(widths) > 1:
        raise ValueError("examples carry different negative counts")
    width = widths.pop() if widths else 0
    neg = np.array([e.negatives for e in examples], dtype=np.int64).reshape(len(examples), width)
    return pos, neg
