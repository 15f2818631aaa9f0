"""HR@k / NDCG@k under the all-ranking protocol."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import InteractionDataset
from .model import GlobalModel, UserModel


@dataclass(frozen=True)
class MetricResult:
    hr_at_k: float
    ndcg_at_k: float
    k: int
    num_users_evaluated: int


def target_rank(scores: np.ndarray, target: int, excluded: np.ndarray) -> int:
    """1-based rank of ``target`` among all items outside ``excluded``.

    The target itself is always a candidate. Ties rank the lower item id first.
    """
    s_t = scores[target]
    mask = np.ones(len(scores), dtype=bool)
    mask[excluded] = False
    mask[target] = False
    ids = np.arange(len(scores))
    ahead = mask & ((scores > s_t) | ((scores == s_t) & (ids < target)))
    return int(ahead.sum()) + 1


def hit_and_ndcg(rank: int, k: int) -> tuple[float, float]:
    if rank <= k:
        return 1.0, float(1.0 / np.log2(rank + 1))
    return 0.0, 0.0


def _excluded(dataset: InteractionDataset, u: int, split: str) -> np.ndarray:
    if split == "valid":
        return dataset.train[u]
    return np.concatenate([dataset.train[u], [dataset.valid[u]]])


def evaluate(
    model: GlobalModel,
    user_states: Sequence[UserModel],
    dataset: InteractionDataset,
    k: int = 5,
    split: str = "test",
    users: Iterable[int] | None = None,
) -> MetricResult:
    """Average HR@k and NDCG@k over ``users`` (all users by default).

    ``split='test'`` hides train and validation items from the candidate list;
    ``split='valid'`` hides train items only.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if split not in ("valid", "test"):
        raise ValueError("split must be 'valid' or 'test'")
    if model.num_items != dataset.num_items:
        raise ValueError(f"model has {model.num_items} items, dataset {dataset.num_items}")
    users = np.arange(dataset.num_users) if users is None else np.asarray(sorted(users), dtype=np.int64)
    if len(users) == 0:
        return MetricResult(0.0, 0.0, k, 0)
    targets = dataset.valid if split == "valid" else dataset.test
    U = np.stack([user_states[u].user_embedding for u in users])
    scores = U @ model.item_embeddings.T
    hr = 0.0
    ndcg = 0.0
    for row, u in zip(scores, users):
        h, g = hit_and_ndcg(target_rank(row, int(targets[u]), _excluded(dataset, u, split)), k)
        hr += h
        ndcg += g
    n = len(users)
    return MetricResult(hr / n, ndcg / n, k, n)
