"""Server-side filtering (UNION) and Byzantine-robust aggregation rules."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .attacks import ClientUpdate
from .clustering import gap_statistics, kmeans
from .model import GlobalModel, uniformity_of

logger = logging.getLogger(__name__)

FILTERS = ("none", "union")
AGGREGATORS = ("mean", "trimmed_mean", "krum", "multi_krum", "norm_bound")


def _stack(updates: list[ClientUpdate]) -> np.ndarray:
    if not updates:
        raise ValueError("no updates to aggregate")
    return np.stack([u.item_grad for u in updates])


def _sorted(updates: list[ClientUpdate]) -> list[ClientUpdate]:
    return sorted(updates, key=lambda u: u.client_id)


def mean_aggregate(updates: list[ClientUpdate]) -> np.ndarray:
    return _stack(_sorted(updates)).mean(axis=0)


def trimmed_mean_aggregate(updates: list[ClientUpdate], trim_fraction: float) -> np.ndarray:
    """Coordinate-wise mean after dropping the ceil(beta*n) largest and smallest values."""
    n = len(updates)
    cut = math.ceil(trim_fraction * n - 1e-9)
    if 2 * cut >= n:
        raise ValueError(f"trim fraction {trim_fraction} removes all {n} updates")
    if cut == 0:
        return mean_aggregate(updates)
    g = np.sort(_stack(_sorted(updates)), axis=0)
    return g[cut : n - cut].mean(axis=0)


def krum_scores(updates: list[ClientUpdate], f: int) -> np.ndarray:
    """Sum of squared distances to the n - f - 2 nearest other updates."""
    n = len(updates)
    m = n - f - 2
    if m < 1:
        raise ValueError(f"Krum needs n - f - 2 >= 1 (n={n}, f={f})")
    d2 = squareform(pdist(_stack(updates).reshape(n, -1), "sqeuclidean"))
    np.fill_diagonal(d2, np.inf)
    return np.sort(d2, axis=1)[:, :m].sum(axis=1)


def krum_select(updates: list[ClientUpdate], f: int) -> ClientUpdate:
    ordered = _sorted(updates)
    # argmin returns the first minimum, i.e. the lowest client id
    return ordered[int(np.argmin(krum_scores(ordered, f)))]


def multi_krum_select(updates: list[ClientUpdate], f: int, c: int) -> list[ClientUpdate]:
    ordered = _sorted(updates)
    if not 1 <= c <= len(ordered):
        raise ValueError(f"MultiKrum select count {c} outside [1, {len(ordered)}]")
    scores = krum_scores(ordered, f)
    order = np.lexsort((np.arange(len(ordered)), scores))
    return [ordered[i] for i in sorted(order[:c])]


def multi_krum(updates: list[ClientUpdate], f: int, c: int) -> np.ndarray:
    return mean_aggregate(multi_krum_select(updates, f, c))


def clip_to_norm(grad: np.ndarray, threshold: float) -> np.ndarray:
    norm = np.linalg.norm(grad)
    if norm <= threshold:
        return grad
    return grad * (threshold / norm)


def norm_bound_aggregate(updates: list[ClientUpdate], threshold: float) -> np.ndarray:
    return np.stack([clip_to_norm(u.item_grad, threshold) for u in _sorted(updates)]).mean(axis=0)


# ------------------------------------------------------------------- UNION


@dataclass
class UnionVerdict:
    kept: list[ClientUpdate]
    client_ids: list[int]
    uniformity: np.ndarray
    multi_cluster: bool
    kept_mask: np.ndarray

    @property
    def filtered_ids(self) -> list[int]:
        return [c for c, k in zip(self.client_ids, self.kept_mask) if not k]


def union_filter(
    updates: list[ClientUpdate],
    model: GlobalModel,
    lr: float,
    T: int,
    B: int,
    rng: np.random.Generator,
    shared_sample: bool = True,
) -> UnionVerdict:
    """Drop updates whose virtual step leaves the item embeddings abnormally clustered.

    For each update the server forms ``items - lr * grad`` and measures the
    average squared pairwise distance over T sampled items. If Gap Statistics
    finds two groups among these values, the smaller group (by count; on a tie
    the one with lower mean uniformity) is removed.
    """
    ordered = _sorted(updates)
    n = len(ordered)
    ids = [u.client_id for u in ordered]
    if n < 2:
        return UnionVerdict(ordered, ids, np.full(n, np.nan), False, np.ones(n, dtype=bool))

    M = model.num_items
    t = min(T, M)
    base = model.item_embeddings
    shared = rng.choice(M, size=t, replace=False) if shared_sample else None
    d = np.empty(n)
    for i, u in enumerate(ordered):
        sample = shared if shared_sample else rng.choice(M, size=t, replace=False)
        d[i] = uniformity_of(base[sample] - lr * u.item_grad[sample])

    multi = gap_statistics(d, B, rng)
    keep = np.ones(n, dtype=bool)
    if multi:
        cl = kmeans(d, 2, rng)
        sizes = cl.sizes()
        if sizes[0] != sizes[1]:
            keep_label = int(np.argmax(sizes))
        else:
            means = cl.centroids.ravel()
            keep_label = int(np.argmax(means))
        keep = cl.assignments == keep_label
    kept = [u for u, k in zip(ordered, keep) if k]
    return UnionVerdict(kept, ids, d, multi, keep)


@dataclass
class DefenseConfig:
    filter: str = "none"
    aggregate: str = "mean"
    trim_fraction: float = 0.1
    krum_f: int | None = None
    multi_krum_c: int | None = None
    norm_threshold: float = 0.1
    T: int = 500
    B: int = 50
    shared_sample: bool = True

    def __post_init__(self):
        if self.filter not in FILTERS:
            raise ValueError(f"unknown filter {self.filter!r}; expected one of {FILTERS}")
        if self.aggregate not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregate!r}; expected one of {AGGREGATORS}")
        if self.T < 2:
            raise ValueError("T must be >= 2")

    @property
    def uses_cl(self) -> bool:
        return self.filter == "union"


@dataclass
class DefenseOutcome:
    aggregate: np.ndarray | None
    accepted_ids: list[int]
    filtered_ids: list[int]
    uniformity: dict[int, float] = field(default_factory=dict)
    multi_cluster: bool | None = None


class DefensePipeline:
    """One filter stage followed by one aggregation stage."""

    def __init__(self, config: DefenseConfig, lr: float, default_f: int = 0):
        self.config = config
        self.lr = lr
        self.default_f = default_f

    def _aggregate(self, updates: list[ClientUpdate], f: int) -> np.ndarray:
        cfg = self.config
        name = cfg.aggregate
        if name == "mean":
            return mean_aggregate(updates)
        if name == "trimmed_mean":
            return trimmed_mean_aggregate(updates, cfg.trim_fraction)
        if name == "norm_bound":
            return norm_bound_aggregate(updates, cfg.norm_threshold)
        n = len(updates)
        f = min(f, n - 3)
        if f < 0:
            logger.info("%s needs at least 3 updates, got %d; using the mean", name, n)
            return mean_aggregate(updates)
        if name == "krum":
            return krum_select(updates, f).item_grad
        c = cfg.multi_krum_c if cfg.multi_krum_c is not None else n - f
        return multi_krum(updates, f, min(c, n))

    def apply(self, updates: list[ClientUpdate], model: GlobalModel, rng: np.random.Generator,
              f: int | None = None) -> DefenseOutcome:
        cfg = self.config
        if f is None:
            f = cfg.krum_f if cfg.krum_f is not None else self.default_f
        ordered = _sorted(updates)
        uniformity: dict[int, float] = {}
        multi = None
        kept = ordered
        filtered: list[int] = []
        if cfg.filter == "union" and ordered:
            verdict = union_filter(ordered, model, self.lr, cfg.T, cfg.B, rng, cfg.shared_sample)
            kept = verdict.kept
            filtered = verdict.filtered_ids
            uniformity = {c: float(x) for c, x in zip(verdict.client_ids, verdict.uniformity)}
            multi = verdict.multi_cluster
        if not kept:
            logger.warning("every update was filtered; skipping the global update")
            return DefenseOutcome(None, [], filtered, uniformity, multi)
        agg = self._aggregate(kept, f)
        return DefenseOutcome(agg, [u.client_id for u in kept], filtered, uniformity, multi)
