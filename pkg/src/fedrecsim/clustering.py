"""k-means and the one-vs-two cluster Gap Statistics test."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

MAX_ITER = 50
TOL = 1e-6
LOG_FLOOR = 1e-12


@dataclass
class Clustering:
    assignments: np.ndarray
    centroids: np.ndarray
    within_variance: float

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)


def _as_points(points) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("points must be a non-empty (n, d) array")
    return x


def _plusplus_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    idx = [int(rng.integers(n))]
    d2 = cdist(x, x[idx[:1]], "sqeuclidean").ravel()
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            nxt = int(rng.integers(n))
        idx.append(nxt)
        d2 = np.minimum(d2, cdist(x, x[nxt : nxt + 1], "sqeuclidean").ravel())
    return x[idx].copy()


def _repair_empty(x, labels, centroids, k):
    counts = np.bincount(labels, minlength=k)
    for c in np.flatnonzero(counts == 0):
        big = int(np.argmax(counts))
        if counts[big] <= 1:
            break
        members = np.flatnonzero(labels == big)
        far = members[np.argmax(((x[members] - centroids[big]) ** 2).sum(axis=1))]
        labels[far] = c
        counts[big] -= 1
        counts[c] += 1
        centroids[big] = x[labels == big].mean(axis=0)
        centroids[c] = x[far]
    return labels


def _means(x, labels, k):
    d = x.shape[1]
    sums = np.zeros((k, d))
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=k)
    return sums / np.maximum(counts, 1)[:, None]


def within_variance(x: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> float:
    return float(((x - centroids[labels]) ** 2).sum())


def kmeans(points, k: int, rng: np.random.Generator, max_iter: int = MAX_ITER, tol: float = TOL) -> Clustering:
    """Lloyd's algorithm from a k-means++ start.

    Stops when no centroid moves more than ``tol`` or after ``max_iter``
    iterations. Empty clusters take the point farthest from the centroid of the
    largest cluster. On return every centroid is the mean of its points.
    """
    x = _as_points(points)
    n = x.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points ({n})")

    if k == 1:
        c = x.mean(axis=0, keepdims=True)
        labels = np.zeros(n, dtype=np.int64)
        return Clustering(labels, c, within_variance(x, labels, c))

    centroids = _plusplus_init(x, k, rng)
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        labels = np.argmin(cdist(x, centroids, "sqeuclidean"), axis=1)
        labels = _repair_empty(x, labels, centroids, k)
        new = _means(x, labels, k)
        shift = np.sqrt(((new - centroids) ** 2).sum(axis=1)).max()
        centroids = new
        if shift < tol:
            break
    return Clustering(labels, centroids, within_variance(x, labels, centroids))


def best_of(points, k: int, rng: np.random.Generator, restarts: int) -> Clustering:
    """Lowest-dispersion result over independent k-means runs."""
    best = None
    for _ in range(restarts):
        c = kmeans(points, k, rng)
        if best is None or c.within_variance < best.within_variance:
            best = c
    return best


def _log_w(values, k, rng) -> float:
    return float(np.log(max(kmeans(values, k, rng).within_variance, LOG_FLOOR)))


def gap_statistics(values, B: int, rng: np.random.Generator, return_details: bool = False):
    """Decide whether 1-d ``values`` hold more than one cluster.

    Values are min-max normalised; for k in {1, 2} the dispersion gap against B
    uniform[0, 1] reference samples of the same size is computed, and the answer
    is ``gap_1 < gap_2 - s_2``.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if len(v) < 2:
        raise ValueError("gap statistics needs at least two values")
    if B < 1:
        raise ValueError("B must be >= 1")
    lo, hi = v.min(), v.max()
    if not hi > lo:
        return (False, {}) if return_details else False
    norm = (v - lo) / (hi - lo)
    n = len(norm)

    gap = {}
    spread = {}
    for k in (1, 2):
        log_wk = _log_w(norm, k, rng)
        ref = np.array([_log_w(rng.uniform(0.0, 1.0, size=n), k, rng) for _ in range(B)])
        mean_ref = ref.mean()
        gap[k] = mean_ref - log_wk
        spread[k] = np.sqrt((1 + B) / B**2 * ((ref - mean_ref) ** 2).sum())
    decision = bool(gap[1] < gap[2] - spread[2])
    if return_details:
        return decision, {"gap": gap, "s": spread}
    return decision
