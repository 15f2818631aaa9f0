"""Matrix-factorisation recommender with closed-form client gradients.

Scores are plain dot products between a local user embedding and the shared
item embedding matrix, so a client update only carries item-row gradients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist
from scipy.special import expit, log_softmax, softmax

from .data import TrainingExample, examples_to_arrays

logger = logging.getLogger(__name__)

INIT_SCALE = 0.01


class NumericError(ArithmeticError):
    """A loss or gradient became non-finite."""


@dataclass
class GlobalModel:
    item_embeddings: np.ndarray

    @property
    def num_items(self) -> int:
        return self.item_embeddings.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.item_embeddings.shape[1]

    @classmethod
    def initialize(cls, num_items: int, dim: int, rng: np.random.Generator) -> "GlobalModel":
        return cls(rng.uniform(-INIT_SCALE, INIT_SCALE, size=(num_items, dim)))

    def copy(self) -> "GlobalModel":
        return GlobalModel(self.item_embeddings.copy())

    def save(self, path: str | Path) -> None:
        """Row-major little-endian float64 dump; ``.csv`` suffix writes text instead."""
        path = Path(path)
        if path.suffix == ".csv":
            np.savetxt(path, self.item_embeddings, delimiter=",", fmt="%.17g")
        else:
            path.write_bytes(np.ascontiguousarray(self.item_embeddings, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path, dim: int | None = None) -> "GlobalModel":
        path = Path(path)
        if path.suffix == ".csv":
            return cls(np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64)))
        if dim is None:
            raise ValueError("binary snapshots need the embedding dimension")
        flat = np.frombuffer(path.read_bytes(), dtype="<f8")
        return cls(flat.reshape(-1, dim).astype(np.float64))


@dataclass
class UserModel:
    user_embedding: np.ndarray

    @classmethod
    def initialize(cls, dim: int, rng: np.random.Generator) -> "UserModel":
        return cls(rng.uniform(-INIT_SCALE, INIT_SCALE, size=dim))


@dataclass
class LocalGradient:
    item_grad: np.ndarray
    user_grad: np.ndarray
    touched_items: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    @classmethod
    def zeros(cls, num_items: int, dim: int) -> "LocalGradient":
        return cls(np.zeros((num_items, dim)), np.zeros(dim))

    def __add__(self, other: "LocalGradient") -> "LocalGradient":
        return LocalGradient(
            self.item_grad + other.item_grad,
            self.user_grad + other.user_grad,
            np.union1d(self.touched_items, other.touched_items),
        )


def predict(user: UserModel, model: GlobalModel, item_id: int) -> float:
    if not 0 <= item_id < model.num_items:
        raise IndexError(f"item {item_id} out of range [0, {model.num_items})")
    return float(user.user_embedding @ model.item_embeddings[item_id])


def score_all(user: UserModel, model: GlobalModel) -> np.ndarray:
    return model.item_embeddings @ user.user_embedding


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite value in loss or gradient")


def bpr_gradient_arrays(
    user_vec: np.ndarray,
    item_embeddings: np.ndarray,
    positives: np.ndarray,
    negatives: np.ndarray,
    l2: float,
) -> tuple[np.ndarray, np.ndarray, float]:
    """BPR loss and gradients summed over every (positive, negative) pair.

    Returns ``(item_grad[M, d], user_grad[d], loss)``. Each pair contributes
    ``-log sigmoid(s_p - s_n) + l2 * (|u|^2 + |v_p|^2 + |v_n|^2)``.
    """
    positives = np.asarray(positives, dtype=np.int64)
    negatives = np.asarray(negatives, dtype=np.int64).reshape(len(positives), -1)
    if negatives.shape[1] == 0:
        raise ValueError("BPR needs at least one negative per example")
    pos_rep = np.repeat(positives, negatives.shape[1])
    neg_flat = negatives.ravel()

    vp = item_embeddings[pos_rep]
    vn = item_embeddings[neg_flat]
    diff = (vp - vn) @ user_vec
    # d(-log sigmoid(x))/dx = -sigmoid(-x)
    coef = expit(-diff)
    n_pairs = len(pos_rep)

    loss = float(
        np.logaddexp(0.0, -diff).sum()
        + l2 * (n_pairs * (user_vec @ user_vec) + np.einsum("ij,ij->", vp, vp) + np.einsum("ij,ij->", vn, vn))
    )
    user_grad = -(coef @ (vp - vn)) + 2.0 * l2 * n_pairs * user_vec
    item_grad = np.zeros_like(item_embeddings)
    np.add.at(item_grad, pos_rep, -coef[:, None] * user_vec + 2.0 * l2 * vp)
    np.add.at(item_grad, neg_flat, coef[:, None] * user_vec + 2.0 * l2 * vn)
    _check_finite(item_grad, user_grad, loss)
    return item_grad, user_grad, loss


def bpr_gradient(
    user: UserModel, model: GlobalModel, example: TrainingExample, l2_coeff: float
) -> tuple[LocalGradient, float]:
    if not example.negatives:
        raise ValueError("BPR needs at least one negative per example")
    pos, neg = examples_to_arrays([example])
    return bpr_batch_gradient(user, model, pos, neg, l2_coeff)


def bpr_batch_gradient(
    user: UserModel, model: GlobalModel, positives: np.ndarray, negatives: np.ndarray, l2_coeff: float
) -> tuple[LocalGradient, float]:
    item_grad, user_grad, loss = bpr_gradient_arrays(
        user.user_embedding, model.item_embeddings, positives, negatives, l2_coeff
    )
    touched = np.union1d(positives, np.ravel(negatives)).astype(np.int64)
    return LocalGradient(item_grad, user_grad, touched), loss


def sample_contrastive(
    user_items: np.ndarray,
    num_items: int,
    num_negatives: int,
    rng: np.random.Generator,
    exclude: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw (anchors, positives, negatives) for the contrastive task.

    Every distinct item in ``user_items`` is an anchor; its positive is another
    distinct user item and its negatives come from outside ``exclude``
    (defaults to ``user_items``).
    """
    anchors = np.unique(np.asarray(user_items, dtype=np.int64))
    n = len(anchors)
    offset = rng.integers(n - 1, size=n)
    partner = offset + (offset >= np.arange(n))
    excluded = anchors if exclude is None else np.union1d(anchors, exclude)
    pool = np.setdiff1d(np.arange(num_items), excluded, assume_unique=True)
    if len(pool) == 0:
        raise ValueError("no items left to serve as contrastive negatives")
    negatives = pool[rng.integers(len(pool), size=(n, num_negatives))]
    return anchors, anchors[partner], negatives


def infonce_gradient_arrays(
    item_embeddings: np.ndarray, anchors: np.ndarray, positives: np.ndarray, negatives: np.ndarray
) -> tuple[np.ndarray, float]:
    """InfoNCE over raw dot-product logits, summed over anchors."""
    va = item_embeddings[anchors]
    vpos = item_embeddings[positives]
    vneg = item_embeddings[negatives]  # (L, P, d)
    logits = np.concatenate([np.einsum("ld,ld->l", va, vpos)[:, None], np.einsum("ld,lpd->lp", va, vneg)], axis=1)
    loss = float(-log_softmax(logits, axis=1)[:, 0].sum())
    probs = softmax(logits, axis=1)
    dlogit = probs.copy()
    dlogit[:, 0] -= 1.0

    # logit_j = v_a . v_j ; both factors receive a gradient
    grad_a = dlogit[:, :1] * vpos + np.einsum("lp,lpd->ld", dlogit[:, 1:], vneg)
    grad_pos = dlogit[:, :1] * va
    grad_neg = dlogit[:, 1:, None] * va[:, None, :]
    item_grad = np.zeros_like(item_embeddings)
    np.add.at(item_grad, anchors, grad_a)
    np.add.at(item_grad, positives, grad_pos)
    np.add.at(item_grad, negatives.ravel(), grad_neg.reshape(-1, item_embeddings.shape[1]))
    _check_finite(item_grad, loss)
    return item_grad, loss


def infonce_gradient(
    user_items,
    model: GlobalModel,
    num_negatives: int,
    rng: np.random.Generator,
    exclude: np.ndarray | None = None,
) -> tuple[LocalGradient, float]:
    if num_negatives < 1:
        raise ValueError("contrastive task needs at least one negative")
    dim = model.embedding_dim
    anchors = np.unique(np.asarray(user_items, dtype=np.int64))
    if len(anchors) < 2:
        logger.debug("fewer than two distinct items; contrastive term skipped")
        return LocalGradient.zeros(model.num_items, dim), 0.0
    anchors, pos, neg = sample_contrastive(anchors, model.num_items, num_negatives, rng, exclude)
    item_grad, loss = infonce_gradient_arrays(model.item_embeddings, anchors, pos, neg)
    touched = np.unique(np.concatenate([anchors, pos, neg.ravel()]))
    return LocalGradient(item_grad, np.zeros(dim), touched), loss


def combined_client_gradient(
    user: UserModel,
    model: GlobalModel,
    examples: list[TrainingExample],
    cl_enabled: bool,
    alpha: float,
    l2: float,
    num_cl_negatives: int,
    rng: np.random.Generator,
    cl_items=None,
    cl_exclude=None,
) -> tuple[LocalGradient, float]:
    """Gradient of ``L_rec + alpha * L_cl`` (or ``L_rec`` alone).

    ``cl_items`` defaults to the positives of ``examples``.
    """
    pos, neg = examples_to_arrays(examples)
    grad, loss = bpr_batch_gradient(user, model, pos, neg, l2)
    if not cl_enabled or alpha == 0:
        return grad, loss
    items = pos if cl_items is None else cl_items
    cl_grad, cl_loss = infonce_gradient(items, model, num_cl_negatives, rng, exclude=cl_exclude)
    cl_grad.item_grad *= alpha
    return grad + cl_grad, loss + alpha * cl_loss


def uniformity_estimate(model: GlobalModel, sample_items) -> float:
    """Average squared pairwise distance between the sampled item embeddings."""
    ids = np.asarray(sample_items, dtype=np.int64)
    if len(ids) < 2:
        raise ValueError("need at least two items")
    if len(np.unique(ids)) != len(ids):
        raise ValueError("sample items must be distinct")
    return uniformity_of(model.item_embeddings[ids])


def uniformity_of(vectors: np.ndarray) -> float:
    return float(pdist(vectors, "sqeuclidean").mean())
