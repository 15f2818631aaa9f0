"""Untargeted poisoning attacks run by the malicious client cohort.

Every attack produces item-gradient uploads for the malicious clients selected
in a round and updates those clients' user embeddings with their honest BPR
user gradient, exactly like benign clients do.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .clustering import kmeans
from .data import InteractionDataset, TrainingExample, examples_to_arrays, sample_batch
from .model import (
    GlobalModel,
    LocalGradient,
    UserModel,
    bpr_batch_gradient,
    combined_client_gradient,
    infonce_gradient,
    score_all,
)

logger = logging.getLogger(__name__)

ATTACKS = ("none", "label_flip", "fedattack", "gaussian", "lie", "fang", "cluster", "cluster_cl")


@dataclass
class ClientUpdate:
    client_id: int
    item_grad: np.ndarray
    is_malicious: bool = False


# ---------------------------------------------------------------- adaptive K


@dataclass(frozen=True)
class AttackState:
    K: int
    K_min: int = 1
    K_max: int = 50
    R: int = 100
    beta: float = 0.9
    ema_loss: float = 0.0
    t: int = 0
    n_inc: int = 0
    n_dec: int = 0
    prev_corrected: float = float("nan")

    def __post_init__(self):
        if not self.K_min <= self.K <= self.K_max:
            raise ValueError(f"K={self.K} outside [{self.K_min}, {self.K_max}]")


def adaptive_update_K(state: AttackState, new_attack_loss: float) -> AttackState:
    """One step of the adaptive cluster-count controller.

    Tracks a bias-corrected EMA of the attack loss. Rising smoothed loss votes
    for more clusters, falling loss for fewer; a net margin of ``R`` votes
    moves K and restarts the EMA and counters. The first step after a
    (re)start has nothing to compare against and casts no vote.
    """
    t = state.t + 1
    ema = state.beta * state.ema_loss + (1 - state.beta) * new_attack_loss
    corrected = ema / (1 - state.beta**t)
    n_inc, n_dec = state.n_inc, state.n_dec
    if t > 1:
        if corrected > state.prev_corrected:
            n_inc += 1
        else:
            n_dec += 1

    K = state.K
    restart = False
    if n_inc - n_dec >= state.R:
        K = min(math.floor(K + math.sqrt(state.K_max - K)), state.K_max)
        restart = True
    elif n_dec - n_inc >= state.R:
        K = max(math.floor(K - math.sqrt(K - state.K_min)), state.K_min)
        restart = True
    if restart:
        logger.debug("adaptive clustering: K %d -> %d", state.K, K)
        return replace(state, K=K, ema_loss=0.0, t=0, n_inc=0, n_dec=0, prev_corrected=float("nan"))
    return replace(state, ema_loss=ema, t=t, n_inc=n_inc, n_dec=n_dec, prev_corrected=corrected)


# ------------------------------------------------------------ ClusterAttack


@dataclass
class ClusterPlan:
    """Shared per-round clustering of the item embeddings."""

    raw_grad: np.ndarray
    attack_loss: float
    k_used: int


def plan_cluster_attack(model: GlobalModel, K: int, rng: np.random.Generator) -> ClusterPlan:
    """k-means on the item rows and the gradient of the within-cluster variance.

    Centroids are held fixed, so the gradient for row v is 2 (v - c(v)).
    """
    v = model.item_embeddings
    distinct = len(np.unique(v, axis=0))
    k = K
    if K > distinct:
        logger.info("K=%d exceeds %d distinct item embeddings; using %d", K, distinct, distinct)
        k = distinct
    cl = kmeans(v, k, rng)
    diff = v - cl.centroids[cl.assignments]
    return ClusterPlan(2.0 * diff, float((diff**2).sum()), k)


def attack_loss_and_grad(item_embeddings: np.ndarray, centroids: np.ndarray, assignments: np.ndarray):
    """Within-cluster variance and its gradient for a fixed assignment."""
    diff = item_embeddings - centroids[assignments]
    return float((diff**2).sum()), 2.0 * diff


def normal_row_norm_stats(normal_grad: LocalGradient) -> tuple[float, float]:
    """Mean and standard deviation of the L2 norms of the touched gradient rows."""
    rows = normal_grad.touched_items
    if len(rows) == 0:
        return 0.0, 0.0
    norms = np.linalg.norm(normal_grad.item_grad[rows], axis=1)
    return float(norms.mean()), float(norms.std())


def clip_rows(raw: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    """Scale each row to norm at most ``bounds[i]``; rows within bound are left untouched."""
    norms = np.linalg.norm(raw, axis=1)
    scale = np.maximum(1.0, norms / np.where(bounds > 0, bounds, np.inf))
    out = raw / scale[:, None]
    zero_bound = bounds <= 0
    out[zero_bound & (norms > 0)] = 0.0
    return out


def cluster_attack_update(
    model: GlobalModel,
    user: UserModel,
    examples: list[TrainingExample],
    plan: ClusterPlan,
    l2: float,
    rng: np.random.Generator,
    client_id: int = -1,
    lambda_max: float = 3.0,
    extra_grad: np.ndarray | None = None,
) -> tuple[ClientUpdate, LocalGradient]:
    """Clipped ClusterAttack upload for one malicious client.

    Returns the upload and the client's honest BPR gradient (whose user part
    the caller applies locally). ``extra_grad`` is added to the raw malicious
    gradient before clipping (used by the contrastive variant).
    """
    pos, neg = examples_to_arrays(examples)
    normal, _ = bpr_batch_gradient(user, model, pos, neg, l2)
    mu, sigma = normal_row_norm_stats(normal)
    lam = rng.uniform(0.0, lambda_max, size=model.num_items)
    bounds = mu + lam * sigma
    raw = plan.raw_grad if extra_grad is None else plan.raw_grad + extra_grad
    return ClientUpdate(client_id, clip_rows(raw, bounds), True), normal


# ------------------------------------------------------ data poisoning attacks


def flip_examples(examples: list[TrainingExample]) -> list[TrainingExample]:
    """Swap positive and negative roles; each negative becomes its own example."""
    out = []
    for e in examples:
        for n in e.negatives:
            out.append(TrainingExample(e.user_id, n, (e.positive,)))
    return out


def label_flip_update(
    user: UserModel, model: GlobalModel, examples: list[TrainingExample], l2: float
) -> tuple[LocalGradient, float]:
    pos, neg = examples_to_arrays(flip_examples(examples))
    return bpr_batch_gradient(user, model, pos, neg, l2)


def fedattack_examples(
    user: UserModel, model: GlobalModel, history: np.ndarray, num_examples: int, num_negatives: int
) -> list[TrainingExample]:
    """Hardest-sample poisoning: closest non-history items become negatives and
    the farthest become positives. Ties go to the lower item id.
    """
    scores = score_all(user, model)
    candidates = np.setdiff1d(np.arange(model.num_items), history, assume_unique=True)
    if len(candidates) < 2:
        raise ValueError("not enough non-history items for FedAttack sampling")
    c_scores = scores[candidates]
    # lexsort: last key primary; candidates are ascending so ties keep lower id first
    desc = candidates[np.lexsort((candidates, -c_scores))]
    asc = candidates[np.lexsort((candidates, c_scores))]
    n_neg = num_examples * num_negatives
    negs = desc[np.arange(n_neg) % len(desc)].reshape(num_examples, num_negatives)
    poss = asc[np.arange(num_examples) % len(asc)]
    return [TrainingExample(-1, int(p), tuple(int(x) for x in row)) for p, row in zip(poss, negs)]


# ---------------------------------------------------- model poisoning attacks


def gradient_moments(
    user: UserModel, model: GlobalModel, examples: list[TrainingExample], l2: float
) -> tuple[np.ndarray, np.ndarray]:
    """Entrywise mean and spread of a client's normal item gradient.

    Each (positive, negative) pair is treated as one i.i.d. draw; the returned
    mean is the full-batch gradient and the spread is the standard deviation of
    a sum of that many draws.
    """
    pos, neg = examples_to_arrays(examples)
    pos_rep = np.repeat(pos, neg.shape[1])
    neg_flat = neg.ravel()
    s = len(pos_rep)
    u = user.user_embedding
    V = model.item_embeddings
    coef = 1.0 / (1.0 + np.exp((V[pos_rep] - V[neg_flat]) @ u))
    gp = -coef[:, None] * u + 2.0 * l2 * V[pos_rep]
    gn = coef[:, None] * u + 2.0 * l2 * V[neg_flat]
    total = np.zeros_like(V)
    sq = np.zeros_like(V)
    np.add.at(total, pos_rep, gp)
    np.add.at(total, neg_flat, gn)
    np.add.at(sq, pos_rep, gp**2)
    np.add.at(sq, neg_flat, gn**2)
    mean = total / s
    var = np.maximum(sq / s - mean**2, 0.0)
    return total, np.sqrt(var * s)


def gaussian_update(mean: np.ndarray, std: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if mean.shape != std.shape:
        raise ValueError(f"mean shape {mean.shape} != std shape {std.shape}")
    return mean + std * rng.standard_normal(mean.shape)


def cohort_stats(grads: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Entrywise mean and (population) std over a stack of gradients."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.ndim < 2 or len(grads) == 0:
        raise ValueError("need a non-empty stack of gradients")
    return grads.mean(axis=0), grads.std(axis=0)


def lie_update(mean: np.ndarray, std: np.ndarray, z: float) -> np.ndarray:
    return mean + z * std


def fang_update(mean: np.ndarray, std: np.ndarray, gamma: float) -> np.ndarray:
    return mean - gamma * np.sign(mean) * std


# --------------------------------------------------------------- controller


@dataclass
class AttackConfig:
    name: str = "none"
    malicious_percent: float = 0.0
    K_init: int = 2
    K_min: int = 1
    K_max: int = 50
    R: int = 100
    beta: float = 0.9
    adaptive: bool = True
    lambda_max: float = 3.0
    lie_z: float = 1.5
    fang_gamma: float = 3.0

    def __post_init__(self):
        if self.name not in ATTACKS:
            raise ValueError(f"unknown attack {self.name!r}; expected one of {ATTACKS}")
        if not 0 <= self.malicious_percent < 100:
            raise ValueError("malicious_percent must be in [0, 100)")


@dataclass
class ClientContext:
    """What a malicious client knows about itself during a round."""

    client_id: int
    user: UserModel
    rng: np.random.Generator


RngFactory = Callable[[int], np.random.Generator]


class Attacker:
    """Coordinates the malicious cohort.

    ``attack_round`` is called once per round with the malicious clients that
    were selected. It returns their uploads and the ClusterAttack loss (when
    applicable) and updates their local user embeddings.
    """

    def __init__(
        self,
        config: AttackConfig,
        malicious_ids,
        dataset: InteractionDataset,
        *,
        l2: float,
        lr: float,
        num_negatives: int = 1,
        cl_alpha: float = 1.0,
        cl_negatives: int = 15,
        use_cl: bool = False,
    ):
        self.config = config
        self.malicious_ids = frozenset(int(i) for i in malicious_ids)
        self.dataset = dataset
        self.l2 = l2
        self.lr = lr
        self.num_negatives = num_negatives
        self.cl_alpha = cl_alpha
        self.cl_negatives = cl_negatives
        self.use_cl = use_cl
        self.state = AttackState(
            K=config.K_init, K_min=config.K_min, K_max=config.K_max, R=config.R, beta=config.beta
        )
        self.k_history: list[int] = []

    @property
    def active(self) -> bool:
        return self.config.name != "none" and bool(self.malicious_ids)

    def is_malicious(self, client_id: int) -> bool:
        return client_id in self.malicious_ids

    def _local_step(self, ctx: ClientContext, user_grad: np.ndarray):
        ctx.user.user_embedding = ctx.user.user_embedding - self.lr * user_grad

    def _batch(self, ctx: ClientContext):
        return sample_batch(self.dataset, ctx.client_id, self.num_negatives, ctx.rng)

    def attack_round(
        self,
        model: GlobalModel,
        selected: list[ClientContext],
        cohort_users: dict[int, UserModel],
        round_rng: np.random.Generator,
        rng_for: RngFactory,
    ) -> tuple[list[ClientUpdate], float | None]:
        if not selected:
            return [], None
        name = self.config.name
        dispatch = {
            "label_flip": self._label_flip,
            "fedattack": self._fedattack,
            "gaussian": self._gaussian,
            "lie": self._lie_or_fang,
            "fang": self._lie_or_fang,
            "cluster": self._cluster,
            "cluster_cl": self._cluster,
        }
        return dispatch[name](model, selected, cohort_users, round_rng, rng_for)

    def _label_flip(self, model, selected, cohort_users, round_rng, rng_for):
        updates = []
        for ctx in selected:
            examples = flip_examples(self._batch(ctx))
            grad, _ = combined_client_gradient(
                ctx.user, model, examples, self.use_cl, self.cl_alpha, self.l2, self.cl_negatives, ctx.rng,
                cl_items=self.dataset.train[ctx.client_id], cl_exclude=self.dataset.history(ctx.client_id),
            )
            updates.append(ClientUpdate(ctx.client_id, grad.item_grad, True))
            self._local_step(ctx, grad.user_grad)
        return updates, None

    def _fedattack(self, model, selected, cohort_users, round_rng, rng_for):
        updates = []
        for ctx in selected:
            n_examples = len(self.dataset.train[ctx.client_id])
            examples = fedattack_examples(
                ctx.user, model, self.dataset.history(ctx.client_id), n_examples, max(self.num_negatives, 1)
            )
            grad, _ = combined_client_gradient(
                ctx.user, model, examples, self.use_cl, self.cl_alpha, self.l2, self.cl_negatives, ctx.rng,
                cl_items=self.dataset.train[ctx.client_id], cl_exclude=self.dataset.history(ctx.client_id),
            )
            updates.append(ClientUpdate(ctx.client_id, grad.item_grad, True))
            self._local_step(ctx, grad.user_grad)
        return updates, None

    def _gaussian(self, model, selected, cohort_users, round_rng, rng_for):
        updates = []
        for ctx in selected:
            examples = self._batch(ctx)
            mean, std = gradient_moments(ctx.user, model, examples, self.l2)
            updates.append(ClientUpdate(ctx.client_id, gaussian_update(mean, std, ctx.rng), True))
            pos, neg = examples_to_arrays(examples)
            normal, _ = bpr_batch_gradient(ctx.user, model, pos, neg, self.l2)
            self._local_step(ctx, normal.user_grad)
        return updates, None

    def _lie_or_fang(self, model, selected, cohort_users, round_rng, rng_for):
        # The attacker evaluates normal gradients on every client it controls.
        selected_ids = {ctx.client_id: ctx for ctx in selected}
        stack = []
        user_grads = {}
        for cid in sorted(self.malicious_ids):
            ctx = selected_ids.get(cid)
            rng = ctx.rng if ctx is not None else rng_for(cid)
            user = ctx.user if ctx is not None else cohort_users[cid]
            examples = sample_batch(self.dataset, cid, self.num_negatives, rng)
            pos, neg = examples_to_arrays(examples)
            g, _ = bpr_batch_gradient(user, model, pos, neg, self.l2)
            stack.append(g.item_grad)
            user_grads[cid] = g.user_grad
        mean, std = cohort_stats(np.stack(stack))
        if self.config.name == "lie":
            poisoned = lie_update(mean, std, self.config.lie_z)
        else:
            poisoned = fang_update(mean, std, self.config.fang_gamma)
        updates = []
        for ctx in selected:
            updates.append(ClientUpdate(ctx.client_id, poisoned.copy(), True))
            self._local_step(ctx, user_grads[ctx.client_id])
        return updates, None

    def _cluster(self, model, selected, cohort_users, round_rng, rng_for):
        plan = plan_cluster_attack(model, self.state.K, round_rng)
        updates = []
        for ctx in selected:
            examples = self._batch(ctx)
            extra = None
            if self.config.name == "cluster_cl":
                cl, _ = infonce_gradient(
                    self.dataset.train[ctx.client_id], model, self.cl_negatives, ctx.rng,
                    exclude=self.dataset.history(ctx.client_id),
                )
                extra = self.cl_alpha * cl.item_grad
            upd, normal = cluster_attack_update(
                model, ctx.user, examples, plan, self.l2, ctx.rng, ctx.client_id,
                lambda_max=self.config.lambda_max, extra_grad=extra,
            )
            updates.append(upd)
            self._local_step(ctx, normal.user_grad)
        self.k_history.append(plan.k_used)
        if self.config.adaptive:
            self.state = adaptive_update_K(self.state, plan.attack_loss)
        return updates, plan.attack_loss
