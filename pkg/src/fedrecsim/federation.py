"""FedAvg rounds with a server-side Adam step."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .attacks import AttackConfig, Attacker, ClientContext, ClientUpdate
from .data import ConfigurationError, InteractionDataset, sample_batch
from .defenses import DefenseConfig, DefensePipeline
from .evaluation import MetricResult, evaluate
from .model import GlobalModel, NumericError, UserModel, combined_client_gradient

logger = logging.getLogger(__name__)

# stream tags keep the derived RNG streams disjoint
_INIT, _MALICIOUS, _ROUND, _CLIENT, _REST = 0, 1, 2, 3, 4


@dataclass
class ServerState:
    model: GlobalModel
    lr: float
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, model: GlobalModel, lr: float) -> "ServerState":
        shape = model.item_embeddings.shape
        return cls(model, lr, np.zeros(shape), np.zeros(shape))


def adam_apply(server: ServerState, aggregate_grad: np.ndarray) -> ServerState:
    """Bias-corrected Adam step on the item embeddings, in place."""
    g = np.asarray(aggregate_grad, dtype=np.float64)
    if g.shape != server.m.shape:
        raise ValueError(f"gradient shape {g.shape} does not match model {server.m.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite aggregate gradient")
    step = server.step + 1
    m = server.beta1 * server.m + (1 - server.beta1) * g
    v = server.beta2 * server.v + (1 - server.beta2) * g * g
    m_hat = m / (1 - server.beta1**step)
    v_hat = v / (1 - server.beta2**step)
    server.model.item_embeddings = server.model.item_embeddings - server.lr * m_hat / (np.sqrt(v_hat) + server.eps)
    server.m, server.v, server.step = m, v, step
    return server


@dataclass
class RoundReport:
    round: int
    sampled: list[int]
    accepted: list[int]
    filtered: list[int]
    malicious_sampled: list[int]
    malicious_filtered: list[int]
    attack_loss: float | None = None
    attack_k: int | None = None
    uniformity: dict[int, float] = field(default_factory=dict)
    multi_cluster: bool | None = None
    applied_update: bool = True
    mean_benign_loss: float | None = None
    metrics: dict[str, float] | None = None
    duration_s: float = 0.0

    @property
    def filtered_count(self) -> int:
        return len(self.filtered)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["uniformity"] = {str(k): v for k, v in self.uniformity.items()}
        return d


@dataclass
class FederationConfig:
    rounds: int = 6000
    clients_per_round: int = 50
    eval_interval: int = 100
    lr: float = 2e-3
    user_lr: float | None = None
    l2: float = 1e-5
    dim: int = 64
    num_negatives: int = 1
    cl_alpha: float = 1.0
    cl_negatives: int = 15
    k: int = 5
    select_best: bool = True
    krum_f_oracle: bool = False
    dropout: float = 0.0

    def __post_init__(self):
        if self.rounds < 0 or self.clients_per_round < 1 or self.eval_interval < 1:
            raise ValueError("rounds >= 0, clients_per_round >= 1 and eval_interval >= 1 required")
        if self.dropout:
            raise ValueError("embedding dropout is not supported for MF; leave dropout at 0")


class RngStreams:
    """Deterministic generators keyed by (seed, purpose, round, client)."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def get(self, *key: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, *key])

    def client(self, round_index: int, client_id: int) -> np.random.Generator:
        return self.get(_CLIENT, round_index, client_id)


class Federation:
    """Holds the server, every client's user model and the attacker for one run."""

    def __init__(
        self,
        dataset: InteractionDataset,
        config: FederationConfig,
        attack: AttackConfig,
        defense: DefenseConfig,
        seed: int,
        malicious_ids=None,
    ):
        if config.clients_per_round > dataset.num_users:
            raise ConfigurationError("clients_per_round exceeds the number of users")
        self.dataset = dataset
        self.config = config
        self.streams = RngStreams(seed)
        init = self.streams.get(_INIT)
        self.server = ServerState.create(GlobalModel.initialize(dataset.num_items, config.dim, init), config.lr)
        self.users = [UserModel.initialize(config.dim, init) for _ in range(dataset.num_users)]
        if malicious_ids is None:
            malicious_ids = select_malicious(dataset.num_users, attack.malicious_percent, self.streams.get(_MALICIOUS))
        if attack.name == "none":
            malicious_ids = []
        self.user_lr = config.lr if config.user_lr is None else config.user_lr
        self.attacker = Attacker(
            attack, malicious_ids, dataset, l2=config.l2, lr=self.user_lr,
            num_negatives=config.num_negatives, cl_alpha=config.cl_alpha,
            cl_negatives=config.cl_negatives, use_cl=defense.uses_cl,
        )
        expected_f = round(config.clients_per_round * len(self.attacker.malicious_ids) / dataset.num_users)
        self.defense = DefensePipeline(defense, config.lr, default_f=expected_f)
        self.round_index = 0

    @property
    def benign_ids(self) -> list[int]:
        return [u for u in range(self.dataset.num_users) if u not in self.attacker.malicious_ids]

    def benign_update(self, client_id: int, model: GlobalModel, rng: np.random.Generator) -> tuple[ClientUpdate, float]:
        cfg = self.config
        user = self.users[client_id]
        examples = sample_batch(self.dataset, client_id, cfg.num_negatives, rng)
        grad, loss = combined_client_gradient(
            user, model, examples, self.defense.config.uses_cl, cfg.cl_alpha, cfg.l2, cfg.cl_negatives, rng,
            cl_items=self.dataset.train[client_id], cl_exclude=self.dataset.history(client_id),
        )
        user.user_embedding = user.user_embedding - self.user_lr * grad.user_grad
        return ClientUpdate(client_id, grad.item_grad, False), loss

    def run_round(self) -> RoundReport:
        """Sample clients, collect uploads, filter/aggregate and apply Adam."""
        start = time.perf_counter()
        r = self.round_index
        cfg = self.config
        round_rng = self.streams.get(_ROUND, r)
        sampled = sorted(int(c) for c in round_rng.choice(self.dataset.num_users, cfg.clients_per_round, replace=False))
        # every client sees the same snapshot
        snapshot = self.server.model.copy()

        updates: list[ClientUpdate] = []
        benign_losses = []
        malicious: list[ClientContext] = []
        for cid in sampled:
            rng = self.streams.client(r, cid)
            if self.attacker.is_malicious(cid):
                malicious.append(ClientContext(cid, self.users[cid], rng))
                continue
            upd, loss = self.benign_update(cid, snapshot, rng)
            updates.append(upd)
            benign_losses.append(loss)

        attack_loss = None
        attack_k = None
        if malicious and self.attacker.active:
            attack_k = self.attacker.state.K
            cohort = {c: self.users[c] for c in self.attacker.malicious_ids}
            mal_updates, attack_loss = self.attacker.attack_round(
                snapshot, malicious, cohort, self.streams.get(_ROUND, r, 1), lambda c: self.streams.client(r, c)
            )
            updates.extend(mal_updates)

        f = None
        if cfg.krum_f_oracle:
            f = len(malicious)
        outcome = self.defense.apply(updates, snapshot, self.streams.get(_ROUND, r, 2), f=f)

        applied = outcome.aggregate is not None
        if applied:
            adam_apply(self.server, outcome.aggregate)

        mal_ids = [c.client_id for c in malicious]
        report = RoundReport(
            round=r,
            sampled=sampled,
            accepted=outcome.accepted_ids,
            filtered=outcome.filtered_ids,
            malicious_sampled=mal_ids,
            malicious_filtered=[c for c in outcome.filtered_ids if c in self.attacker.malicious_ids],
            attack_loss=attack_loss,
            attack_k=attack_k,
            uniformity=outcome.uniformity,
            multi_cluster=outcome.multi_cluster,
            applied_update=applied,
            mean_benign_loss=float(np.mean(benign_losses)) if benign_losses else None,
        )
        self.round_index += 1
        report.duration_s = time.perf_counter() - start
        return report

    def evaluate(self, split: str = "test") -> MetricResult:
        return evaluate(self.server.model, self.users, self.dataset, self.config.k, split, self.benign_ids)


def select_malicious(num_users: int, percent: float, rng: np.random.Generator) -> list[int]:
    if percent <= 0:
        return []
    count = math.ceil(percent / 100.0 * num_users - 1e-9)
    return sorted(int(c) for c in rng.choice(num_users, size=count, replace=False))


@dataclass
class TrainResult:
    model: GlobalModel
    users: list[UserModel]
    history: list[dict]
    best_round: int | None
    test: MetricResult | None
    reports: list[RoundReport]
    malicious_ids: list[int]


def train(
    dataset: InteractionDataset,
    config: FederationConfig,
    attack: AttackConfig | None = None,
    defense: DefenseConfig | None = None,
    seed: int = 0,
    on_round: Callable[[RoundReport], None] | None = None,
    malicious_ids=None,
) -> TrainResult:
    """Run ``config.rounds`` rounds, evaluating every ``eval_interval``.

    With ``select_best`` the final test metrics come from the checkpoint with
    the highest validation HR@k; otherwise from the last round. ``on_round``
    receives every report as soon as it is produced.
    """
    attack = attack or AttackConfig()
    defense = defense or DefenseConfig()
    fed = Federation(dataset, config, attack, defense, seed, malicious_ids)
    history: list[dict] = []
    reports: list[RoundReport] = []
    best = None
    best_val = -1.0
    if config.rounds == 0:
        return TrainResult(fed.server.model, fed.users, [], None, None, [], sorted(fed.attacker.malicious_ids))

    for r in range(config.rounds):
        report = fed.run_round()
        if (r + 1) % config.eval_interval == 0 or r + 1 == config.rounds:
            val = fed.evaluate("valid")
            test = fed.evaluate("test")
            report.metrics = {
                "valid_hr": val.hr_at_k, "valid_ndcg": val.ndcg_at_k,
                "test_hr": test.hr_at_k, "test_ndcg": test.ndcg_at_k,
            }
            history.append({"round": r + 1, **report.metrics})
            if val.hr_at_k > best_val:
                best_val = val.hr_at_k
                best = (r + 1, fed.server.model.copy(), [UserModel(u.user_embedding.copy()) for u in fed.users], test)
        reports.append(report)
        if on_round is not None:
            on_round(report)

    if config.select_best and best is not None:
        best_round, model, users, test = best
    else:
        best_round, model, users = config.rounds, fed.server.model, fed.users
        test = fed.evaluate("test")
    return TrainResult(model, users, history, best_round, test, reports, sorted(fed.attacker.malicious_ids))
