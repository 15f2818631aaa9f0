"""Federated recommendation simulator: MF/BPR clients, poisoning attacks and robust aggregation."""

from .attacks import ATTACKS, AttackConfig, AttackState, adaptive_update_K
from .data import InteractionDataset, generate_synthetic, load_ml1m
from .defenses import DefenseConfig, DefensePipeline, union_filter
from .evaluation import MetricResult, evaluate
from .federation import Federation, FederationConfig, train
from .model import GlobalModel, UserModel

__version__ = "0.1.0"

__all__ = [
    "ATTACKS",
    "AttackConfig",
    "AttackState",
    "DefenseConfig",
    "DefensePipeline",
    "Federation",
    "FederationConfig",
    "GlobalModel",
    "InteractionDataset",
    "MetricResult",
    "UserModel",
    "adaptive_update_K",
    "evaluate",
    "generate_synthetic",
    "load_ml1m",
    "train",
    "union_filter",
]
