"""Experiment configuration, matrix expansion and artifact writing."""

from __future__ import annotations

import copy
import csv
import dataclasses
import io
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .attacks import AttackConfig
from .data import InteractionDataset, generate_synthetic, load_ml1m
from .defenses import DefenseConfig
from .federation import FederationConfig, RoundReport, TrainResult, train

logger = logging.getLogger(__name__)

SECTIONS = ("dataset", "federation", "attack", "defense")
# list-valued entries of these sections expand into separate runs
MATRIX_SECTIONS = ("federation", "attack", "defense")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    path: str | None = None
    num_users: int = 200
    num_items: int = 100
    num_latent_groups: int = 5
    interactions_per_user: int = 30
    seed: int = 7

    def __post_init__(self):
        if self.kind not in ("synthetic", "ml1m"):
            raise ValueError("dataset.kind must be 'synthetic' or 'ml1m'")
        if self.kind == "ml1m" and not self.path:
            raise ValueError("dataset.path is required for ml1m")

    def load(self) -> InteractionDataset:
        if self.kind == "ml1m":
            return load_ml1m(self.path)
        return generate_synthetic(
            self.num_users, self.num_items, self.num_latent_groups, self.interactions_per_user, self.seed
        )


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs"
    name: str = "run"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, section: str, values: dict | None):
    values = dict(values or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{section}: unknown field(s) {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def parse_config(raw: dict, name: str = "run") -> ExperimentConfig:
    """Validate a single (already expanded) experiment mapping."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    extra = sorted(set(raw) - set(SECTIONS) - {"seeds", "output_dir", "name"})
    if extra:
        raise ConfigError(f"unknown top-level field(s) {', '.join(extra)}")
    seeds = raw.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds: expected a non-empty list of integers")
    return ExperimentConfig(
        dataset=_build(DatasetConfig, "dataset", raw.get("dataset")),
        federation=_build(FederationConfig, "federation", raw.get("federation")),
        attack=_build(AttackConfig, "attack", raw.get("attack")),
        defense=_build(DefenseConfig, "defense", raw.get("defense")),
        seeds=list(seeds),
        output_dir=str(raw.get("output_dir", "runs")),
        name=str(raw.get("name", name)),
    )


def expand_matrix(raw: dict) -> list[tuple[str, dict]]:
    """Cartesian product over list-valued fields of the matrix sections.

    Returns ``(run_name, mapping)`` pairs; a config without lists yields one run.
    """
    axes = []
    for section in MATRIX_SECTIONS:
        for key, value in (raw.get(section) or {}).items():
            if isinstance(value, list):
                axes.append((section, key, value))
    if not axes:
        return [(str(raw.get("name", "run")), raw)]
    runs = []
    for combo in itertools.product(*(vals for _, _, vals in axes)):
        cfg = copy.deepcopy(raw)
        parts = []
        for (section, key, _), value in zip(axes, combo):
            cfg[section][key] = value
            parts.append(f"{section}.{key}={value}")
        run_name = "__".join(parts)
        cfg["name"] = run_name
        runs.append((run_name, cfg))
    return runs


def load_config_file(path: str | Path) -> dict:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return raw


# ------------------------------------------------------------------ output


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def metrics_csv(reports: list[RoundReport], k: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", f"HR@{k}", f"NDCG@{k}", "attack_loss", "filtered_count"])
    for rep in reports:
        m = rep.metrics or {}
        w.writerow([rep.round, _fmt(m.get("test_hr")), _fmt(m.get("test_ndcg")), _fmt(rep.attack_loss),
                    rep.filtered_count])
    return buf.getvalue()


def report_degradation(baseline: dict, attacked: dict) -> dict[str, float]:
    """Relative drop in percent, ``(baseline - attacked) / baseline * 100``, per metric.

    Accepts summary mappings (their ``mean`` block is used when present) or
    plain ``{"hr": ..., "ndcg": ...}`` dicts.
    """
    b = baseline.get("mean", baseline)
    a = attacked.get("mean", attacked)
    out = {}
    for key in ("test_hr", "test_ndcg", "hr", "ndcg"):
        if key in b and key in a:
            if b[key] == 0:
                raise ValueError(f"baseline {key} is zero")
            out[key] = (b[key] - a[key]) / b[key] * 100.0
    if not out:
        raise ValueError("no common metric between the two summaries")
    return out


def relative_degradation(baseline: float, attacked: float) -> float:
    return (baseline - attacked) / baseline * 100.0


def _seed_row(seed: int, result: TrainResult) -> dict:
    after = [r for r in result.reports if r.round >= 50]
    ms = sum(len(r.malicious_sampled) for r in after)
    mf = sum(len(r.malicious_filtered) for r in after)
    filtered = sum(r.filtered_count for r in result.reports)
    return {
        "seed": seed,
        "best_round": result.best_round,
        "test_hr": result.test.hr_at_k if result.test else None,
        "test_ndcg": result.test.ndcg_at_k if result.test else None,
        "filtered_total": filtered,
        "malicious_sampled_after_50": ms,
        "malicious_filtered_after_50": mf,
        "malicious_filter_rate_after_50": (mf / ms) if ms else None,
    }


def summarize(rows: list[dict]) -> dict:
    mean, std = {}, {}
    for key in ("test_hr", "test_ndcg", "malicious_filter_rate_after_50"):
        vals = [r[key] for r in rows if r.get(key) is not None]
        if vals:
            mean[key] = float(np.mean(vals))
            std[key] = float(np.std(vals))
    return {"runs": rows, "mean": mean, "std": std}


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None,
                   dataset: InteractionDataset | None = None) -> dict:
    """Train every seed, writing ``seed_<s>/rounds.jsonl``, ``seed_<s>/metrics.csv``
    and ``summary.json`` under the run directory. Returns the summary.
    """
    out = Path(out_dir if out_dir is not None else Path(config.output_dir) / config.name)
    out.mkdir(parents=True, exist_ok=True)
    dataset = dataset if dataset is not None else config.dataset.load()
    if config.federation.clients_per_round > dataset.num_users:
        raise ConfigError(
            f"federation.clients_per_round={config.federation.clients_per_round} exceeds {dataset.num_users} users"
        )
    rows = []
    for seed in config.seeds:
        seed_dir = out / f"seed_{seed}"
        seed_dir.mkdir(exist_ok=True)
        reports: list[RoundReport] = []
        with open(seed_dir / "rounds.jsonl", "w") as jsonl:
            def on_round(rep: RoundReport):
                reports.append(rep)
                jsonl.write(json.dumps(rep.to_dict()) + "\n")
            try:
                result = train(dataset, config.federation, config.attack, config.defense, seed=seed,
                               on_round=on_round)
            finally:
                jsonl.flush()
                (seed_dir / "metrics.csv").write_text(metrics_csv(reports, config.federation.k))
        rows.append(_seed_row(seed, result))
        logger.info("%s seed %d: test HR@%d %.5f", config.name, seed, config.federation.k, rows[-1]["test_hr"])
    summary = summarize(rows)
    summary["name"] = config.name
    summary["config"] = config.to_dict()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary

