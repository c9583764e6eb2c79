"""Evaluation pipeline: attack -> defend -> classify -> report.

The attack stage only ever sees the attack config (and, for the adaptive
attack, the counterattack budget it is meant to anticipate). Defenses are
applied to clean inputs too, so clean accuracy is measured under the defense.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, run_attack
from .data import Dataset, generate_synthetic, load_idx, train_test_split
from .defenses import (CounterattackConfig, anti_adversary_config, anti_adversary_defend, defended_images,
                       hedge_config, hedge_defend, rn_defend, tau_ratio, tte_classify, ttc_defend_batch)
from .model import DualEncoder, load_checkpoint
from .stability import _open_out
from .utils import uniform_noise

logger = logging.getLogger(__name__)

DEFENSES = ("none", "rn", "tte", "anti_adv", "hedge", "ttc")
METRICS = ("clean_accuracy", "robust_accuracy", "tau_clean_mean", "tau_adv_mean",
           "halt_rate_clean", "halt_rate_adv")
ACCURACY_FIELDS = ("clean_accuracy", "robust_accuracy")
REPORT_CSV_COLUMNS = ("row",) + METRICS
ABLATION_CSV_COLUMNS = ("epsilon_a", "steps_n", "robust_accuracy", "robust_std", "clean_accuracy")


@dataclass(frozen=True)
class DataConfig:
    """Where evaluation images come from: a seeded synthetic set or IDX files."""

    source: str = "synthetic"
    classes: int = 10
    per_class: int = 200
    channels: int = 3
    width: int = 32
    height: int = 32
    separation: float = 0.5
    noise: float = 0.05
    seed: int = 0
    test_fraction: float = 0.1
    split_seed: int = 0
    images: str = ""
    labels: str = ""
    test_images: str = ""
    test_labels: str = ""

    def __post_init__(self):
        if self.source not in ("synthetic", "idx"):
            raise ValueError(f"data source must be synthetic or idx, got {self.source!r}")

    def load(self, split: str = "test") -> Dataset:
        if self.source == "idx":
            if split == "test" and self.test_images:
                return load_idx(self.test_images, self.test_labels, "test")
            ds = load_idx(self.images, self.labels, "train")
            return ds if split == "train" else ds.subset(np.arange(len(ds)), "test")
        full = generate_synthetic(K=self.classes, per_class=self.per_class, C=self.channels, W=self.width,
                                  H=self.height, separation=self.separation, seed=self.seed, noise=self.noise)
        train, test = train_test_split(full, self.test_fraction, seed=self.split_seed)
        return train if split == "train" else test


@dataclass(frozen=True)
class BaselineConfig:
    epsilon: float = 4 / 255
    anti_adv_steps: int = 2
    hedge_steps: int = 20


@dataclass(frozen=True)
class RunConfig:
    """One evaluation: model, data, attack, defense, seeds and output path.

    ``budget_multiplier`` scales every L-inf budget and step size (attack,
    counterattack and baselines) for desk-scale images.
    """

    checkpoint: str = ""
    data: DataConfig = field(default_factory=DataConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: str = "none"
    counterattack: CounterattackConfig | None = field(default_factory=CounterattackConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    tau_checkpoint: str = ""
    sample_cap: int = 0
    seeds: tuple[int, ...] = (0,)
    output: str = ""
    budget_multiplier: float = 1.0

    def __post_init__(self):
        if self.defense not in DEFENSES:
            raise ValueError(f"defense must be one of {DEFENSES}, got {self.defense!r}")
        if self.defense == "ttc" and self.counterattack is None:
            raise ValueError("defense=ttc requires a counterattack config")
        if len(self.seeds) == 0:
            raise ValueError("seeds must be nonempty")
        if self.sample_cap < 0:
            raise ValueError("sample_cap must be >= 0")
        if self.budget_multiplier <= 0:
            raise ValueError("budget_multiplier must be positive")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d["data"] = DataConfig(**d.get("data", {}))
        d["attack"] = AttackConfig(**d.get("attack", {}))
        d["baseline"] = BaselineConfig(**d.get("baseline", {}))
        ca = d.get("counterattack")
        d["counterattack"] = None if ca is None else CounterattackConfig(**ca)
        d["seeds"] = tuple(d.get("seeds", (0,)))
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown run config fields: {sorted(unknown)}")
        return cls(**d)

    # scaled views ---------------------------------------------------

    def scaled_attack(self, seed: int) -> AttackConfig:
        k = self.budget_multiplier
        a = replace(self.attack, seed=seed, epsilon=self.attack.epsilon * k, alpha=self.attack.alpha * k)
        if a.method == "adaptive" and self.counterattack is not None:
            # the one place the attacker reads the defense: the budget it simulates
            a = replace(a, epsilon_ttc_assumed=self.counterattack.epsilon * k)
        return a

    def scaled_counterattack(self, seed: int) -> CounterattackConfig:
        c = self.counterattack or CounterattackConfig()
        k = self.budget_multiplier
        return replace(c, seed=seed, epsilon=c.epsilon * k, alpha=None if c.alpha is None else c.alpha * k)


@dataclass
class EvalReport:
    """Per-seed metrics, their mean and sample std, flags, timings and the config echo."""

    config: dict
    per_seed: list[dict]
    aggregate: dict
    flags: list[str] = field(default_factory=list)
    timings: list[dict] = field(default_factory=list)

    def results(self) -> dict:
        """Everything except wall-clock timings; deterministic for a fixed config."""
        return {"config": self.config, "per_seed": self.per_seed, "aggregate": self.aggregate,
                "flags": self.flags}

    def mean(self, metric: str) -> float:
        return self.aggregate[metric]["mean"]


def aggregate(per_seed: list[dict]) -> dict:
    """Mean and sample standard deviation of every metric that is defined on all seeds."""
    out = {}
    for name in METRICS:
        values = [row[name] for row in per_seed]
        if any(v is None for v in values):
            out[name] = {"mean": None, "std": None}
            continue
        arr = np.asarray(values, dtype=np.float64)
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        out[name] = {"mean": float(arr.mean()), "std": std}
    return out


# ---------------------------------------------------------------- pipeline


def generate_adversarial(model: DualEncoder, images, labels, attack: AttackConfig, indices=None) -> np.ndarray:
    """Attack stage; takes only the attack config."""
    return run_attack(model, images, labels, attack, indices)


def _defend_and_classify(run: RunConfig, model, tau_model, x, seed: int, indices):
    """Predictions under the configured defense plus TTC statistics (or ``None``)."""
    k = run.budget_multiplier
    d = run.defense
    if d == "none":
        return model.predict(x), None
    if d == "tte":
        return tte_classify(model, x), None
    if d == "rn":
        delta = rn_defend(x, run.baseline.epsilon * k, seed, indices)
        return model.predict(defended_images(x, delta)), None
    if d == "anti_adv":
        cfg = anti_adversary_config(epsilon=run.baseline.epsilon * k, steps=run.baseline.anti_adv_steps, seed=seed)
        return model.predict(defended_images(x, anti_adversary_defend(model, x, cfg, indices))), None
    if d == "hedge":
        cfg = hedge_config(epsilon=run.baseline.epsilon * k, steps=run.baseline.hedge_steps, seed=seed)
        return model.predict(defended_images(x, hedge_defend(model, x, cfg, indices))), None
    cfg = run.scaled_counterattack(seed)
    probe = tau_model if cfg.tau_encoder == "original" else model
    out = ttc_defend_batch(model, probe, x, cfg, indices)
    return model.predict(defended_images(x, out.delta_ttc)), out


def _tau_stat(run: RunConfig, tau_model, x, seed: int, indices) -> float:
    eps = run.scaled_counterattack(seed).epsilon
    noise = uniform_noise(seed, indices, x.shape[1:], eps)
    return float(np.mean(tau_ratio(tau_model.embed, x, noise)))


def _load_models(run: RunConfig, model, tau_model):
    if model is None:
        if not run.checkpoint:
            raise ValueError("run config has no checkpoint")
        model = load_checkpoint(run.checkpoint)
    if tau_model is None:
        tau_model = load_checkpoint(run.tau_checkpoint) if run.tau_checkpoint else model
    return model, tau_model


def _eval_data(run: RunConfig, dataset) -> Dataset:
    ds = dataset if dataset is not None else run.data.load("test")
    if run.sample_cap and run.sample_cap < len(ds):
        ds = ds.subset(np.arange(run.sample_cap))
    return ds


def evaluate(run: RunConfig, model: DualEncoder | None = None, tau_model: DualEncoder | None = None,
             dataset: Dataset | None = None) -> EvalReport:
    """Run every seed of ``run`` and aggregate.

    ``model`` / ``tau_model`` / ``dataset`` may be passed in memory; otherwise
    they are loaded from the paths in ``run``.
    """
    model, tau_model = _load_models(run, model, tau_model)
    ds = _eval_data(run, dataset)
    x, y = ds.images, ds.labels
    if ds.image_shape != model.arch.image_shape:
        raise ValueError(f"dataset images {ds.image_shape} do not match model {model.arch.image_shape}")
    idx = np.arange(len(x), dtype=np.int64)
    flags = []
    if run.attack.method == "adaptive" and run.defense != "ttc":
        flags.append(f"adaptive attack evaluated against defense={run.defense}")
    per_seed, timings = [], []
    for seed in run.seeds:
        t0 = time.perf_counter()
        adv = generate_adversarial(model, x, y, run.scaled_attack(seed), idx)
        t1 = time.perf_counter()
        pred_clean, out_clean = _defend_and_classify(run, model, tau_model, x, seed, idx)
        pred_adv, out_adv = _defend_and_classify(run, model, tau_model, adv, seed, idx)
        t2 = time.perf_counter()
        row = {"seed": int(seed),
               "clean_accuracy": float(np.mean(pred_clean == y)),
               "robust_accuracy": float(np.mean(pred_adv == y))}
        if out_clean is not None:
            row["tau_clean_mean"] = float(np.mean(out_clean.tau))
            row["tau_adv_mean"] = float(np.mean(out_adv.tau))
            row["halt_rate_clean"] = float(np.mean(out_clean.halted))
            row["halt_rate_adv"] = float(np.mean(out_adv.halted))
        else:
            row["tau_clean_mean"] = _tau_stat(run, tau_model, x, seed, idx)
            row["tau_adv_mean"] = _tau_stat(run, tau_model, adv, seed, idx)
            row["halt_rate_clean"] = None
            row["halt_rate_adv"] = None
        per_seed.append(row)
        timings.append({"seed": int(seed), "attack_s": t1 - t0, "defend_classify_s": t2 - t1})
    return EvalReport(run.to_dict(), per_seed, aggregate(per_seed), flags, timings)


# ---------------------------------------------------------------- reports


def _fmt(name: str, value):
    if value is None:
        return None
    return round(float(value), 4) if name in ACCURACY_FIELDS else float(value)


def _rounded(report: EvalReport) -> dict:
    d = report.results()
    d["per_seed"] = [{k: (_fmt(k, v) if k != "seed" else v) for k, v in row.items()} for row in report.per_seed]
    d["aggregate"] = {k: {s: _fmt(k, v) for s, v in stat.items()} for k, stat in report.aggregate.items()}
    d["timings"] = report.timings
    return d


def _csv_cell(name: str, value) -> str:
    if value is None:
        return ""
    return f"{value:.4f}" if name in ACCURACY_FIELDS else repr(float(value))


def report_to_csv(report: EvalReport) -> str:
    """Fixed columns ``row, <metrics>``: one row per seed (``seed=<n>``), then ``mean`` and ``std``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_CSV_COLUMNS)
    for row in report.per_seed:
        w.writerow([f"seed={row['seed']}"] + [_csv_cell(m, row[m]) for m in METRICS])
    for stat in ("mean", "std"):
        w.writerow([stat] + [_csv_cell(m, report.aggregate[m][stat]) for m in METRICS])
    return buf.getvalue()


def write_report(report: EvalReport, path, format: str = "json") -> None:  # noqa: A002
    """Serialize deterministically; accuracies carry four decimals."""
    if format not in ("json", "csv"):
        raise ValueError(f"format must be json or csv, got {format!r}")
    path = Path(path)
    if format == "json":
        path.write_text(json.dumps(_rounded(report), indent=2, sort_keys=True) + "\n")
    else:
        path.write_text(report_to_csv(report))


def _parse_cell(text: str):
    return None if text == "" else float(text)


def read_report(path, format: str | None = None) -> EvalReport:  # noqa: A002
    path = Path(path)
    format = format or path.suffix.lstrip(".") or "json"
    if format == "json":
        d = json.loads(path.read_text())
        return EvalReport(d["config"], d["per_seed"], d["aggregate"], d.get("flags", []), d.get("timings", []))
    rows = list(csv.reader(io.StringIO(path.read_text())))
    if tuple(rows[0]) != REPORT_CSV_COLUMNS:
        raise ValueError(f"unexpected report columns {rows[0]}")
    per_seed, agg = [], {m: {} for m in METRICS}
    for r in rows[1:]:
        values = {m: _parse_cell(c) for m, c in zip(METRICS, r[1:])}
        if r[0].startswith("seed="):
            per_seed.append({"seed": int(r[0][5:]), **values})
        else:
            for m in METRICS:
                agg[m][r[0]] = values[m]
    return EvalReport({}, per_seed, agg)


# ---------------------------------------------------------------- N ablation


def n_ablation(run: RunConfig, steps_grid, epsilons, model=None, tau_model=None, dataset=None) -> list[dict]:
    """Robust accuracy of TTC for every counterattack step count and attack budget."""
    model, tau_model = _load_models(run, model, tau_model)
    ds = _eval_data(run, dataset)
    rows = []
    for eps in epsilons:
        attack = replace(run.attack, epsilon=float(eps), alpha=float(eps) / 4)
        for n in steps_grid:
            ca = replace(run.counterattack or CounterattackConfig(), steps=int(n))
            rep = evaluate(replace(run, attack=attack, counterattack=ca, defense="ttc"), model, tau_model, ds)
            rows.append({"epsilon_a": float(eps), "steps_n": int(n),
                         "robust_accuracy": rep.mean("robust_accuracy"),
                         "robust_std": rep.aggregate["robust_accuracy"]["std"],
                         "clean_accuracy": rep.mean("clean_accuracy")})
    return rows


def write_ablation_csv(rows: list[dict], path) -> None:
    with _open_out(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_CSV_COLUMNS)
        for r in rows:
            w.writerow([repr(r["epsilon_a"]), r["steps_n"], f"{r['robust_accuracy']:.4f}",
                        f"{r['robust_std']:.4f}", f"{r['clean_accuracy']:.4f}"])


def ablation_argmax(rows: list[dict]) -> dict[float, int]:
    """Step count with the highest robust accuracy per budget (first one on ties)."""
    best: dict[float, tuple[float, int]] = {}
    for r in rows:
        cur = best.get(r["epsilon_a"])
        if cur is None or r["robust_accuracy"] > cur[0]:
            best[r["epsilon_a"]] = (r["robust_accuracy"], r["steps_n"])
    return {e: n for e, (_, n) in best.items()}
