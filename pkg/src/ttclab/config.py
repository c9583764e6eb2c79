"""Flat ``key = value`` config files with dotted sections, plus typed defaults.

A file like::

    [attack]
    steps = 10
    epsilon = 1/255

yields the flat key ``attack.steps``. Keys before any section header belong
to ``run``. Command-line flags ``--attack.steps 10`` override keys one-for-one.
"""

from __future__ import annotations

import configparser
from fractions import Fraction
from pathlib import Path


class ConfigError(ValueError):
    pass


# every known key with its default; the type of the default drives parsing
DEFAULTS: dict[str, object] = {
    "run.checkpoint": "",
    "run.tau_checkpoint": "",
    "run.output": "",
    "run.format": "json",
    "run.seeds": [0],
    "run.sample_cap": 0,
    "run.defense": "none",
    "run.budget_multiplier": 1.0,
    "run.checkpoints": [],
    "run.ablation_steps": [],
    "run.ablation_epsilons": [],
    "data.source": "synthetic",
    "data.classes": 10,
    "data.per_class": 200,
    "data.channels": 3,
    "data.width": 32,
    "data.height": 32,
    "data.separation": 0.5,
    "data.noise": 0.05,
    "data.seed": 0,
    "data.test_fraction": 0.1,
    "data.split_seed": 0,
    "data.images": "",
    "data.labels": "",
    "data.test_images": "",
    "data.test_labels": "",
    "model.hidden": 256,
    "model.embed_dim": 64,
    "model.depth": 1,
    "model.logit_scale": 10.0,
    "model.activation": "relu",
    "model.seed": 0,
    "train.learning_rate": 0.02,
    "train.epochs": 30,
    "train.batch_size": 32,
    "train.seed": 0,
    "tecoa.steps": 2,
    "tecoa.epsilon": 1 / 255,
    "tecoa.alpha": 1 / 255,
    "tecoa.learning_rate": 5e-5,
    "tecoa.epochs": 10,
    "tecoa.batch_size": 32,
    "tecoa.seed": 0,
    "attack.method": "pgd_ce",
    "attack.epsilon": 1 / 255,
    "attack.alpha": 1 / 1020,
    "attack.steps": 10,
    "attack.random_start": False,
    "attack.seed": 0,
    "attack.eta": 0.0,
    "attack.epsilon_ttc_assumed": 4 / 255,
    "attack.second_order": "fd",
    "attack.fd_step": 1e-3,
    "ttc.epsilon": 4 / 255,
    "ttc.alpha": 0.0,
    "ttc.steps": 2,
    "ttc.tau_thres": 0.2,
    "ttc.beta": 2.0,
    "ttc.tau_encoder": "original",
    "ttc.use_sign": True,
    "baseline.epsilon": 4 / 255,
    "baseline.anti_adv_steps": 2,
    "baseline.hedge_steps": 20,
    "scan.grid": [1 / 255, 2 / 255, 4 / 255, 8 / 255, 16 / 255],
    "scan.trials": 10,
    "scan.seed": 0,
    "gradcheck.cases": 20,
    "gradcheck.seed": 0,
    "gradcheck.h": 1e-3,
    "gradcheck.tolerance": 1e-3,
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _number(text: str) -> float:
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"not a number: {text!r}") from exc


def parse_value(key: str, text: str):
    """Parse ``text`` according to the type of ``DEFAULTS[key]``; fractions like ``1/255`` are allowed."""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    default = DEFAULTS[key]
    text = str(text).strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(default, int):
        value = _number(text)
        if value != int(value):
            raise ConfigError(f"{key}: expected an integer, got {text!r}")
        return int(value)
    if isinstance(default, float):
        return _number(text)
    if isinstance(default, list):
        parts = [p for p in text.replace(";", ",").split(",") if p.strip()]
        if key in ("run.seeds", "run.ablation_steps"):
            return _int_list(parts, key)
        if key == "run.checkpoints":
            return [p.strip() for p in parts]
        return [_number(p) for p in parts]
    return text


def _int_list(parts, key) -> list[int]:
    out = []
    for p in parts:
        p = p.strip()
        if ".." in p:
            lo, hi = p.split("..", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            value = _number(p)
            if value != int(value):
                raise ConfigError(f"{key}: expected integers, got {p!r}")
            out.append(int(value))
    return out


def read_config_file(path) -> dict[str, str]:
    """Raw dotted ``key -> text`` mapping from a config file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    body = path.read_text()
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",), strict=False)
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + body, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    flat = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            flat[f"{section}.{key}"] = value
    return flat


def resolve(raw: dict[str, str] | None = None, overrides: dict[str, str] | None = None) -> dict[str, object]:
    """Defaults, then file values, then overrides; every value typed."""
    cfg = dict(DEFAULTS)
    for source in (raw or {}, overrides or {}):
        for key, text in source.items():
            cfg[key] = parse_value(key, text)
    return cfg


def load_config(path=None, overrides: dict[str, str] | None = None) -> dict[str, object]:
    return resolve(read_config_file(path) if path else {}, overrides)


def section(cfg: dict, name: str) -> dict[str, object]:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(format_value(v) for v in value)
    return str(value)


def dump_config(cfg: dict) -> str:
    """Render a flat config back to file text (round-trips through ``load_config``)."""
    by_section: dict[str, list[str]] = {}
    for key in sorted(cfg):
        sec, name = key.split(".", 1)
        by_section.setdefault(sec, []).append(f"{name} = {format_value(cfg[key])}")
    return "\n".join(f"[{sec}]\n" + "\n".join(lines) + "\n" for sec, lines in by_section.items())
