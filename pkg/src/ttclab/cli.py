"""Command-line entry point.

Every subcommand reads an optional config file (``--config path``) and then
applies dotted overrides such as ``--attack.steps 10``. Results go to
``run.output`` (or stdout); one JSON status line is printed on success.
Failures print ``{"error": ..., "message": ...}`` to stderr and exit 1; usage
mistakes (unknown subcommand or flag) exit 2.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import config as C
from .attacks import AttackConfig
from .defenses import CounterattackConfig
from .gradcheck import run_gradcheck, small_model
from .harness import (BaselineConfig, RunConfig, ablation_argmax, evaluate, generate_adversarial, n_ablation,
                      write_ablation_csv, write_report)
from .model import finetune_tecoa, load_checkpoint, save_checkpoint
from .presets import data_config, tecoa_config, train_from_config
from .stability import encoder_sensitivity_report, tau_scan

COMMANDS = ("train", "finetune-tecoa", "attack", "eval", "tau-scan", "sensitivity", "gradcheck")


class UsageError(Exception):
    pass


class GradcheckFailed(RuntimeError):
    pass


def attack_config(cfg: dict) -> AttackConfig:
    a = C.section(cfg, "attack")
    a["eta"] = a["eta"] or None
    return AttackConfig(**a)


def counterattack_config(cfg: dict) -> CounterattackConfig:
    t = C.section(cfg, "ttc")
    t["alpha"] = t["alpha"] or None
    return CounterattackConfig(**t)


def run_config(cfg: dict) -> RunConfig:
    r = C.section(cfg, "run")
    return RunConfig(checkpoint=r["checkpoint"], data=data_config(cfg), attack=attack_config(cfg),
                     defense=r["defense"], counterattack=counterattack_config(cfg),
                     baseline=BaselineConfig(**C.section(cfg, "baseline")), tau_checkpoint=r["tau_checkpoint"],
                     sample_cap=r["sample_cap"], seeds=tuple(r["seeds"]), output=r["output"],
                     budget_multiplier=r["budget_multiplier"])


def _need(cfg: dict, key: str) -> str:
    value = cfg[key]
    if not value:
        raise ValueError(f"missing required setting {key}")
    return value


def _emit(payload: dict) -> None:
    print(json.dumps({"status": "ok", **payload}, sort_keys=True))


def _test_data(cfg: dict):
    ds = data_config(cfg).load("test")
    cap = cfg["run.sample_cap"]
    return ds.subset(np.arange(cap)) if cap and cap < len(ds) else ds


# ---------------------------------------------------------------- commands


def cmd_train(cfg: dict) -> None:
    out = _need(cfg, "run.output")
    result, ds = train_from_config(cfg)
    save_checkpoint(result.model, out)
    _emit({"command": "train", "checkpoint": out, "final_loss": result.loss_curve[-1] if result.loss_curve else None,
           "train_accuracy": result.model.accuracy(ds.images, ds.labels)})


def cmd_finetune(cfg: dict) -> None:
    src = _need(cfg, "run.checkpoint")
    out = _need(cfg, "run.output")
    model = load_checkpoint(src)
    ds = data_config(cfg).load("train")
    result = finetune_tecoa(model, ds.images, ds.labels, tecoa_config(cfg))
    save_checkpoint(result.model, out)
    _emit({"command": "finetune-tecoa", "checkpoint": out,
           "final_loss": result.loss_curve[-1] if result.loss_curve else None})


def cmd_attack(cfg: dict) -> None:
    model = load_checkpoint(_need(cfg, "run.checkpoint"))
    ds = _test_data(cfg)
    acfg = attack_config(cfg)
    adv = generate_adversarial(model, ds.images, ds.labels, acfg)
    if cfg["run.output"]:
        np.save(cfg["run.output"], adv)
    _emit({"command": "attack", "clean_accuracy": model.accuracy(ds.images, ds.labels),
           "robust_accuracy": model.accuracy(adv, ds.labels), "n": len(ds), "output": cfg["run.output"] or None})


def cmd_eval(cfg: dict) -> None:
    run = run_config(cfg)
    if cfg["run.ablation_steps"]:
        epsilons = cfg["run.ablation_epsilons"] or [run.attack.epsilon]
        rows = n_ablation(run, cfg["run.ablation_steps"], epsilons)
        out = cfg["run.output"]
        write_ablation_csv(rows, out or sys.stdout)
        if cfg["run.output"]:
            _emit({"command": "eval", "ablation_csv": out,
                   "argmax_steps": {repr(k): v for k, v in ablation_argmax(rows).items()}})
        return
    report = evaluate(run)
    if cfg["run.output"]:
        write_report(report, cfg["run.output"], cfg["run.format"])
    _emit({"command": "eval", "output": cfg["run.output"] or None,
           "clean_accuracy": round(report.mean("clean_accuracy"), 4),
           "robust_accuracy": round(report.mean("robust_accuracy"), 4), "flags": report.flags})


def cmd_tau_scan(cfg: dict) -> None:
    model = load_checkpoint(_need(cfg, "run.checkpoint"))
    ds = _test_data(cfg)
    result = tau_scan(model, ds.images, ds.labels, attack_config(cfg), cfg["scan.grid"], cfg["scan.trials"],
                      cfg["scan.seed"])
    if cfg["run.output"]:
        result.to_csv(cfg["run.output"])
        _emit({"command": "tau-scan", "output": cfg["run.output"], "n": result.sample_count})
    else:
        result.to_csv(sys.stdout)


def cmd_sensitivity(cfg: dict) -> None:
    paths = cfg["run.checkpoints"] or [p for p in (cfg["run.checkpoint"], cfg["run.tau_checkpoint"]) if p]
    if not paths:
        raise ValueError("missing required setting run.checkpoints")
    encoders = [(p, load_checkpoint(p)) for p in paths]
    ds = _test_data(cfg)
    report = encoder_sensitivity_report(encoders, ds.images, cfg["scan.grid"], cfg["scan.seed"], cfg["scan.trials"])
    if cfg["run.output"]:
        report.to_csv(cfg["run.output"])
        _emit({"command": "sensitivity", "output": cfg["run.output"]})
    else:
        report.to_csv(sys.stdout)


def cmd_gradcheck(cfg: dict) -> None:
    m = small_model(cfg["gradcheck.seed"], cfg["model.activation"], cfg["model.logit_scale"])
    errs = run_gradcheck(m, cfg["gradcheck.cases"], cfg["gradcheck.seed"], cfg["gradcheck.h"])
    worst = max(errs.values())
    tol = cfg["gradcheck.tolerance"]
    line = {"command": "gradcheck", "max_rel_err": worst, "tolerance": tol, "per_objective": errs}
    if worst > tol:
        raise GradcheckFailed(json.dumps(line, sort_keys=True))
    _emit(line)


HANDLERS = {"train": cmd_train, "finetune-tecoa": cmd_finetune, "attack": cmd_attack, "eval": cmd_eval,
            "tau-scan": cmd_tau_scan, "sensitivity": cmd_sensitivity, "gradcheck": cmd_gradcheck}


# ---------------------------------------------------------------- parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ttclab", description="Counterattack defenses on a toy dual encoder.",
                                epilog="Override any config key with --section.key VALUE, e.g. --attack.steps 10.")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    sub.required = True
    for name in COMMANDS:
        sp = sub.add_parser(name, help=f"run {name}")
        sp.add_argument("--config", help="config file (key = value with [section] headers)")
    return p


def parse_overrides(extra: list[str]) -> dict[str, str]:
    """``--section.key value`` / ``--section.key=value`` pairs; anything else is a usage error."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if key not in C.DEFAULTS:
            raise UsageError(f"unknown flag --{key}")
        if not eq:
            if i + 1 >= len(extra):
                raise UsageError(f"flag --{key} needs a value")
            value = extra[i + 1]
            i += 1
        out[key] = value
        i += 1
    return out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, extra = parser.parse_known_args(argv)
        overrides = parse_overrides(extra)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    except UsageError as exc:
        sub_usage = parser.format_usage().rstrip()
        print(f"{sub_usage}\nttclab: error: {exc}", file=sys.stderr)
        return 2
    try:
        cfg = C.load_config(args.config, overrides)
        HANDLERS[args.command](cfg)
    except GradcheckFailed as exc:
        print(json.dumps({"error": "GradcheckFailed", "message": str(exc)}), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every failure becomes one machine-readable line
        msg = str(exc)
        if isinstance(exc, FileNotFoundError) and exc.filename and str(exc.filename) not in msg:
            msg = f"{msg}: {exc.filename}"
        print(json.dumps({"error": type(exc).__name__, "message": msg}), file=sys.stderr)
        return 1
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
