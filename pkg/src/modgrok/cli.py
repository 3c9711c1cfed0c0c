"""Command-line entry point: ``modgrok <subcommand> [options]``.

Every subcommand writes deterministic artifacts (``metrics.csv``,
``report.json``, ``checkpoint.*``) into ``--out`` and keeps wall-clock data in
a separate ``run.json``.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import hashlib
import json
import math
import platform
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from modgrok import __version__
from modgrok.data import TaskKind, default_train_size, gen_full_population, most_frequent_c_count, sample_split
from modgrok.quadnet import LossKind, QuadNetParams, accuracy, batch_loss, linf_norm, logits_batch, margin
from modgrok.trainer import TrainConfig, TrainingDiverged, train, write_metrics

SCHEMA_VERSION = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskKind
    p: int
    h: int
    n: int
    train: TrainConfig
    preset: Optional[str] = None
    alphas: tuple = ()  # init-scale sweep values (small-init-sweep only)

    def __post_init__(self):
        object.__setattr__(self, "task", TaskKind(self.task))
        if self.p < 2:
            raise UsageError(f"p must be >= 2, got {self.p}")
        if self.h < 1:
            raise UsageError(f"h must be >= 1, got {self.h}")
        N = self.task.population_size(self.p)
        if not 1 <= self.n <= N:
            raise UsageError(f"n must lie in [1, {N}] for p={self.p}, got {self.n}")
        expected = LossKind.SQUARE if self.task is TaskKind.REGRESSION else LossKind.CROSS_ENTROPY
        if self.train.loss is not expected:
            raise UsageError(f"{self.task.value} needs {expected.value} loss, got {self.train.loss.value}")

    def to_dict(self) -> dict:
        return {
            "task": self.task.value, "p": self.p, "h": self.h, "n": self.n,
            "preset": self.preset, "alphas": list(self.alphas), "train": self.train.to_dict(),
        }


# ---------------------------------------------------------------- presets

def _regression(p: int) -> dict:
    return dict(task="regression", p=p, h=4 * p, n=default_train_size(p, "regression"),
                lr=1.0, lambda_inf=1e-4, loss="square", normalized=False, steps=50_000)


def _classification(p: int) -> dict:
    return dict(task="classification", p=p, h=4 * p, n=default_train_size(p, "classification"),
                lr=10.0, lambda_inf=1e-20, loss="cross_entropy", normalized=True, steps=100_000,
                entk_probe_every=max(1, 100_000 // 200))


def preset_values(name: str) -> dict:
    """Flat field values for a named preset."""
    m = re.fullmatch(r"(regression|classification)-p(\d+)", name)
    if m:
        p = int(m.group(2))
        vals = _regression(p) if m.group(1) == "regression" else _classification(p)
    elif name == "small-init-sweep":
        vals = _regression(47)
        vals["alphas"] = (0.1, 1.0)
    else:
        raise UsageError(f"unknown preset {name!r}; expected regression-pNN, classification-pNN or small-init-sweep")
    vals["preset"] = name
    return vals


def preset(name: str) -> ExperimentConfig:
    return build_config(preset_values(name))


_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}
_EXP_FIELDS = {"task", "p", "h", "n", "preset", "alphas"}


def build_config(values: dict) -> ExperimentConfig:
    values = dict(values)
    unknown = set(values) - _TRAIN_FIELDS - _EXP_FIELDS
    if unknown:
        raise UsageError(f"unknown config fields: {sorted(unknown)}")
    if "task" not in values or "p" not in values:
        raise UsageError("config needs at least 'task' and 'p' (or a preset)")
    task = TaskKind(values["task"])
    p = int(values["p"])
    values.setdefault("h", 4 * p)
    values.setdefault("n", default_train_size(p, task))
    values.setdefault("loss", "square" if task is TaskKind.REGRESSION else "cross_entropy")
    try:
        tc = TrainConfig(**{k: v for k, v in values.items() if k in _TRAIN_FIELDS})
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return ExperimentConfig(task, p, int(values["h"]), int(values["n"]), tc,
                            values.get("preset"), tuple(values.get("alphas", ())))


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix == ".json":
        data = json.loads(text)
    elif path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        data = tomllib.loads(text)
    else:
        raise UsageError(f"config must be .toml or .json, got {path.name}")
    # allow a [train] table as well as flat keys
    flat = {k: v for k, v in data.items() if k != "train"}
    flat.update(data.get("train", {}))
    return flat


def resolve_config(args, overrides: dict) -> ExperimentConfig:
    values: dict = {}
    name = getattr(args, "preset", None)
    cfg_path = getattr(args, "config", None)
    file_values = load_config_file(cfg_path) if cfg_path else {}
    name = name or file_values.get("preset")
    if name:
        values.update(preset_values(name))
    values.update(file_values)
    values.update({k: v for k, v in overrides.items() if v is not None})
    if args.seed is not None:
        values["seed"] = args.seed
    return build_config(values)


# ---------------------------------------------------------------- output helpers

def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _clean(x):
    """JSON has no NaN; map non-finite floats to None."""
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


def write_report(out: Path, report: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(_dump_json(_clean({"schema_version": SCHEMA_VERSION, **report})))


def write_run_metadata(out: Path, command: str, config: dict, seed) -> None:
    blob = json.dumps(config, sort_keys=True, default=_json_default).encode()
    meta = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "seed": seed,
        "config": config,
        "config_sha256": hashlib.sha256(blob).hexdigest(),
        "version": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(_dump_json(meta))


def _out_dir(args) -> Path:
    return Path(args.out) if args.out else Path("out") / args.command


# ---------------------------------------------------------------- subcommands

def _split(cfg: ExperimentConfig):
    pop = gen_full_population(cfg.p, cfg.task)
    return sample_split(pop, cfg.n, cfg.train.seed)


def cmd_gen_data(args) -> int:
    task = TaskKind(args.task)
    n = args.n if args.n is not None else default_train_size(args.p, task)
    seed = args.seed if args.seed is not None else 0
    pop = gen_full_population(args.p, task)
    if not 1 <= n <= len(pop):
        raise UsageError(f"n must lie in [1, {len(pop)}], got {n}")
    tr, te = sample_split(pop, n, seed)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    tr.to_csv(out / "train.csv")
    te.to_csv(out / "test.csv")
    report = {"p": args.p, "task": task.value, "n_train": len(tr), "n_test": len(te), "seed": seed}
    if task is TaskKind.REGRESSION:
        report["rho_c"] = most_frequent_c_count(tr)
    write_report(out, report)
    write_run_metadata(out, "gen-data", report, seed)
    print(_dump_json(report), end="")
    return 0


def _run_training(cfg: ExperimentConfig, out: Path, callback=None, tag: str = ""):
    tr, te = _split(cfg)
    theta, rows = train(cfg.train, tr, te, callback=callback, h=cfg.h)
    write_metrics(rows, out / f"metrics{tag}.csv")
    theta.save(out / f"checkpoint{tag}", cfg.task.value)
    return tr, te, theta, rows


def _final_summary(cfg, tr, te, theta, rows) -> dict:
    from modgrok.trainer import grokking_summary

    s = {
        "final_train_loss": rows[-1].train_loss,
        "final_test_loss": rows[-1].test_loss,
        "final_train_acc": rows[-1].train_acc,
        "final_test_acc": rows[-1].test_acc,
        "final_linf_norm": linf_norm(theta),
        "max_acc_gap": max((r.train_acc - r.test_acc for r in rows if not math.isnan(r.test_acc)), default=None),
    }
    s.update(grokking_summary(rows))
    if cfg.task is TaskKind.CLASSIFICATION:
        from modgrok.quadnet import normalized_margin

        s["train_normalized_margin"] = normalized_margin(theta, tr)
    return s


def cmd_train(args) -> int:
    cfg = resolve_config(args, _train_overrides(args))
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    write_run_metadata(out, "train", cfg.to_dict(), cfg.train.seed)
    alphas = cfg.alphas or (None,)
    runs = {}
    for alpha in alphas:
        run_cfg = cfg if alpha is None else dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, init_scale=alpha))
        tag = "" if alpha is None else f"_alpha{alpha:g}"
        tr, te, theta, rows = _run_training(run_cfg, out, tag=tag)
        runs[tag or "run"] = _final_summary(run_cfg, tr, te, theta, rows)
    report = {"config": cfg.to_dict(), "runs": runs}
    write_report(out, report)
    print(_dump_json(_clean(report)), end="")
    return 0


def cmd_grok_run(args) -> int:
    from modgrok.trainer import grok_run

    cfg = resolve_config(args, _train_overrides(args))
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    write_run_metadata(out, "grok-run", cfg.to_dict(), cfg.train.seed)
    tr, te = _split(cfg)
    theta, rows, info = grok_run(cfg.train, tr, te, h=cfg.h)
    write_metrics(rows, out / "metrics.csv")
    theta.save(out / "checkpoint", cfg.task.value)
    report = {"config": cfg.to_dict(), "summary": _final_summary(cfg, tr, te, theta, rows)}
    if info["probe_points"] is not None:
        report["entk"] = {k: info[k] for k in ("probe_points", "drift_before_t1", "drift_after_t1", "ratio")}
    write_report(out, report)
    print(_dump_json(_clean(report)), end="")
    return 0


def cmd_construct(args) -> int:
    from modgrok.fourier import ConstructionSpec, build, duplicate_shrink

    try:
        spec = ConstructionSpec(args.p, args.variant, args.output_scale)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    theta = build(spec)
    if args.h_target is not None:
        theta = duplicate_shrink(theta, args.h_target)
    report = {"p": args.p, "variant": spec.variant.value, "output_scale": args.output_scale,
              "h": theta.h, "linf_norm": linf_norm(theta)}
    if args.verify:
        pop = gen_full_population(args.p, TaskKind.CLASSIFICATION)
        logits = logits_batch(theta, pop.a, pop.b)
        target = 4.0 * args.p * args.output_scale * (np.arange(args.p)[None, :] == pop.labels[:, None])
        report["max_logit_deviation"] = float(np.abs(logits - target).max())
        report["margin"] = margin(theta, pop)
        report["accuracy"] = accuracy(theta, pop)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    theta.save(out / "checkpoint", "classification")
    write_report(out, report)
    print(_dump_json(report), end="")
    return 0


def cmd_ntk_analyze(args) -> int:
    from modgrok.ntk import NtkMoments, eig_diagnostics, entk_cross, entk_regression, interpolation_thresholds, \
        kernel_ridgeless_fit
    from modgrok.quadnet import forward_reg_batch
    from modgrok.trainer import init_params

    seed = args.seed if args.seed is not None else 0
    p, h = args.p, args.h
    n = args.n if args.n is not None else default_train_size(p, "regression")
    pop = gen_full_population(p, TaskKind.REGRESSION)
    if not 1 <= n <= len(pop):
        raise UsageError(f"n must lie in [1, {len(pop)}], got {n}")
    tr, te = sample_split(pop, n, seed)
    cfg = TrainConfig(seed=seed, init_scale=args.init_scale)
    theta = QuadNetParams.load(args.checkpoint) if args.checkpoint else init_params(p, h, cfg)
    h = theta.h
    K = entk_regression(theta, tr)
    diag = eig_diagnostics(K)
    rho = most_frequent_c_count(tr)
    s_w = args.init_scale * math.sqrt(1.0 / (2 * p))
    thr = interpolation_thresholds(p, n, h, rho, args.delta, NtkMoments.uniform(s_w), s_W=s_w)
    prior_tr = forward_reg_batch(theta, tr.a, tr.b, tr.c)
    coef = kernel_ridgeless_fit(K, tr.labels, prior_tr)
    train_res = float(np.abs(K.entries @ coef + prior_tr - tr.labels).max())
    report = {"p": p, "h": h, "n": n, "seed": seed, "rho_c": rho, "delta": args.delta,
              "eig": diag, "thresholds": thr, "train_max_residual": train_res}
    if len(te):
        prior_te = forward_reg_batch(theta, te.a, te.b, te.c)
        pred = entk_cross(theta, te, tr) @ coef + prior_te
        report["test_square_loss"] = float(np.mean((pred - te.labels) ** 2))
        report["zero_predictor_test_loss"] = float(np.mean(te.labels ** 2))
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    if args.save_kernel:
        K.save(out / "kernel", p=p, h=h, source_checkpoint=str(args.checkpoint) if args.checkpoint else None)
    write_report(out, report)
    print(_dump_json(_clean(report)), end="")
    return 0


def cmd_bounds(args) -> int:
    from modgrok.bounds import standard_report

    reports = standard_report(args.p, args.m, args.n, args.h, args.delta, args.r, args.gamma)
    payload = [r.to_dict() for r in reports]
    if args.out:
        write_report(Path(args.out), {"bounds": payload})
    print(_dump_json(payload), end="")
    return 0


def cmd_equi_check(args) -> int:
    from modgrok.equivariance import (PermTriple, check_class_forward_equivariance, check_forward_equivariance,
                                      check_gradient_equivariance, check_training_equivariance, sample_points)
    from modgrok.rng import stream
    from modgrok.trainer import init_params

    seed = args.seed if args.seed is not None else 0
    task = TaskKind(args.task)
    rng = stream(seed, "equi")
    sigma = PermTriple.random(args.p, rng)
    if task is TaskKind.REGRESSION:
        cfg = TrainConfig(lr=1.0, steps=args.steps, lambda_inf=1e-4, loss="square", seed=seed,
                          order_invariant=args.order_invariant)
    else:
        cfg = TrainConfig(lr=10.0, steps=args.steps, lambda_inf=1e-20, loss="cross_entropy",
                          normalized=True, seed=seed, order_invariant=args.order_invariant)
    theta = init_params(args.p, args.h, cfg)
    pts = sample_points(args.p, TaskKind.REGRESSION, 100, rng)
    pop = gen_full_population(args.p, task)
    tr, te = sample_split(pop, max(1, len(pop) // 2), seed)
    traj = check_training_equivariance(cfg, sigma, tr, te, theta0=theta)
    report = {
        "p": args.p, "h": args.h, "task": task.value, "steps": args.steps, "seed": seed,
        "order_invariant": args.order_invariant,
        "max_forward_dev": max(check_forward_equivariance(theta, sigma, pts),
                               check_class_forward_equivariance(theta, sigma, pts[:, :2])),
        "max_grad_dev": check_gradient_equivariance(theta, sigma, pts),
        "per_step_traj_dev": traj,
    }
    if args.out:
        write_report(Path(args.out), report)
    print(_dump_json(report), end="")
    return 0


# ---------------------------------------------------------------- argument parsing

def _train_overrides(args) -> dict:
    keys = ("task", "p", "h", "n", "lr", "steps", "lambda_inf", "init_scale", "normalized",
            "eval_every", "entk_probe_every", "entk_probe_points", "order_invariant")
    return {k: getattr(args, k, None) for k in keys}


def _add_train_flags(sp):
    sp.add_argument("--preset", help="regression-pNN, classification-pNN or small-init-sweep")
    sp.add_argument("--task", choices=[t.value for t in TaskKind])
    sp.add_argument("--p", type=int)
    sp.add_argument("--h", type=int)
    sp.add_argument("--n", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lambda-inf", dest="lambda_inf", type=float)
    sp.add_argument("--init-scale", dest="init_scale", type=float)
    sp.add_argument("--normalized", action=argparse.BooleanOptionalAction, default=None)
    sp.add_argument("--eval-every", dest="eval_every", type=int)
    sp.add_argument("--entk-probe-every", dest="entk_probe_every", type=int)
    sp.add_argument("--entk-probe-points", dest="entk_probe_points", type=int)
    sp.add_argument("--order-invariant", dest="order_invariant", action=argparse.BooleanOptionalAction,
                    default=None, help="sort every reduction (slow, bit-exact under relabelling)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON file with config fields")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(prog="modgrok", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-data", parents=[common], help="sample a train/test split to CSV")
    sp.add_argument("--p", type=int, required=True)
    sp.add_argument("--task", choices=[t.value for t in TaskKind], default="classification")
    sp.add_argument("--n", type=int)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", parents=[common], help="train one configuration")
    _add_train_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("grok-run", parents=[common], help="train and report the grokking signature")
    _add_train_flags(sp)
    sp.set_defaults(func=cmd_grok_run)

    sp = sub.add_parser("construct", parents=[common], help="build the Fourier interpolating weights")
    sp.add_argument("--p", type=int, required=True)
    sp.add_argument("--variant", choices=["8p", "4p"], default="8p")
    sp.add_argument("--output-scale", dest="output_scale", type=float, default=1.0)
    sp.add_argument("--h-target", dest="h_target", type=int)
    sp.add_argument("--verify", action="store_true")
    sp.set_defaults(func=cmd_construct)

    sp = sub.add_parser("ntk-analyze", parents=[common], help="eNTK diagnostics and ridgeless fit")
    sp.add_argument("--p", type=int, required=True)
    sp.add_argument("--h", type=int, required=True)
    sp.add_argument("--n", type=int)
    sp.add_argument("--delta", type=float, default=0.1)
    sp.add_argument("--init-scale", dest="init_scale", type=float, default=1.0)
    sp.add_argument("--checkpoint", help="checkpoint stem to analyze instead of a fresh init")
    sp.add_argument("--save-kernel", dest="save_kernel", action="store_true")
    sp.set_defaults(func=cmd_ntk_analyze)

    sp = sub.add_parser("bounds", parents=[common], help="evaluate the closed-form bounds as JSON")
    sp.add_argument("--p", type=int, required=True)
    sp.add_argument("--m", type=int, default=3)
    sp.add_argument("--n", type=int, default=0)
    sp.add_argument("--h", type=int)
    sp.add_argument("--delta", type=float, default=0.05)
    sp.add_argument("--r", type=float, default=1.0)
    sp.add_argument("--gamma", type=float)
    sp.set_defaults(func=cmd_bounds)

    sp = sub.add_parser("equi-check", parents=[common], help="numerical equivariance report")
    sp.add_argument("--p", type=int, default=5)
    sp.add_argument("--h", type=int, default=16)
    sp.add_argument("--task", choices=[t.value for t in TaskKind], default="regression")
    sp.add_argument("--steps", type=int, default=100)
    sp.add_argument("--order-invariant", dest="order_invariant", action=argparse.BooleanOptionalAction,
                    default=True, help="sorted reductions so trajectories match bit for bit (default on)")
    sp.set_defaults(func=cmd_equi_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on bad flags
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"modgrok {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"modgrok {args.command}: numerical abort: {exc}", file=sys.stderr)
        if exc.last_row is not None:
            print("last metrics row: " + ",".join(exc.last_row.as_csv()), file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
