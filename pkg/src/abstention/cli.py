"""Command-line entry point.

Subcommands: train, eval, verify, gaps, realizable, finite-sample.

Every run resolves its configuration as built-in defaults, then values from
``--config`` (a JSON file in the manifest schema), then explicit flags. The
resolved configuration, seeds and SHA-256 hashes of every artifact go to
``manifest.json`` in the output directory.

Exit codes: 0 success, 2 configuration error, 3 training failure,
4 inconclusive (oracle non-convergence), 5 bound violation or failed check.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import consistency as cl
from .data_io import (
    SyntheticRecipe,
    TabularDataset,
    Table,
    generate,
    load_csv,
    load_model,
    load_problem_spec,
    save_model,
    write_report,
)
from .losses import canonical_mu, check_cost, margin
from .models import TrainConfig, TrainingError, evaluate, population_metrics, train_single_stage, train_two_stage

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING, EXIT_INCONCLUSIVE, EXIT_VIOLATION = 0, 2, 3, 4, 5


class ConfigError(ValueError):
    pass


def _log(msg: str):
    print(msg, file=sys.stderr, flush=True)


def _floats(text) -> list:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    if isinstance(text, (int, float)):
        return [float(text)]
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text) -> list:
    return [int(v) for v in _floats(text)]


def _grid(text) -> list:
    """``start:stop:step`` (inclusive of stop) or a comma list."""
    if isinstance(text, str) and ":" in text:
        a, b, s = (float(v) for v in text.split(":"))
        if s <= 0:
            raise ConfigError("grid step must be positive")
        k = int(math.floor((b - a) / s + 1e-9))
        return [round(a + i * s, 12) for i in range(k + 1)]
    return _floats(text)


# --------------------------------------------------------------------------
# Parser and configuration
# --------------------------------------------------------------------------

TRAIN_DEFAULTS = {
    "csv": None,
    "label": "y",
    "loss": "ce",
    "mu": 1.0,
    "two_stage": False,
    "phi": "exp",
    "cost": 0.5,
    "kind": "linear",
    "width": 64,
    "clamp": None,
    "lr": 0.1,
    "schedule": "constant",
    "epochs": 100,
    "batch_size": 32,
    "l2": 0.0,
    "momentum": 0.0,
    "seed": 0,
    "out": "abstention-train",
}

EVAL_DEFAULTS = {"model": None, "csv": None, "label": "y", "cost": None, "out": "abstention-eval"}

VERIFY_DEFAULTS = {
    "theorem": "3.1",
    "mu": "0,0.5,1,1.5,2,3",
    "cost": None,
    "n": "2,3,5",
    "phi": "exp,logistic",
    "trials": None,
    "mutate": False,
    "inconclusive_threshold": 0.01,
    "seed": 0,
    "workers": None,
    "out": "abstention-verify",
}

GAPS_DEFAULTS = {
    "mu_grid": "0:4:0.1",
    "cost": "0.5",
    "n": 2,
    "demo": None,
    "lam": 2.0,
    "eta": 1.0,
    "out": "abstention-gaps",
}

REALIZABLE_DEFAULTS = {
    "n": 3,
    "d": 2,
    "margin": 0.5,
    "cost": 0.2,
    "atoms": 60,
    "seed": 7,
    "phi": "exp",
    "kind": "linear",
    "lr": 0.5,
    "epochs": 300,
    "batch_size": 16,
    "m": None,
    "out": "abstention-realizable",
}

FINITE_DEFAULTS = {
    "recipe": "label_noise",
    "problem": None,
    "rho": 0.1,
    "n": 3,
    "d": 2,
    "margin": 0.5,
    "cost": 0.2,
    "atoms": 60,
    "m": 500,
    "delta": 0.05,
    "trials": 40,
    "clamp": None,
    "mu": 1.0,
    "kind": "linear",
    "lr": 0.5,
    "epochs": 30,
    "batch_size": 32,
    "reference_epochs": 2000,
    "reference_runs": 20,
    "sigma_draws": 50,
    "rademacher_steps": 2000,
    "seed": 0,
    "workers": None,
    "out": "abstention-finite-sample",
}

DEFAULTS = {
    "train": TRAIN_DEFAULTS,
    "eval": EVAL_DEFAULTS,
    "verify": VERIFY_DEFAULTS,
    "gaps": GAPS_DEFAULTS,
    "realizable": REALIZABLE_DEFAULTS,
    "finite-sample": FINITE_DEFAULTS,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _log(f"{self.prog}: error: {message}")
        raise SystemExit(EXIT_CONFIG)


def _add(p, defaults, name, help, flag=None, **kw):
    flag = flag or "--" + name.replace("_", "-")
    shown = defaults[name]
    if kw.get("action") == "store_true":
        kw = {"action": "store_const", "const": True}
    p.add_argument(flag, dest=name, default=None, help=f"{help} (default: {shown})", **kw)


def _common(p, defaults):
    p.add_argument("--config", default=None, help="JSON config file; flags override it (default: None)")
    _add(p, defaults, "out", "output directory")


COST_HELP = (
    "abstention cost c in (0, 1); a practical choice is a value close to the "
    "best-in-class zero-one error of a plain classifier on the task"
)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="abstention", description="Score-based classification with abstention.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    d = TRAIN_DEFAULTS
    p = sub.add_parser("train", help="train a single-stage or two-stage abstention model")
    _add(p, d, "csv", "training CSV with a header row")
    _add(p, d, "label", "name of the label column")
    _add(p, d, "loss", "single-stage loss family: ce or comp_sum (both select L_mu)", choices=["ce", "comp_sum"])
    _add(p, d, "mu", "comp-sum parameter mu >= 0 (single-stage only)", type=float)
    _add(p, d, "two_stage", "train predictor then rejector", action="store_true")
    _add(p, d, "phi", "second-stage margin function", choices=["exp", "logistic"])
    _add(p, d, "cost", COST_HELP, type=float)
    _add(p, d, "kind", "model family", choices=["linear", "mlp"])
    _add(p, d, "width", "MLP hidden width", type=int)
    _add(p, d, "clamp", "clip scores to [-clamp, clamp]", type=float)
    _add(p, d, "lr", "learning rate", type=float)
    _add(p, d, "schedule", "learning-rate schedule", choices=["constant", "cosine"])
    _add(p, d, "epochs", "training epochs", type=int)
    _add(p, d, "batch_size", "minibatch size", type=int)
    _add(p, d, "l2", "L2 penalty coefficient", type=float)
    _add(p, d, "momentum", "SGD momentum", type=float)
    _add(p, d, "seed", "random seed", type=int)
    _common(p, d)

    d = EVAL_DEFAULTS
    p = sub.add_parser("eval", help="evaluate saved models on a labeled CSV")
    _add(p, d, "model", "model file(s); use PRED:REJ for a two-stage pair", nargs="+")
    _add(p, d, "csv", "evaluation CSV")
    _add(p, d, "label", "name of the label column")
    _add(p, d, "cost", "abstention cost (default: the cost stored with the model)", type=float)
    _common(p, d)

    d = VERIFY_DEFAULTS
    p = sub.add_parser("verify", help="numerically check a consistency bound")
    _add(p, d, "theorem", "which check to run", choices=["3.1", "3.3", "4.1", "calibration"])
    _add(p, d, "mu", "comma list of mu values")
    _add(p, d, "cost", "comma list of costs (default per theorem: 0.05,0.25,0.5,0.9; 0.1,0.5 for 4.1)")
    _add(p, d, "n", "comma list of label counts")
    _add(p, d, "phi", "comma list of margin functions (4.1)")
    _add(p, d, "trials", "trials per cell (default per theorem: 10000; 1000 for 3.3 and 4.1)", type=int)
    _add(p, d, "mutate", "self-test: shrink the bound constants, which must produce violations", action="store_true")
    _add(p, d, "inconclusive_threshold", "max fraction of unconverged oracle calls", type=float)
    _add(p, d, "seed", "random seed", type=int)
    _add(p, d, "workers", "parallel worker processes (default: all CPUs)", type=int)
    _common(p, d)

    d = GAPS_DEFAULTS
    p = sub.add_parser("gaps", help="minimizability gaps and the bounded-score demo")
    _add(p, d, "mu_grid", "mu values as start:stop:step or a comma list")
    _add(p, d, "cost", "comma list of costs")
    _add(p, d, "n", "number of labels for the numeric oracle", type=int)
    _add(p, d, "demo", "run a named demo instead of the sweep", choices=["appendix-f"])
    _add(p, d, "lam", "score bound of the demo", flag="--lambda", type=float)
    _add(p, d, "eta", "conditional probability of the demo", type=float)
    _common(p, d)

    d = REALIZABLE_DEFAULTS
    p = sub.add_parser("realizable", help="two-stage training on certified separable data")
    _add(p, d, "n", "number of labels", type=int)
    _add(p, d, "d", "feature dimension", type=int)
    _add(p, d, "margin", "geometric margin of the data", type=float)
    _add(p, d, "cost", COST_HELP, type=float)
    _add(p, d, "atoms", "number of distinct points", type=int)
    _add(p, d, "seed", "recipe and training seed", type=int)
    _add(p, d, "phi", "second-stage margin function", choices=["exp", "logistic"])
    _add(p, d, "kind", "model family", choices=["linear", "mlp"])
    _add(p, d, "lr", "learning rate", type=float)
    _add(p, d, "epochs", "epochs per stage", type=int)
    _add(p, d, "batch_size", "minibatch size", type=int)
    _add(p, d, "m", "train on an i.i.d. sample of this size instead of the points themselves", type=int)
    _common(p, d)

    d = FINITE_DEFAULTS
    p = sub.add_parser("finite-sample", help="empirical coverage of the finite-sample bound")
    _add(p, d, "recipe", "synthetic recipe", choices=["label_noise", "separable_margin", "chow_stress"])
    _add(p, d, "problem", "problem spec file with features (overrides the recipe)")
    _add(p, d, "rho", "label-noise rate", type=float)
    _add(p, d, "n", "number of labels", type=int)
    _add(p, d, "d", "feature dimension", type=int)
    _add(p, d, "margin", "margin of the clean construction", type=float)
    _add(p, d, "cost", COST_HELP, type=float)
    _add(p, d, "atoms", "number of atoms", type=int)
    _add(p, d, "m", "sample size", type=int)
    _add(p, d, "delta", "confidence parameter", type=float)
    _add(p, d, "trials", "number of sampled training sets (at least 20)", type=int)
    _add(p, d, "clamp", "score clamp of the family (required)", type=float)
    _add(p, d, "mu", "comp-sum parameter", type=float)
    _add(p, d, "kind", "model family", choices=["linear", "mlp"])
    _add(p, d, "lr", "learning rate", type=float)
    _add(p, d, "epochs", "epochs per trial", type=int)
    _add(p, d, "batch_size", "minibatch size", type=int)
    _add(p, d, "reference_epochs", "epochs of each best-in-class reference run", type=int)
    _add(p, d, "reference_runs", "number of reference runs", type=int)
    _add(p, d, "sigma_draws", "Rademacher draws", type=int)
    _add(p, d, "rademacher_steps", "gradient-ascent steps per supremum", type=int)
    _add(p, d, "seed", "random seed", type=int)
    _add(p, d, "workers", "parallel worker processes (default: all CPUs)", type=int)
    _common(p, d)
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from None
        doc = doc.get("config", doc)
        unknown = set(doc) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(doc)
    explicit = {k: v for k, v in vars(args).items() if k in cfg and v is not None}
    cfg.update(explicit)
    cfg["_explicit"] = sorted(explicit)
    if args.config:
        cfg["_config_keys"] = sorted(set(doc))
    return cfg


def _workers(value) -> int:
    if value is None:
        return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)
    if value < 1:
        raise ConfigError("workers must be at least 1")
    return int(value)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """Output directory bookkeeping and manifest writing."""

    def __init__(self, command: str, cfg: dict):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg["out"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[Path] = []
        self.seeds: list = []

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def report(self, name: str, report):
        paths = write_report(self.path(name), report)
        self.artifacts.extend(paths)
        return paths

    def model(self, name: str, model):
        p = self.path(name)
        save_model(p, model)
        self.artifacts.append(p)
        return p

    def finish(self, code: int, summary: dict | None = None) -> int:
        config = {k: v for k, v in self.cfg.items() if not k.startswith("_")}
        manifest = {
            "tool": "abstention",
            "version": __version__,
            "subcommand": self.command,
            "config": config,
            "explicit_flags": self.cfg.get("_explicit", []),
            "seeds": self.seeds,
            "artifacts": {str(p.relative_to(self.out)): _sha256(p) for p in self.artifacts},
            "exit_code": code,
            "summary": summary or {},
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
        return code


def _json_default(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not serializable: {type(x).__name__}")


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def _was_set(cfg: dict, key: str) -> bool:
    # A replayed manifest lists every key, so config values equal to the
    # default do not count as a request.
    if key in cfg.get("_explicit", []):
        return True
    return key in cfg.get("_config_keys", []) and cfg[key] != TRAIN_DEFAULTS[key]


def cmd_train(cfg: dict) -> int:
    if not cfg["csv"]:
        raise ConfigError("--csv is required")
    if cfg["two_stage"] and _was_set(cfg, "mu"):
        raise ConfigError("--mu selects the single-stage surrogate and cannot be combined with --two-stage")
    if not cfg["two_stage"] and _was_set(cfg, "phi"):
        raise ConfigError("--phi applies to --two-stage training only")
    data = load_csv(cfg["csv"], cfg["label"])
    common = dict(
        cost=cfg["cost"],
        kind=cfg["kind"],
        width=cfg["width"],
        clamp=cfg["clamp"],
        lr=cfg["lr"],
        schedule=cfg["schedule"],
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        l2=cfg["l2"],
        momentum=cfg["momentum"],
        seed=cfg["seed"],
    )
    run = Run("train", cfg)
    run.seeds = [cfg["seed"]]
    try:
        if cfg["two_stage"]:
            c1 = TrainConfig(loss="ce", mu=1.0, **common)
            c2 = TrainConfig(loss="two_stage", phi=cfg["phi"], **common)
            _log(f"training two-stage model on {data.m} rows (phi={cfg['phi']}, c={cfg['cost']})")
            pred, rej = train_two_stage(data, c1, c2)
            for m in (pred, rej):
                m.meta["label_names"] = data.label_names
            run.model("predictor.model", pred)
            run.model("rejector.model", rej)
            models = (pred, rej)
        else:
            c = TrainConfig(loss="comp_sum", mu=cfg["mu"], **common)
            _log(f"training single-stage model on {data.m} rows (mu={c.mu}, c={cfg['cost']})")
            model = train_single_stage(data, c)
            model.meta["label_names"] = data.label_names
            run.model("model.model", model)
            models = model
    except TrainingError as exc:
        _log(f"training failed: {exc}")
        return run.finish(EXIT_TRAINING, {"error": str(exc)})
    metrics = evaluate(models, data, cfg["cost"])
    run.report("metrics.json", metrics)
    _log(f"training abstention loss {metrics.abstention_loss:.4f}, rejection rate {metrics.rejection_rate:.3f}")
    return run.finish(EXIT_OK, {"abstention_loss": metrics.abstention_loss})


def _load_models(spec: str):
    if ":" in spec and not Path(spec).exists():
        a, b = spec.split(":", 1)
        return (load_model(a), load_model(b))
    return load_model(spec)


def cmd_eval(cfg: dict) -> int:
    if not cfg["model"] or not cfg["csv"]:
        raise ConfigError("--model and --csv are required")
    specs = cfg["model"] if isinstance(cfg["model"], list) else [cfg["model"]]
    loaded = [_load_models(s) for s in specs]
    rows = []
    for spec, models in zip(specs, loaded):
        first = models if not isinstance(models, tuple) else models[0]
        names = first.meta.get("label_names")
        data = load_csv(cfg["csv"], cfg["label"], names)
        if data.d != first.in_dim:
            raise ConfigError(f"{spec}: model expects {first.in_dim} features, dataset has {data.d}")
        cost = cfg["cost"] if cfg["cost"] is not None else first.meta.get("cost")
        if cost is None:
            raise ConfigError("no --cost given and none stored with the model")
        m = evaluate(models, data, cost)
        rows.append({"model": spec, "seed": first.meta.get("seed"), **vars(m)})
    losses = np.array([r["abstention_loss"] for r in rows])
    summary = {"models": len(rows), "abstention_loss_mean": float(losses.mean())}
    if len(rows) > 1:
        summary["abstention_loss_std"] = float(losses.std(ddof=1))
    run = Run("eval", cfg)
    run.seeds = [r["seed"] for r in rows]
    run.report("metrics.json", Table("eval", rows, summary))
    _log(
        f"abstention loss {summary['abstention_loss_mean']:.4f}"
        + (f" ± {summary['abstention_loss_std']:.4f}" if "abstention_loss_std" in summary else "")
    )
    return run.finish(EXIT_OK, summary)


def _cell_3_1(args):
    mu, c, n, trials, seed, scale = args
    return cl.check_theorem_3_1(mu, c, n, trials=trials, seed=seed, gamma_scale=scale)


def _cell_4_1(args):
    c, phi, trials, seed, gamma2, scale = args
    return cl.check_theorem_4_1(c, phi, trials=trials, seed=seed, gamma2=gamma2, gamma2_scale=scale)


def _cell_3_3(args):
    base, c, n, trials, seed, scale = args
    gamma = cl.GammaTransform.sqrt(2.0) if base == 1.0 else cl.GammaTransform.linear(n + 1.0)
    r = cl.check_theorem_3_3(base, gamma.scaled(scale), c, n, problems=trials, seed=seed)
    merged = r.premise.merge(r.conclusion)
    merged.params = {"theorem": "3.3", "base_mu": base, "c": c, "n": n, "premise_passed": r.premise.passed}
    return merged


def _cell_calibration(args):
    mu, c, n, trials, seed, scale = args
    curve = cl.estimate_calibration_function(cl.AbstentionPair(mu, c, n), trials=trials, seed=seed)
    gamma = cl.GammaTransform.for_mu(mu, c, n).scaled(scale)
    r = cl.BoundCheckReport(params={"theorem": "calibration", "mu": mu, "c": c, "n": n})
    pts = curve.points()
    r.record([m for _, _, m in pts], [gamma(hi) for _, hi, _ in pts], cl.VIOLATION_TOL)
    return r


def cmd_verify(cfg: dict) -> int:
    theorem = cfg["theorem"]
    mus = [canonical_mu(m) for m in _floats(cfg["mu"])]
    costs = [check_cost(c) for c in _floats(cfg["cost"] or ("0.1,0.5" if theorem == "4.1" else "0.05,0.25,0.5,0.9"))]
    ns = _ints(cfg["n"])
    if any(n < 2 for n in ns):
        raise ConfigError("n must be at least 2")
    trials = cfg["trials"] or (1000 if theorem in ("3.3", "4.1") else 10000)
    if trials < 1:
        raise ConfigError("trials must be positive")
    seed = cfg["seed"]
    workers = _workers(cfg["workers"])
    if theorem == "3.1":
        scale = 0.5 if cfg["mutate"] else 1.0
        jobs = [(mu, c, n, trials, seed + i, scale) for i, (mu, c, n) in enumerate((m, c, n) for m in mus for c in costs for n in ns)]
        fn, names = _cell_3_1, [f"mu{j[0]:g}_c{j[1]:g}_n{j[2]}" for j in jobs]
    elif theorem == "calibration":
        scale = 0.5 if cfg["mutate"] else 1.0
        jobs = [(mu, c, n, trials, seed + i, scale) for i, (mu, c, n) in enumerate((m, c, n) for m in mus for c in costs for n in ns)]
        fn, names = _cell_calibration, [f"mu{j[0]:g}_c{j[1]:g}_n{j[2]}" for j in jobs]
    elif theorem == "3.3":
        scale = 0.5 if cfg["mutate"] else 1.0
        jobs = [(b, c, n, trials, seed + i, scale) for i, (b, c, n) in enumerate((b, c, n) for b in (1.0, 2.0) for c in costs for n in ns)]
        fn, names = _cell_3_3, [f"base{j[0]:g}_c{j[1]:g}_n{j[2]}" for j in jobs]
    else:
        phis = [margin(p) for p in str(cfg["phi"]).split(",")]
        scale = 0.1 if cfg["mutate"] else 1.0
        gammas = {p.kind: cl.default_gamma2(p) for p in phis}
        jobs = [(c, p, trials, seed + i, gammas[p.kind], scale) for i, (c, p) in enumerate((c, p) for c in costs for p in phis)]
        fn, names = _cell_4_1, [f"c{j[0]:g}_{j[1].short}" for j in jobs]

    _log(f"verify {theorem}: {len(jobs)} cells x {trials} trials on {workers} worker(s)")
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            reports = list(ex.map(fn, jobs))
    else:
        reports = [fn(j) for j in jobs]

    run = Run("verify", cfg)
    run.seeds = [j[4] if theorem != "4.1" else j[3] for j in jobs]
    rows = []
    for name, rep in zip(names, reports):
        run.report(f"cells/{name}.json", rep)
        rows.append({"cell": name, "trials": rep.trials, "violations": rep.violation_count,
                     "min_slack": rep.min_slack, "unconverged": rep.unconverged, "passed": rep.passed, **rep.params})
        _log(f"  {name}: {'ok' if rep.passed else 'VIOLATED'} ({rep.violation_count} violations, min slack {rep.min_slack:.3g})")
    total = cl.merge_reports(reports)
    total.params = {"theorem": theorem, "mutated": bool(cfg["mutate"]), "cells": len(reports)}
    run.report("report.json", total)
    run.report("cells.json", Table(f"verify-{theorem}", rows))
    frac = total.unconverged / max(total.trials, 1)
    summary = {"passed": total.passed, "violations": total.violation_count, "unconverged_fraction": frac}
    if frac > cfg["inconclusive_threshold"]:
        _log(f"inconclusive: {frac:.2%} of oracle calls did not converge")
        return run.finish(EXIT_INCONCLUSIVE, summary)
    if not total.passed:
        _log(f"{total.violation_count} violations found")
        return run.finish(EXIT_VIOLATION, summary)
    _log("all checks passed")
    return run.finish(EXIT_OK, summary)


def cmd_gaps(cfg: dict) -> int:
    run = Run("gaps", cfg)
    if cfg["demo"] == "appendix-f":
        rec = cl.approx_vs_gap_demo(cfg["lam"], cfg["eta"])
        run.report("appendix_f.json", rec)
        _log(f"bounded inf {rec.bounded_inf:.10g}, unbounded inf {rec.unbounded_inf:.10g}, difference {rec.difference:.10g}")
        print(json.dumps(vars(rec)))
        return run.finish(EXIT_OK, vars(rec))
    mus = [canonical_mu(m) for m in _grid(cfg["mu_grid"])]
    costs = [check_cost(c) for c in _floats(cfg["cost"])]
    n = int(cfg["n"])
    if n < 2:
        raise ConfigError("n must be at least 2")
    rows, ok = [], True
    for c in costs:
        prev = math.inf
        for mu in mus:
            rep = cl.deterministic_gap_report(mu, c, n)
            run.report(f"gap_reports/mu{mu:g}_c{c:g}.json", rep)
            decreasing = rep.closed_form_V < prev
            prev = rep.closed_form_V
            agree = rep.V_error <= 1e-6
            ok &= decreasing and agree
            rows.append({"mu": mu, "c": c, "closed_form_V": rep.closed_form_V, "numeric_V": rep.numeric_V,
                         "abs_error": rep.V_error, "decreasing": decreasing,
                         "softmax_true": rep.optimal_softmax[0], "softmax_reject": rep.optimal_softmax[1]})
    run.report("sweep.json", Table("gaps-sweep", rows))
    for r in rows:
        print(f"{r['mu']:6.3g} {r['c']:6.3g} {r['closed_form_V']:.10f} {r['numeric_V']:.10f}")
    return run.finish(EXIT_OK if ok else EXIT_VIOLATION, {"monotone_and_agreeing": ok})


def cmd_realizable(cfg: dict) -> int:
    recipe = SyntheticRecipe(
        "separable_margin", n=cfg["n"], d=cfg["d"], c=cfg["cost"], margin=cfg["margin"], atoms=cfg["atoms"], seed=cfg["seed"]
    )
    problem, sampler, info = generate(recipe)
    if cfg["m"]:
        data = sampler.sample(cfg["m"])
    else:
        data = TabularDataset(problem.features, info["clean_labels"], problem.n)
    base = dict(cost=cfg["cost"], kind=cfg["kind"], lr=cfg["lr"], epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                seed=cfg["seed"], l2=0.0, clamp=None)
    run = Run("realizable", cfg)
    run.seeds = [cfg["seed"]]
    try:
        pred, rej = train_two_stage(data, TrainConfig(loss="ce", mu=1.0, **base),
                                    TrainConfig(loss="two_stage", phi=cfg["phi"], **base))
        single = train_single_stage(data, TrainConfig(loss="comp_sum", mu=1.0, **base))
    except TrainingError as exc:
        _log(f"training failed: {exc}")
        return run.finish(EXIT_TRAINING, {"error": str(exc)})
    two = population_metrics((pred, rej), problem)
    one = population_metrics(single, problem)
    run.model("predictor.model", pred)
    run.model("rejector.model", rej)
    run.model("single_stage.model", single)
    summary = {
        "certified_margin": info["certified_margin"],
        "two_stage_abstention_loss": two["abstention_loss"],
        "single_stage_abstention_loss": one["abstention_loss"],
    }
    run.report("summary.json", Table("realizable", [summary]))
    _log(f"margin {info['certified_margin']:.4f}; two-stage loss {two['abstention_loss']:.4f}; "
         f"single-stage L_1 loss {one['abstention_loss']:.4f}")
    return run.finish(EXIT_OK if two["abstention_loss"] <= 0.01 else EXIT_VIOLATION, summary)


def cmd_finite_sample(cfg: dict) -> int:
    from .finite_sample import validate_bound

    if cfg["clamp"] is None:
        raise ConfigError("finite-sample needs a clamped family: pass --clamp")
    if cfg["trials"] < 20:
        raise ConfigError("finite-sample needs at least 20 trials")
    if cfg["problem"]:
        from .data_io import Sampler

        problem = load_problem_spec(cfg["problem"])
        if problem.features is None:
            raise ConfigError("the problem file needs feature vectors on every atom")
        sampler = Sampler(problem, cfg["seed"])
    else:
        recipe = SyntheticRecipe(cfg["recipe"], n=cfg["n"], d=cfg["d"], c=cfg["cost"], margin=cfg["margin"],
                                 rho=cfg["rho"], atoms=cfg["atoms"], seed=cfg["seed"])
        problem, sampler, _ = generate(recipe)
    train_cfg = TrainConfig(loss="comp_sum", mu=cfg["mu"], cost=problem.c, kind=cfg["kind"], lr=cfg["lr"],
                            epochs=cfg["epochs"], batch_size=cfg["batch_size"], clamp=cfg["clamp"], seed=cfg["seed"])
    ref_cfg = TrainConfig(loss="comp_sum", mu=cfg["mu"], cost=problem.c, kind=cfg["kind"], lr=cfg["lr"],
                          epochs=cfg["reference_epochs"], batch_size=problem.size, clamp=cfg["clamp"], seed=cfg["seed"])
    workers = _workers(cfg["workers"])
    _log(f"finite-sample: {cfg['trials']} trials of m={cfg['m']} on {workers} worker(s)")
    try:
        rec = validate_bound(problem, sampler, train_cfg, cfg["m"], trials=cfg["trials"], delta=cfg["delta"],
                             sigma_draws=cfg["sigma_draws"], reference_runs=cfg["reference_runs"],
                             reference_cfg=ref_cfg, rademacher_steps=cfg["rademacher_steps"], workers=workers,
                             seed=cfg["seed"])
    except TrainingError as exc:
        _log(f"training failed: {exc}")
        return Run("finite-sample", cfg).finish(EXIT_TRAINING, {"error": str(exc)})
    run = Run("finite-sample", cfg)
    run.seeds = [cfg["seed"], *rec.reference_seeds]
    run.report("coverage.json", rec)
    _log(f"bound {rec.bound:.4f}; coverage {rec.coverage:.3f} (required {rec.required:.3f})")
    return run.finish(EXIT_OK if rec.passed else EXIT_VIOLATION, {"coverage": rec.coverage, "bound": rec.bound})


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "gaps": cmd_gaps,
    "realizable": cmd_realizable,
    "finite-sample": cmd_finite_sample,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, ValueError, TypeError, FileNotFoundError) as exc:
        _log(f"configuration error: {exc}")
        return EXIT_CONFIG
    except TrainingError as exc:
        _log(f"training failed: {exc}")
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
