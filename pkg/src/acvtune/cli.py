"""Command-line driver: estimate, tune, baseline, grid and sweep.

A JSON config file is the source of truth for a run.  Flags override it and
the fully resolved config is written next to the results as
``manifest.json``, so rerunning with ``--config manifest.json`` reproduces
every output file byte for byte.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .bench import (KINDS, VarianceGrid, batch_summary, build_variance_grid, reference_mean, run_baseline,
                    run_sweep, write_trials_csv)
from .errors import ACVError, BudgetExhaustedError, ConfigError
from .models import CostLedger, load_config, make_benchmark_ensemble
from .pilot import write_trace
from .sampleset import SCHEMES
from .tuning import TuningConfig, ego_tune, run_pipeline, write_tuning_trace

OUT_ENV = "ACVTUNE_OUT"
DEFAULT_OUT = "acvtune-out"

RUN_DEFAULTS = {
    "budget": 2000.0,
    "n_pilot": 50,
    "n_iter": 5,
    "scheme": "ACV-MF",
    "seed": 0,
    "n_trial": 100,
    "kind": "Tuned",
    "budgets": [500.0, 1000.0, 2000.0],
    "n_pilots": [10, 50, 100],
    "n_iters": [5, 10, 20],
    "kinds": list(KINDS),
    "n_ref": 10000,
    "grid_points": 25,
    "reference_log2": 17,
}

log = logging.getLogger("acvtune")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _number_list(cast):
    def parse(text):
        try:
            return [cast(v) for v in text.split(",") if v.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def build_parser():
    p = _Parser(prog="acvtune", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"acvtune {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON config file; flags override its values")
        sp.add_argument("--benchmark", help="shipped benchmark name")
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--budget", type=float)
        sp.add_argument("--n-pilot", type=int, dest="n_pilot")
        sp.add_argument("--n-iter", type=int, dest="n_iter")
        sp.add_argument("--scheme", choices=SCHEMES)
        sp.add_argument("--qoi")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes (results do not depend on it)")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    common(sub.add_parser("estimate", help="tune, allocate and estimate once"))
    common(sub.add_parser("tune", help="run the hyperparameter tuning loop only"))
    sp = common(sub.add_parser("baseline", help="repeated trials of one solution type"))
    sp.add_argument("--kind", choices=KINDS)
    sp.add_argument("--n-trial", type=int, dest="n_trial")
    sp.add_argument("--grid", help="grid.json from the grid command (needed for BestCase)")
    sp = common(sub.add_parser("grid", help="oracle variance over the hyperparameter grid"))
    sp.add_argument("--n-ref", type=int, dest="n_ref")
    sp.add_argument("--grid-points", type=int, dest="grid_points")
    sp = common(sub.add_parser("sweep", help="cartesian sweep over budgets, pilot sizes and iterations"))
    sp.add_argument("--budgets", type=_number_list(float))
    sp.add_argument("--n-pilots", type=_number_list(int), dest="n_pilots")
    sp.add_argument("--n-iters", type=_number_list(int), dest="n_iters")
    sp.add_argument("--kinds", type=lambda s: [k for k in s.split(",") if k])
    sp.add_argument("--n-trial", type=int, dest="n_trial")
    sp.add_argument("--n-ref", type=int, dest="n_ref")
    sp.add_argument("--grid-points", type=int, dest="grid_points")
    sp.add_argument("--grid", help="grid.json to reuse for BestCase at every budget")
    return p


def resolve_run(args):
    """Merge file config, defaults and flags into one config dict."""
    top = {"benchmark": args.benchmark, "qoi": args.qoi}
    config = load_config(args.config, top)
    run = {**RUN_DEFAULTS, **config.get("run", {})}
    for key in RUN_DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            run[key] = val
    _validate(run)
    config["run"] = run
    return config


def _validate(run):
    def positive(name, v):
        if not (isinstance(v, (int, float)) and v > 0):
            raise ConfigError(f"{name} must be positive, got {v!r}")

    for name in ("budget", "n_pilot", "n_iter", "n_trial", "n_ref", "grid_points"):
        positive(name, run[name])
    for name in ("budgets", "n_pilots", "n_iters", "kinds"):
        if not run[name]:
            raise ConfigError(f"{name} must not be empty")
    for name in ("budgets", "n_pilots", "n_iters"):
        for v in run[name]:
            positive(name, v)
    bad = [k for k in run["kinds"] + [run["kind"]] if k not in KINDS]
    if bad:
        raise ConfigError(f"unknown solution type(s) {bad}; choose from {list(KINDS)}")
    if run["scheme"] not in SCHEMES + ("GMF",):
        raise ConfigError(f"unknown scheme {run['scheme']!r}")
    if not isinstance(run["seed"], int) or run["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")


def out_dir(args):
    path = args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {path} is not writable")
    return path


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def write_manifest(out, command, config):
    write_json(os.path.join(out, "manifest.json"),
               {**config, "command": command, "version": __version__, "seed": config["run"]["seed"]})


def _tuning_config(run):
    return TuningConfig(n_iter=run["n_iter"], n_pilot=run["n_pilot"], budget=run["budget"], scheme=run["scheme"],
                        seed=run["seed"])


def _check_tuning(run, ens):
    try:
        _tuning_config(run).resolve(ens.beta_dim or 1)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def reference(ens, config, out):
    """High-fidelity reference mean, cached in the output directory."""
    if ens.exact_mean is not None:
        return float(ens.exact_mean)
    run = config["run"]
    key = {"benchmark": config["benchmark"], "qoi": config.get("qoi"), "log2_n": run["reference_log2"],
           "physics": config.get("physics"), "inputs": config.get("inputs"), "version": __version__}
    path = os.path.join(out, "reference.json")
    if os.path.exists(path):
        with open(path) as fh:
            cached = json.load(fh)
        if cached.get("key") == key:
            return cached["q_ref"]
    q = reference_mean(ens, run["reference_log2"])
    write_json(path, {"key": key, "q_ref": q})
    return q


def cmd_estimate(config, out, jobs):
    run = config["run"]
    ens = make_benchmark_ensemble(config)
    _check_tuning(run, ens)
    ledger = CostLedger()
    rep = run_pipeline(ens, _tuning_config(run), ledger)
    write_json(os.path.join(out, "report.json"), rep.to_dict())
    write_trace(os.path.join(out, "online_trace.csv"), rep.extra["online"]["trace"])
    tuning = rep.extra.get("tuning")
    if tuning is not None:
        write_tuning_trace(os.path.join(out, "tuning_trace.csv"), tuning)
    print(f"estimate            {rep.qtilde:.10g}")
    print(f"predicted variance  {rep.predicted_variance:.6g}")
    print("ledger              " + ", ".join(f"{k}={v:.6g}" for k, v in sorted(rep.ledger.items())))
    return 0


def cmd_tune(config, out, jobs):
    run = config["run"]
    ens = make_benchmark_ensemble(config)
    _check_tuning(run, ens)
    ledger = CostLedger()
    res = ego_tune(ens, _tuning_config(run), ledger)
    write_json(os.path.join(out, "tuning.json"), {**res.to_dict(), "ledger": ledger.summary()})
    write_tuning_trace(os.path.join(out, "tuning_trace.csv"), res.to_dict())
    print(f"beta*     {json.dumps(res.beta_star.tolist())}")
    print(f"overhead  {res.overhead:.6g}")
    return 0


def _load_grid(path):
    if path is None:
        return None
    try:
        with open(path) as fh:
            return VarianceGrid.from_dict(json.load(fh))
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read grid {path}: {exc}") from exc


def cmd_baseline(config, out, jobs, grid_path=None):
    run = config["run"]
    ens = make_benchmark_ensemble(config)
    grid = _load_grid(grid_path)
    if run["kind"] == "BestCase" and grid is None:
        raise ConfigError("BestCase needs oracle hyperparameters: run `acvtune grid` first and pass --grid")
    if run["kind"] == "Tuned":
        _check_tuning(run, ens)
    q_ref = reference(ens, config, out)
    batch = run_baseline(run["kind"], config, run["budget"], run["n_trial"], run["seed"], run["n_pilot"],
                         run["n_iter"], run["scheme"], grid, jobs, run["n_ref"])
    write_trials_csv(os.path.join(out, "trials.csv"), [(run["n_pilot"], run["n_iter"], batch)], q_ref)
    summary = batch_summary(batch, q_ref)
    write_json(os.path.join(out, "summary.json"), {"q_ref": q_ref, **summary})
    print(f"{batch.kind}: MSE {summary['mse']:.6g} over {batch.n_trial} trials")
    return 0


def cmd_grid(config, out, jobs):
    run = config["run"]
    ens = make_benchmark_ensemble(config)
    if not ens.beta_dim:
        raise ConfigError(f"benchmark {config['benchmark']} has no tunable hyperparameters")
    grid = build_variance_grid(ens, run["budget"], run["scheme"], run["grid_points"], run["n_ref"], run["seed"])
    grid.write_csv(os.path.join(out, "grid.csv"))
    hand = ens.flatten_beta(ens.hand_beta)
    write_json(os.path.join(out, "grid.json"),
               {**grid.to_dict(), "argmin": grid.argmin().tolist(), "hand_beta": hand.tolist(),
                "hand_variance": grid(hand)})
    print(f"best beta {json.dumps(grid.argmin().tolist())}  variance {grid.values.min():.6g}")
    return 0


def cmd_sweep(config, out, jobs, grid_path=None):
    run = config["run"]
    ens = make_benchmark_ensemble(config)
    if "Tuned" in run["kinds"]:
        for n_pilot in run["n_pilots"]:
            for n_iter in run["n_iters"]:
                _check_tuning({**run, "n_pilot": n_pilot, "n_iter": n_iter}, ens)
    q_ref = reference(ens, config, out)
    given = _load_grid(grid_path)
    summaries, cells = [], []
    for budget in run["budgets"]:
        grid = given
        if "BestCase" in run["kinds"] and grid is None:
            grid = build_variance_grid(ens, budget, run["scheme"], run["grid_points"], run["n_ref"], run["seed"])
        s = run_sweep(config, [budget], run["n_pilots"], run["n_iters"], run["kinds"], run["n_trial"],
                      run["seed"], q_ref, grid, run["scheme"], jobs, None, cells)
        summaries.extend(s)
    write_trials_csv(os.path.join(out, "trials.csv"), cells, q_ref)
    write_json(os.path.join(out, "summary.json"), {"q_ref": q_ref, "cells": summaries})
    for s in summaries:
        print(f"budget {s['budget']:g} pilot {s['n_pilot']} iter {s['n_iter']} {s['kind']}: MSE {s['mse']:.6g}")
    return 0


COMMANDS = {"estimate": cmd_estimate, "tune": cmd_tune, "baseline": cmd_baseline, "grid": cmd_grid,
            "sweep": cmd_sweep}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        config = resolve_run(args)
        out = out_dir(args)
        write_manifest(out, args.command, config)
        fn = COMMANDS[args.command]
        if args.command in ("baseline", "sweep"):
            return fn(config, out, args.jobs, args.grid)
        return fn(config, out, args.jobs)
    except ConfigError as exc:
        print(f"acvtune: configuration error: {exc}", file=sys.stderr)
        return 2
    except BudgetExhaustedError as exc:
        print(f"acvtune: {exc}", file=sys.stderr)
        print("ledger: " + json.dumps(exc.ledger, sort_keys=True, default=_jsonable), file=sys.stderr)
        return 1
    except ACVError as exc:
        print(f"acvtune: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
