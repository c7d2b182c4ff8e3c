"""Command line front end.

Exit codes: 0 success, 2 usage or configuration error, 3 invalid input data,
4 numerical failure, 5 no convergence within the iteration budget.
"""
from __future__ import annotations

import argparse
import glob
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .alt import run_em_variant
from .em import CRITERIA, EMConfig, prepare, run_em, write_trace_csv
from .errors import (
    ConfigurationError, DataError, GraphError, ICMSMError, NumericalError,
    ShapeMismatchError,
)
from .graph import read_model_spec, serialize_model_spec
from .panel import read_panel_csv, write_panel_csv, format_time
from .poisson import run_em_poisson
from .prodint import read_estimate_csv, write_estimate_csv, write_probabilities_csv
from .simulate import (
    Target, default_tgrid, fitted_curves, read_scenario, score, simulate_replicates,
    true_values, write_metrics_csv,
)

log = logging.getLogger("icmsm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_NOCONV = 0, 2, 3, 4, 5
ESTIMATORS = ("multinomial", "poisson", "canonical", "multinoulli")
SCHEMAS = {
    "estimate.csv": "from,to,bin,tau,alpha",
    "trace.csv": "iteration,loglik,max_delta,max_reduced_gradient",
    "reduced_gradient.csv": "from,to,bin,tau,reduced_gradient",
    "probs": "from,to,s,t,prob",
    "metrics": "target,from,to,t,bias,variance,rmse",
    "panel": "id,time,state",
}
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class MissingInputError(Exception):
    pass


def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _need_file(path, what):
    if not os.path.isfile(path):
        raise MissingInputError(f"{what} not found: {path}")
    return path


def write_manifest(out_dir, command, inputs, config, seed=None, stop_reason=None,
                   wall_time=0.0, extra=None):
    """Write the single manifest of ``out_dir``.

    The config digest covers the options and every input byte, so it changes
    exactly when a run would not be reproduced.
    """
    inputs = {k: {"path": str(p), "sha256": _digest(p)} for k, p in inputs.items()}
    blob = json.dumps({"command": command, "config": config,
                       "inputs": {k: v["sha256"] for k, v in inputs.items()}},
                      sort_keys=True, default=str)
    manifest = {
        "command": command,
        "inputs": inputs,
        "config": config,
        "config_digest": hashlib.sha256(blob.encode()).hexdigest(),
        "seed": seed,
        "tool_version": __version__,
        "wall_time": wall_time,
        "stop_reason": stop_reason,
        "schemas": SCHEMAS,
    }
    if extra:
        manifest.update(extra)
    with open(Path(out_dir) / MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return manifest


# -- fit ------------------------------------------------------------------------

def _write_gradient_csv(result, path):
    est = result.estimate
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(SCHEMAS["reduced_gradient.csv"] + "\n")
        for g, h in est.graph.transitions:
            col = result.final_reduced_gradient[:, g - 1, h - 1]
            for k in range(est.K):
                fh.write(f"{g},{h},{k + 1},{format_time(est.taus[k])},{float(col[k])!r}\n")


def cmd_fit(args):
    model_path = _need_file(args.model, "model spec")
    panel_path = _need_file(args.panel, "panel file")
    graph = read_model_spec(model_path)
    data = read_panel_csv(panel_path, graph)
    problem = prepare(data)
    inputs = {"model": model_path, "panel": panel_path}
    if args.init == "file":
        if not args.init_file:
            raise UsageError("--init file requires --init-file")
        inputs["init"] = _need_file(args.init_file, "initial estimate file")
        init_est = read_estimate_csv(args.init_file, graph)
        if not np.array_equal(init_est.taus, problem.grid.taus):
            raise ConfigurationError(
                "initial estimate file is not on the bin grid of the panel "
                f"({init_est.K} bins vs {problem.grid.K})")
        initial = init_est
    else:
        initial = args.init
    threads = args.threads or kernels.default_threads()
    progress = None
    if not args.quiet:
        def progress(it, delta, ll):
            print(f"iteration {it}: max delta {delta:.3e}, loglik {ll:.6f}", file=sys.stderr)
    config = EMConfig(tolerance=args.tol, criterion=args.criterion,
                      max_iterations=args.max_iter, initial=initial, threads=threads,
                      progress=progress)
    t0 = time.perf_counter()
    if args.estimator == "multinomial":
        result = run_em(problem, config)
    elif args.estimator == "poisson":
        result = run_em_poisson(problem, config)
    else:
        result = run_em_variant(problem, config, args.estimator)
    wall = time.perf_counter() - t0

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_estimate_csv(result.estimate, out / "estimate.csv")
    write_trace_csv(result, out / "trace.csv")
    _write_gradient_csv(result, out / "reduced_gradient.csv")
    (out / "model.toml").write_text(serialize_model_spec(graph), encoding="utf-8")
    config_record = {
        "estimator": args.estimator, "tolerance": args.tol, "criterion": args.criterion,
        "max_iterations": args.max_iter, "init": args.init,
    }
    write_manifest(out, "fit", inputs, config_record, stop_reason=result.stop_reason,
                   wall_time=wall, extra={
                       "initial_estimate": {"kind": args.init, "file": args.init_file},
                       "iterations": result.iterations,
                       "converged": result.converged,
                       "loglik": result.loglik,
                       "max_reduced_gradient": result.max_reduced_gradient,
                       "clamp_events": result.clamp_events,
                       "loglik_decreases": [list(x) for x in result.loglik_decreases],
                       "bins": problem.grid.K,
                       "max_bin_width": problem.grid.max_gap,
                       "threads": threads,
                       "backend": kernels.BACKEND,
                   })
    if not args.quiet:
        print(f"{args.estimator}: {result.stop_reason} after {result.iterations} iterations, "
              f"loglik {result.loglik:.6f}, max reduced gradient "
              f"{result.max_reduced_gradient:.3e}", file=sys.stderr)
    return EXIT_OK if result.converged else EXIT_NOCONV


# -- simulate -------------------------------------------------------------------------

def cmd_simulate(args):
    if args.reps < 1:
        raise UsageError("--reps must be at least 1")
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    path = _need_file(args.scenario, "scenario file")
    spec = read_scenario(path)
    seed = spec.seed if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    width = len(str(args.reps))
    files = []
    for j, data in enumerate(simulate_replicates(spec, args.n, args.reps, seed), start=1):
        name = f"rep_{j:0{width}d}.csv"
        write_panel_csv(data, out / name)
        files.append(name)
    (out / "model.toml").write_text(serialize_model_spec(spec.graph), encoding="utf-8")
    write_manifest(out, "simulate", {"scenario": path},
                   {"n": args.n, "reps": args.reps, "seed": seed}, seed=seed,
                   wall_time=time.perf_counter() - t0, extra={"outputs": files})
    return EXIT_OK


# -- probs ----------------------------------------------------------------------------

def parse_grid(text):
    parts = text.split(":")
    if len(parts) != 3:
        raise UsageError(f"--grid expects t0:t1:step, got {text!r}")
    try:
        t0, t1, step = (float(p) for p in parts)
    except ValueError:
        raise UsageError(f"--grid expects numbers, got {text!r}") from None
    if t1 < t0 or t0 < 0:
        raise UsageError("--grid needs 0 <= t0 <= t1")
    if t1 == t0:
        return np.array([t0])
    if step <= 0:
        raise UsageError("--grid step must be positive")
    m = int(np.floor((t1 - t0) / step + 1e-9))
    grid = t0 + step * np.arange(m + 1)
    if grid[-1] < t1 - 1e-9 * step:
        grid = np.append(grid, t1)
    return np.round(grid, 12)


def _load_fit(fit_dir):
    fit_dir = Path(fit_dir)
    est_path = fit_dir / "estimate.csv"
    model_path = fit_dir / "model.toml"
    for p in (est_path, model_path):
        if not p.is_file():
            raise MissingInputError(f"fit artifact missing: {p}")
    graph = read_model_spec(model_path)
    return read_estimate_csv(est_path, graph)


def cmd_probs(args):
    est = _load_fit(args.fit_dir)
    grid = parse_grid(args.grid)
    if grid[0] < args.from_time:
        raise UsageError("--grid starts before --from")
    states = [est.graph.state_index(s) for s in args.state] if args.state else None
    text = write_probabilities_csv(est, args.from_time, grid, from_states=states)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- metrics --------------------------------------------------------------------------

def parse_targets(text, graph):
    """``A:1:2,P:1:3@0`` -> targets. Default: all intensities and P from state 1."""
    if not text:
        tg = [Target("cumintensity", g, h) for g, h in graph.transitions]
        tg += [Target("transprob", 1, h, 0.0) for h in graph.states]
        return tg
    out = []
    for item in text.split(","):
        item = item.strip()
        s = 0.0
        if "@" in item:
            item, s_text = item.split("@", 1)
            s = float(s_text)
        parts = item.split(":")
        if len(parts) != 3 or parts[0] not in ("A", "P"):
            raise UsageError(f"bad target {item!r}; use A:g:h or P:g:h[@s]")
        g, h = graph.state_index(parts[1]), graph.state_index(parts[2])
        kind = "cumintensity" if parts[0] == "A" else "transprob"
        if kind == "cumintensity" and not graph.allowed[g - 1, h - 1]:
            raise UsageError(f"{g}->{h} is not a transition of the model")
        out.append(Target(kind, g, h, s))
    return out


def cmd_metrics(args):
    scen_path = _need_file(args.scenario, "scenario file")
    spec = read_scenario(scen_path)
    dirs = sorted(p for p in glob.glob(args.fits) if os.path.isdir(p))
    if len(dirs) < 2:
        raise UsageError(f"need at least two fit directories matching {args.fits!r}, "
                         f"found {len(dirs)}")
    targets = parse_targets(args.targets, spec.graph)
    tgrid = parse_grid(args.grid) if args.grid else default_tgrid(spec.horizon)
    truth = true_values(spec, targets, tgrid)
    curves = []
    for d in dirs:
        est = _load_fit(d)
        if est.graph.transitions != spec.graph.transitions:
            raise ShapeMismatchError(f"fit in {d} uses a different model than the scenario")
        curves.append(fitted_curves(est, targets, tgrid))
    metrics = score(curves, truth, tgrid)
    text = write_metrics_csv(metrics)
    inputs = {"scenario": scen_path}
    for d in dirs:
        inputs[f"fit:{d}"] = str(Path(d) / "estimate.csv")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
        write_manifest(out.parent, "metrics", inputs,
                       {"targets": [f"{t.label}:{t.g}:{t.h}@{t.s}" for t in targets],
                        "replicates": len(dirs)})
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- entry ----------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(
        prog="icmsm",
        description="Non-parametric EM estimation for interval-censored multi-state models.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit an estimator to a panel file")
    f.add_argument("model", help="model spec (TOML)")
    f.add_argument("panel", help="panel data, columns id,time,state")
    f.add_argument("--estimator", choices=ESTIMATORS, default="multinomial")
    f.add_argument("--tol", type=float, default=1e-4, help="convergence tolerance")
    f.add_argument("--criterion", choices=CRITERIA, default="max_intensity_change")
    f.add_argument("--max-iter", type=int, default=5000, help="iteration budget")
    f.add_argument("--init", choices=("uniform", "unfortunate", "file"), default="uniform",
                   help="initial jumps: 1/K everywhere, front-loaded, or from --init-file")
    f.add_argument("--init-file", help="estimate CSV (from,to,bin,tau,alpha) for --init file")
    f.add_argument("--out", required=True, help="output directory")
    f.add_argument("--threads", type=int, default=None,
                   help="E-step worker threads (default: ICMSM_THREADS or CPU count)")
    f.add_argument("-q", "--quiet", action="store_true", help="no progress output")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="generate panel data sets from a scenario")
    s.add_argument("scenario", help="scenario spec (TOML)")
    s.add_argument("--n", type=int, required=True, help="subjects per data set")
    s.add_argument("--reps", type=int, default=1, help="number of data sets")
    s.add_argument("--seed", type=int, default=None, help="overrides the scenario seed")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    q = sub.add_parser("probs", help="transition probabilities from a fit")
    q.add_argument("fit_dir", help="directory written by 'fit'")
    q.add_argument("--from", dest="from_time", type=float, default=0.0,
                   help="start time s of P(s, t)")
    q.add_argument("--grid", required=True, help="t0:t1:step")
    q.add_argument("--state", action="append", help="only rows from this state (repeatable)")
    q.add_argument("--out", help="output file (default stdout)")
    q.set_defaults(func=cmd_probs)

    m = sub.add_parser("metrics", help="bias, variance and RMSE of replicate fits")
    m.add_argument("fits", help="glob matching fit directories")
    m.add_argument("scenario", help="scenario spec providing the true intensities")
    m.add_argument("--targets", help="comma list like A:1:2,P:1:3@0 (default: all)")
    m.add_argument("--grid", help="t0:t1:step (default 0:horizon:0.1)")
    m.add_argument("--out", help="output file (default stdout)")
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingInputError, DataError, GraphError, ShapeMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        where = f" (iteration {exc.iteration})" if exc.iteration is not None else ""
        print(f"numerical failure{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ICMSMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
