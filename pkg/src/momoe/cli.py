"""Command-line entry point: ``momoe {run, sweep-stability, verify-mgda, diagnose}``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config, parse_config
from .diagnostics import LoadHistogram, flatness_score, norm_trace_csv, record_norms, record_selection
from .layers import load_checkpoint
from .mgda import ObjectiveSet, is_pareto_stationary, min_norm_point, simplex_grid_min_norm
from .model import SMoEStack
from .runner import OUTPUT_ROOT_ENV, resolve_output_dir, run_experiment
from .stability import GUARD_BAND, agreement, region_sweep, stable_measure, sweep_to_csv
from .tasks import build_tiny_lm_task

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_BAD_CONFIG = 2
EXIT_DIVERGED = 3


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _emit(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
        return
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    print(f"wrote {path}", file=sys.stderr)


# -- run ------------------------------------------------------------------------

def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except FileNotFoundError:
        print(f"config error: {args.config}: no such file", file=sys.stderr)
        return EXIT_BAD_CONFIG
    t0 = time.perf_counter()
    result = run_experiment(cfg, root=args.output_root)
    if result.diverged:
        d = result.divergence or {}
        print(f"diverged at layer {d.get('layer')} step {d.get('step')}: {d.get('message')}", file=sys.stderr)
        print(f"report: {result.output_dir / 'divergence.json'}", file=sys.stderr)
        return EXIT_DIVERGED
    for k, v in sorted(result.metrics.items()):
        print(f"{k}\t{v:.6g}")
    print(f"outputs in {result.output_dir} ({time.perf_counter() - t0:.1f}s)", file=sys.stderr)
    return EXIT_OK


# -- sweep-stability --------------------------------------------------------------

def cmd_sweep(args) -> int:
    if args.step <= 0 or args.mu_max < args.mu_min or args.gs_max < args.gs_min:
        print("sweep-stability: need step > 0 and ordered ranges", file=sys.stderr)
        return EXIT_BAD_CONFIG
    mu = np.round(np.arange(args.mu_min, args.mu_max + args.step / 2, args.step), 10)
    gs = np.round(np.arange(args.gs_min, args.gs_max + args.step / 2, args.step), 10)
    t0 = time.perf_counter()
    rows = region_sweep(mu, gs, args.steps)
    meta = {"mu": [args.mu_min, args.mu_max], "gs": [args.gs_min, args.gs_max], "step": args.step,
            "steps": args.steps, "guard": args.guard}
    _emit(sweep_to_csv(rows, f"config_hash={_hash(meta)}"), args.out)
    stats = agreement(rows, args.guard)
    print(f"cells={len(rows)} excluded={stats['excluded']} analytic_vs_spectral={stats['analytic_vs_spectral']:.6f} "
          f"analytic_vs_empirical={stats['analytic_vs_empirical']:.6f} seconds={time.perf_counter() - t0:.2f}",
          file=sys.stderr)
    if np.any(np.isclose(mu, 0.0)) and np.any(np.isclose(mu, 0.9)):
        m0 = stable_measure(rows, float(mu[np.isclose(mu, 0.0)][0]), args.step)
        m9 = stable_measure(rows, float(mu[np.isclose(mu, 0.9)][0]), args.step)
        if m0 > 0:
            print(f"stable_measure(mu=0.9)/stable_measure(mu=0)={m9 / m0:.4f}", file=sys.stderr)
    return EXIT_OK


# -- verify-mgda --------------------------------------------------------------------

VERIFY_HEADER = ["trial", "E", "N", "solver_norm", "grid_norm", "norm_gap", "sq_norm_gap",
                 "descent_slack", "converged", "ok"]


def verify_mgda(trials: int, seed: int, grid_step: float, tol: float = 1e-5) -> tuple[list[list], bool]:
    """Random instances with E <= 4, N <= 8 checked against an exact grid search.

    ``ok`` requires the squared min-norm to match the grid optimum within ``tol``
    (the solver may not be worse than the grid), and the common-descent
    condition <v*, v_i> >= ||v*||^2 - 1e-9.
    """
    rng = np.random.default_rng(seed)
    rows: list[list] = []
    all_ok = True
    for t in range(trials):
        e = int(rng.integers(2, 5))
        n = int(rng.integers(1, 9))
        V = rng.normal(size=(e, n))
        res = min_norm_point(V)
        sn = float(np.linalg.norm(res.point))
        gn, _ = simplex_grid_min_norm(V, grid_step)
        slack = float(np.min(V @ res.point) - res.point @ res.point)
        sq_gap = gn * gn - sn * sn
        ok = bool(res.converged and -1e-12 <= sq_gap <= tol and slack >= -1e-9)
        all_ok &= ok
        rows.append([t, e, n, sn, gn, gn - sn, sq_gap, slack, int(res.converged), int(ok)])
    # two quadratics whose centers straddle the evaluation point: Pareto stationary
    obj = ObjectiveSet(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.stack([np.eye(2), np.eye(2)]))
    stationary = is_pareto_stationary(obj, np.zeros(2), tol=1e-10)
    all_ok &= stationary
    return rows, all_ok


def cmd_verify(args) -> int:
    rows, ok = verify_mgda(args.trials, args.seed, args.grid_step)
    buf = io.StringIO()
    meta = {"trials": args.trials, "seed": args.seed, "grid_step": args.grid_step}
    buf.write(f"# config_hash={_hash(meta)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(VERIFY_HEADER)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    _emit(buf.getvalue(), args.out)
    bad = sum(1 for r in rows if not r[-1])
    print(f"trials={len(rows)} failed={bad} max_sq_norm_gap={max(r[6] for r in rows):.3e} "
          f"min_descent_slack={min(r[7] for r in rows):.3e} all_ok={ok}", file=sys.stderr)
    return EXIT_OK if ok else EXIT_CHECK_FAILED


# -- diagnose --------------------------------------------------------------------

def diagnose(checkpoint: str | Path, out_dir: str | Path | None = None) -> dict:
    """Rebuild the model stored in ``checkpoint`` and write load and norm tables for its validation split."""
    arrays, meta = load_checkpoint(checkpoint)
    if "config" not in meta:
        raise ConfigError("checkpoint: no embedded config")
    cfg = parse_config(meta["config"])
    rng = np.random.default_rng(cfg.trainer.seed)
    tc = cfg.task
    corpus = build_tiny_lm_task(tc.vocab, tc.seq_len, rng, tc.train_sequences, tc.valid_sequences, tc.branching)
    model = SMoEStack(cfg.model, cfg.dynamics, rng)
    model.load_parameters(arrays)
    digest = meta.get("config_hash", cfg.digest())
    out = Path(out_dir) if out_dir is not None else Path(checkpoint).parent / "diagnose"
    out.mkdir(parents=True, exist_ok=True)
    tokens = corpus.valid[:, :-1]
    hist = LoadHistogram(cfg.model.experts)
    res = model.forward(tokens, record=True, dense_diagnostics=True)
    for layer, rec in enumerate(res.records):
        record_selection(hist, layer, rec.decision.selected, rec.expert_norms)
    (out / "load_histogram.csv").write_text(hist.to_csv(f"config_hash={digest}"), encoding="utf-8")
    trace = record_norms(model, tokens, checkpoint="final")
    (out / "norm_trace.csv").write_text(norm_trace_csv(trace, f"config_hash={digest}"), encoding="utf-8")
    return {"out": out, "flatness": {layer: flatness_score(hist.proportions(layer)) for layer in sorted(hist.counts)},
            "norms": [v for _, _, v in trace]}


def cmd_diagnose(args) -> int:
    try:
        info = diagnose(args.checkpoint, args.out)
    except (ConfigError, KeyError, ValueError, FileNotFoundError) as exc:
        print(f"diagnose: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    for layer, score in info["flatness"].items():
        print(f"layer {layer}\tflatness_tv={score:.4f}\tmean_output_norm={info['norms'][layer]:.4f}")
    print(f"outputs in {info['out']}", file=sys.stderr)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="momoe", description="Momentum-wrapped sparse mixture-of-experts lab.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train or unroll one experiment from a YAML config")
    r.add_argument("config", help="path to the experiment YAML")
    r.add_argument("--output-root", default=None,
                   help=f"base for relative output_dir (default: ${OUTPUT_ROOT_ENV} or the cwd)")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep-stability", help="(mu, gamma*sigma) stability grid as CSV")
    s.add_argument("--mu-min", type=float, default=-1.5)
    s.add_argument("--mu-max", type=float, default=1.5)
    s.add_argument("--gs-min", type=float, default=-0.5)
    s.add_argument("--gs-max", type=float, default=4.5)
    s.add_argument("--step", type=float, default=0.05, help="grid spacing on both axes")
    s.add_argument("--steps", type=int, default=500, help="simulation length for the empirical verdict")
    s.add_argument("--guard", type=float, default=GUARD_BAND, help="exclude |radius - 1| below this from agreement")
    s.add_argument("--out", default=None, help="CSV path ('-' or omitted: stdout)")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify-mgda", help="check the min-norm solver against an exact grid search")
    v.add_argument("--trials", type=int, default=100)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--grid-step", type=float, default=1e-3)
    v.add_argument("--out", default=None, help="CSV path ('-' or omitted: stdout)")
    v.set_defaults(func=cmd_verify)

    d = sub.add_parser("diagnose", help="norm-ordered load and output-norm tables for a checkpoint")
    d.add_argument("checkpoint", help="checkpoint.npz written by `momoe run`")
    d.add_argument("--out", default=None, help="output directory (default: <checkpoint dir>/diagnose)")
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
