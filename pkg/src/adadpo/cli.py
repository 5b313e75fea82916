"""Command-line entry point.

Subcommands: ``run``, ``sweep``, ``gradcheck`` and ``gen-data``.
Exit codes: 0 success, 2 bad input or config, 3 training divergence,
4 gradient-check tolerance breach.
"""

import argparse
import itertools
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

from . import data, gradcheck, report
from .config import ConfigError, load_experiment, load_sweep
from .losses import ADAPTIVE_METHODS, METHODS, LossSpec, adaptive_log_ratio
from .trainer import TrainConfig, TrainingDivergence, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_TOLERANCE = 4

# metric -> +1 if larger is better, -1 if smaller is better
WIN_METRICS = {
    "eval_loss": -1,
    "reward_accuracy": 1,
    "reward_margin_mean": 1,
    "kl_margin_mean": 1,
}


def _fail(msg, code):
    print(f"error: {msg}", file=sys.stderr)
    return code


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def _balance_range(metrics):
    vals = [m.balance_ratio for m in metrics if not math.isnan(m.balance_ratio)]
    return [min(vals), max(vals)] if vals else None


# --- run ---------------------------------------------------------------------


def cmd_run(args):
    try:
        cfg = load_experiment(args.config)
        if args.seed is not None:
            cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
        train_set, eval_set = cfg.dataset.load()
        reference = cfg.policy.reference_policy(train_set.vocab_size)
    except (ConfigError, ValueError) as e:
        return _fail(str(e), EXIT_CONFIG)

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        return _fail(f"cannot create output directory {out}: {e}", EXIT_CONFIG)
    try:
        res = train(train_set, cfg.loss, cfg.train, eval_set=eval_set, reference=reference,
                    context_order=cfg.policy.context_order)
    except TrainingDivergence as e:
        return _fail(str(e), EXIT_DIVERGED)

    report.write_metrics_csv(res.metrics, out / "metrics.csv")
    res.policy.save(out / "policy.json")
    summary = {
        "version": 1,
        "status": "ok",
        "config": _jsonable(asdict(cfg)),
        "n_train": len(train_set),
        "n_eval": len(eval_set) if eval_set is not None else len(train_set),
        "steps": res.metrics[-1].step,
        "initial": _jsonable(res.metrics[0].to_dict()),
        "final": _jsonable(res.metrics[-1].to_dict()),
        "balance_ratio_range": _balance_range(res.metrics),
    }
    report.write_json(summary, out / "summary.json")
    if not args.no_plots:
        report.plot_dynamics({f"{cfg.loss.method} beta={cfg.loss.beta:g}": res.metrics}, out / "dynamics.png")
    print(f"wrote {out / 'metrics.csv'} and {out / 'summary.json'}")
    return EXIT_OK


# --- sweep -------------------------------------------------------------------


def _run_cell(job):
    index, lr, beta, method, seed, sweep = job
    spec = LossSpec.from_dict({**sweep.loss, "method": method, "beta": beta})
    tcfg = TrainConfig.from_dict({**sweep.train, "lr": lr, "seed": seed})
    train_set, eval_set = sweep.dataset.load()
    reference = sweep.policy.reference_policy(train_set.vocab_size)
    cell = {"index": index, "lr": lr, "beta": beta, "method": method, "seed": seed}
    try:
        res = train(train_set, spec, tcfg, eval_set=eval_set, reference=reference,
                    context_order=sweep.policy.context_order)
    except TrainingDivergence as e:
        return {**cell, "status": "diverged", "error": str(e)}, None
    except Exception as e:  # a broken cell must not stop the sweep
        return {**cell, "status": "error", "error": f"{type(e).__name__}: {e}"}, None
    cell.update(status="ok", final=res.metrics[-1].to_dict(), balance_ratio_range=_balance_range(res.metrics))
    return cell, res.metrics


def win_fractions(grid, methods):
    """Per-metric fraction of matched (lr, beta) cells where each method strictly
    beats the first listed method."""
    baseline = methods[0]
    by_key = {(c["lr"], c["beta"], c["method"]): c for c in grid}
    lr_beta = sorted({(c["lr"], c["beta"]) for c in grid})
    fractions, counts = {}, {}
    for method in methods[1:]:
        wins = {k: 0 for k in WIN_METRICS}
        n = 0
        for lr, beta in lr_beta:
            a, b = by_key.get((lr, beta, method)), by_key.get((lr, beta, baseline))
            if a is None or b is None or a["status"] != "ok" or b["status"] != "ok":
                continue
            n += 1
            for key, sign in WIN_METRICS.items():
                if sign * a["final"][key] > sign * b["final"][key]:
                    wins[key] += 1
        fractions[method] = {k: (v / n if n else None) for k, v in wins.items()}
        counts[method] = n
    return fractions, counts


def cmd_sweep(args):
    try:
        sweep = load_sweep(args.config)
        if args.seed is not None:
            sweep = replace(sweep, seed=args.seed)
        sweep.dataset.load()
    except (ConfigError, ValueError) as e:
        return _fail(str(e), EXIT_CONFIG)
    if args.workers < 1:
        return _fail("--workers must be >= 1", EXIT_CONFIG)

    out = Path(args.out)
    try:
        (out / "cells").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        return _fail(f"cannot create output directory {out}: {e}", EXIT_CONFIG)
    jobs = [
        (i, lr, beta, method, sweep.seed + i, sweep)
        for i, (lr, beta, method) in enumerate(itertools.product(sweep.lrs, sweep.betas, sweep.methods))
    ]
    if args.workers == 1:
        results = [_run_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_run_cell, jobs))

    grid = []
    runs = {}
    for cell, metrics in results:
        if metrics is not None:
            name = f"cell_{cell['index']:03d}.csv"
            report.write_metrics_csv(metrics, out / "cells" / name)
            cell["csv"] = f"cells/{name}"
            runs[f"{cell['method']} lr={cell['lr']:g} beta={cell['beta']:g}"] = metrics
        grid.append(_jsonable(cell))
    fractions, counts = win_fractions(grid, sweep.methods)
    summary = {
        "version": 1,
        "baseline": sweep.methods[0],
        "lrs": sweep.lrs,
        "betas": sweep.betas,
        "methods": sweep.methods,
        "seed": sweep.seed,
        "grid": grid,
        "win_fractions": fractions,
        "comparisons": counts,
    }
    report.write_json(summary, out / "sweep_summary.json")
    if not args.no_plots:
        if any(c["status"] == "ok" for c in grid):
            report.plot_sweep(summary, out / "sweep.png")
        if runs:
            report.plot_dynamics(runs, out / "dynamics.png")
    n_bad = sum(c["status"] != "ok" for c in grid)
    print(f"wrote {out / 'sweep_summary.json'} ({len(grid)} cells, {n_bad} failed)")
    return EXIT_OK


# --- gradcheck ---------------------------------------------------------------


def cmd_gradcheck(args):
    if args.n < 1:
        return _fail("n must be >= 1", EXIT_CONFIG)
    methods = args.methods.split(",") if args.methods else list(METHODS)
    for m in methods:
        if m not in METHODS:
            return _fail(f"unknown method {m!r}", EXIT_CONFIG)
    try:
        specs = [LossSpec(m, beta=args.beta, ceiling_C=args.ceiling, balance_space=args.balance_space) for m in methods]
    except ValueError as e:
        return _fail(str(e), EXIT_CONFIG)

    samples = gradcheck.sample_pairs(args.n, args.seed)
    entries = []
    for spec in specs:
        s = gradcheck.random_balance_sweep(args.n, args.seed, spec, fd=not args.no_fd, samples=samples)
        s["passed"] = gradcheck.sweep_passes(s)
        entries.append(s)
    passed = all(e["passed"] for e in entries)
    result = _jsonable({
        "version": 1,
        "n": args.n,
        "seed": args.seed,
        "beta": args.beta,
        "ceiling_C": args.ceiling,
        "balance_tol": gradcheck.BALANCE_TOL,
        "fd_tol": gradcheck.FD_TOL,
        "methods": entries,
        "passed": passed,
    })
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.json").write_text(text, encoding="utf-8")
        if not args.no_plots:
            points = {}
            for spec in specs:
                if spec.method in ADAPTIVE_METHODS:
                    points[spec.method] = [
                        (adaptive_log_ratio(lp, spec), gradcheck.balanced_ratio(lp, spec)) for lp in samples
                    ]
            if points:
                report.plot_balance(points, out / "balance.png", args.ceiling)
    else:
        sys.stdout.write(text)
    if not passed:
        bad = ", ".join(e["method"] for e in entries if not e["passed"])
        return _fail(f"tolerance exceeded for: {bad}", EXIT_TOLERANCE)
    return EXIT_OK


# --- gen-data ----------------------------------------------------------------


def cmd_gen_data(args):
    try:
        ds = data.generate(args.seed, args.n_pairs, args.vocab_size, (args.min_len, args.max_len),
                           args.good_token, args.prompt_len, args.split)
    except ValueError as e:
        return _fail(str(e), EXIT_CONFIG)
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        data.save(ds, out)
    except OSError as e:
        return _fail(f"cannot write {out}: {e}", EXIT_CONFIG)
    print(f"wrote {len(ds)} pairs to {out}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="adadpo", description="Self-adaptive preference-optimization losses on toy policies.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train one configuration")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int, help="override the training seed")
    r.add_argument("--no-plots", action="store_true")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="lr x beta x method grid")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--seed", type=int, help="override the base seed")
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_sweep)

    g = sub.add_parser("gradcheck", help="verify gradient balance and finite differences")
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--methods", help="comma-separated; default all")
    g.add_argument("--beta", type=float, default=0.1)
    g.add_argument("--ceiling", type=float, default=2.0)
    g.add_argument("--balance-space", choices=("ratio", "policy"), default="ratio")
    g.add_argument("--no-fd", action="store_true", help="skip the finite-difference oracle")
    g.add_argument("--out", help="output directory (default: JSON to stdout)")
    g.add_argument("--no-plots", action="store_true")
    g.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("gen-data", help="write a synthetic preference dataset")
    d.add_argument("--out", required=True, help="output JSONL file")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--n-pairs", type=int, default=512)
    d.add_argument("--vocab-size", type=int, default=8)
    d.add_argument("--min-len", type=int, default=2)
    d.add_argument("--max-len", type=int, default=6)
    d.add_argument("--good-token", type=int, default=0)
    d.add_argument("--prompt-len", type=int, default=1)
    d.add_argument("--split", choices=data.SPLITS, default="train")
    d.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
