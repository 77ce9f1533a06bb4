"""Command-line entry point: ``python -m infonewton <subcommand>``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from ..core import InfoNewtonError, validate_model
from .experiment import (
    PRESETS,
    build_config,
    gaussian_oracle,
    grid_experiment,
    load_config,
    parse_config_text,
    run_experiment,
    write_rows,
)
from .targets import TARGETS, build_target


def _overrides(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise InfoNewtonError(f"--set expects key=value, got {item!r}")
        out.update(parse_config_text(item))
    return out


def _report(result):
    for m, tr in result.trajectories.items():
        last = {}
        for r in tr.records:
            last[r["metric"]] = r["value"]
        shown = ", ".join(f"{k}={v:.4g}" for k, v in last.items())
        status = f" [stopped: {tr.error}]" if tr.error else ""
        print(f"{m:>10}: {shown}{status}")
    print(f"wrote {len(result.files)} files to {result.config.out}")


def cmd_run(args):
    overrides = _overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    cfg = load_config(args.config, overrides)
    _report(run_experiment(cfg, parallel=args.parallel))


def cmd_compare(args):
    entries = {"target": args.target, **_overrides(args.set)}
    if args.methods:
        entries["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    for key in ("seed", "n", "out"):
        if getattr(args, key) is not None:
            entries[key] = getattr(args, key)
    if args.iters is not None:
        entries["max_iter"] = args.iters
    entries.setdefault("out", f"results/{args.target}")
    _report(run_experiment(build_config(entries), parallel=args.parallel))


def cmd_gaussian_oracle(args):
    rows = gaussian_oracle(args.sigma0, args.sigmastar, args.t, mu0=args.mu0, mu_star=args.mustar, dt=args.dt,
                           n_out=args.points)
    header = list(rows[0])
    print(",".join(header))
    for r in rows:
        print(",".join(f"{r[h]:.10g}" for h in header))
    if args.out:
        print(f"wrote {write_rows(rows, Path(args.out) / 'gaussian_oracle.csv')}")


def cmd_grid(args):
    res = grid_experiment(args.target, args.points, steps=args.steps, dt=args.dt, bounds=(args.low, args.high))
    for metric in ("w", "fr"):
        kl = [r["kl"] for r in res["kl"] if r["metric"] == metric]
        print(f"{metric:>2}: KL {kl[0]:.6g} -> {kl[-1]:.6g} after {len(kl) - 1} steps")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(res["kl"], out / "grid_kl.csv")
        res["target"].to_csv(out / "target.csv")
        for metric, rho in res["final"].items():
            rho.to_csv(out / f"final_{metric}.csv")
        print(f"wrote results to {out}")


def cmd_validate(args):
    if args.config:
        cfg = load_config(args.config)
        print(f"config ok: target={cfg.target} methods={','.join(cfg.methods)} n={cfg.n} iters={cfg.max_iter}")
        names = [cfg.target]
        params = cfg.target_params
    else:
        names = [args.target] if args.target else sorted(TARGETS)
        params = {}
    ok = True
    for name in names:
        model = build_target(name, params if name != "blr-synthetic" else {**params, "batch_size": None})
        probes = np.random.default_rng(0).normal(size=(16, model.dim))
        diag = validate_model(model, probes)
        # a Gauss-Newton Hessian is an approximation by design
        approx = bool(model.params.get("gauss_newton", False))
        passed = diag.gradient_error <= args.tol if approx else diag.ok(args.tol)
        note = " (approximate Hessian)" if approx else ""
        print(f"{name:>14}: gradient err {diag.gradient_error:.2e}, hessian err {diag.hessian_error:.2e}{note}, "
              f"{'ok' if passed else 'FAILED'}")
        ok &= passed
    if not ok:
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="infonewton", description="Newton-type particle samplers and grid flows.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
    r.add_argument("--parallel", action="store_true", help="run methods concurrently")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="compare methods on a target with preset settings")
    c.add_argument("--target", required=True, choices=sorted(PRESETS))
    c.add_argument("--methods", help="comma-separated method names")
    c.add_argument("--seed", type=int)
    c.add_argument("--n", type=int)
    c.add_argument("--iters", type=int)
    c.add_argument("--out")
    c.add_argument("--set", action="append", metavar="KEY=VALUE")
    c.add_argument("--parallel", action="store_true")
    c.set_defaults(func=cmd_compare)

    g = sub.add_parser("gaussian-oracle", help="1D Gaussian Newton flow against closed forms")
    g.add_argument("--sigma0", type=float, required=True)
    g.add_argument("--sigmastar", type=float, required=True)
    g.add_argument("--t", type=float, required=True)
    g.add_argument("--mu0", type=float, default=0.0)
    g.add_argument("--mustar", type=float, default=0.0)
    g.add_argument("--dt", type=float, default=1e-3)
    g.add_argument("--points", type=int, default=11)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gaussian_oracle)

    d = sub.add_parser("grid", help="grid Newton density flows for a 1D target")
    d.add_argument("--target", required=True)
    d.add_argument("--points", type=int, required=True)
    d.add_argument("--steps", type=int, default=50)
    d.add_argument("--dt", type=float, default=0.1)
    d.add_argument("--low", type=float, default=-8.0)
    d.add_argument("--high", type=float, default=8.0)
    d.add_argument("--out")
    d.set_defaults(func=cmd_grid)

    v = sub.add_parser("validate", help="check a config and target derivatives")
    v.add_argument("--config")
    v.add_argument("--target")
    v.add_argument("--tol", type=float, default=1e-5)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except InfoNewtonError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0
