"""Experiment configuration, per-target presets and result serialization."""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .. import grid1d
from ..core import InfoNewtonError, InvalidConfigError, TargetModel, init_ensemble
from ..gaussian import GaussianState, closed_form_1d, simulate_gaussian_newton
from ..samplers import METHODS, SamplerConfig, Trajectory, run
from .blr import build_blr_posterior, predictive_metrics, synthetic_dataset
from .metrics import EnergyDistance, grid_reference_samples, langevin_reference, moment_errors
from .targets import TARGETS, build_target

log = logging.getLogger(__name__)

DEFAULT_SNAPSHOTS = (2, 5, 10, 20)

# Step sizes and solver settings per target. BLR steps are the published
# initial steps times a common factor of 50 (see README).
PRESETS: Dict[str, dict] = {
    "double-well": {
        "n": 100, "max_iter": 20, "init_mean": [0.0], "init_cov": 0.01,
        "reference": "grid", "reference_bounds": [-4.0, 4.0],
        "methods": {
            "wgf": {"step_size": 0.01},
            "svgd": {"step_size": 0.1},
            "halld": {"step_size": 0.01},
            "wnewton-a": {"step_size": 1.0},
            "wnewton-k": {"step_size": 1.0},
        },
    },
    "bimodal2d": {
        "n": 100, "max_iter": 20, "init_mean": [0.0, 10.0], "init_cov": 1.0,
        "reference": "grid", "reference_bounds": [-7.0, 7.0, -7.0, 7.0],
        "methods": {
            "wgf": {"step_size": 0.1},
            "svgd": {"step_size": 1.0},
            "halld": {"step_size": 0.2},
            "wnewton-a": {"step_size": 0.2, "gamma": 0.5},
            "wnewton-k": {"step_size": 1.0},
        },
    },
    "double-banana": {
        "n": 100, "max_iter": 20, "init_mean": [0.0, 0.0], "init_cov": 1.0,
        "reference": "grid", "reference_bounds": [-3.0, 3.0, -3.0, 5.0],
        "target_params": {"gauss_newton": True},
        "methods": {
            "wgf": {"step_size": 0.002},
            "svgd": {"step_size": 0.1},
            "halld": {"step_size": 1.0},
            "wnewton-a": {"step_size": 0.2, "gamma": 0.001},
            "wnewton-k": {"step_size": 1.0},
        },
    },
    "gauss1d": {
        "n": 200, "max_iter": 20, "init_mean": [2.0], "init_cov": 0.25,
        "reference": "grid", "reference_bounds": [-6.0, 6.0],
        "methods": {
            "old": {"step_size": 0.01},
            "wgf": {"step_size": 0.1},
            "svgd": {"step_size": 0.1},
            "halld": {"step_size": 0.1},
            "wnewton-a": {"step_size": 1.0},
            "wnewton-k": {"step_size": 1.0},
        },
    },
    "blr-synthetic": {
        "n": 50, "max_iter": 500, "init_mean": [0.0], "init_cov": 1.0,
        "reference": "langevin", "metric_every": 5,
        "target_params": {"batch_size": 100},
        "methods": {
            "old": {"step_size": 5e-4, "decay": 0.9, "decay_every": 100},
            "svgd": {"step_size": 0.05},
            "wgf": {"step_size": 5e-4, "decay": 0.9, "decay_every": 100},
            "wnewton-a": {"step_size": 0.1, "decay": 0.82, "decay_every": 100, "gamma": 0.005, "eps": 1.0},
            "wnewton-k": {"step_size": 0.1, "decay": 0.9, "decay_every": 100, "gamma": 0.005, "eps": 1.0},
        },
    },
}

_TOP_KEYS = ("target", "methods", "n", "seed", "out", "max_iter", "metric_every", "snapshots", "init_mean",
             "init_cov", "reference", "reference_n", "reference_bounds")
_SAMPLER_KEYS = {f.name for f in fields(SamplerConfig)} - {"method"}


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one comparison run.

    Attributes:
        target: Registered target name.
        target_params: Keyword arguments for the target factory.
        methods: Sampler settings keyed by method name, in run order.
        n: Number of particles.
        seed: Root seed.
        out: Output directory.
        max_iter: Iterations per method.
        metric_every: Metric cadence.
        snapshots: Iterations at which positions are saved.
        init_mean: Mean of the Gaussian initial ensemble.
        init_cov: Covariance (scalar or matrix) of the initial ensemble.
        reference: ``"grid"``, ``"langevin"`` or ``"none"``.
        reference_n: Size of the reference sample.
        reference_bounds: Flattened (low, high) pairs for grid references.
    """

    target: str
    methods: Dict[str, SamplerConfig]
    target_params: dict = field(default_factory=dict)
    n: int = 100
    seed: int = 0
    out: str = "results"
    max_iter: int = 20
    metric_every: int = 1
    snapshots: Tuple[int, ...] = DEFAULT_SNAPSHOTS
    init_mean: Sequence[float] = (0.0,)
    init_cov: object = 1.0
    reference: str = "none"
    reference_n: int = 10_000
    reference_bounds: Optional[Sequence[float]] = None

    def __post_init__(self):
        if self.target not in TARGETS:
            raise InvalidConfigError(f"unknown target {self.target!r}; available: {sorted(TARGETS)}")
        if not self.methods:
            raise InvalidConfigError("at least one method is required")
        if self.n < 2:
            raise InvalidConfigError("need at least two particles")
        if self.reference not in ("grid", "langevin", "none"):
            raise InvalidConfigError(f"unknown reference {self.reference!r}")
        if self.metric_every < 1:
            raise InvalidConfigError("metric_every must be positive")


def _parse_value(text: str):
    text = text.strip()
    if "," in text:
        return [_parse_value(t) for t in text.split(",") if t.strip()]
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    return text


def parse_config_text(text: str) -> Dict[str, object]:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Comma-separated values become lists; numbers are converted.

    Raises:
        InvalidConfigError: On a line without ``=``.
    """
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def build_config(entries: Dict[str, object]) -> ExperimentConfig:
    """Merge flat entries over the target preset and validate.

    Recognized keys are the :class:`ExperimentConfig` fields,
    ``target.<param>`` for target parameters and ``<method>.<field>`` for
    sampler settings.
    """
    entries = dict(entries)
    if "target" not in entries:
        raise InvalidConfigError("config must name a target")
    target = str(entries.pop("target"))
    preset = PRESETS.get(target, {})
    top = {k: v for k, v in preset.items() if k not in ("methods", "target_params")}
    target_params = dict(preset.get("target_params", {}))
    method_opts = {m: dict(o) for m, o in preset.get("methods", {}).items()}
    chosen = entries.pop("methods", None)
    for key, value in entries.items():
        if key in _TOP_KEYS:
            top[key] = value
        elif key.startswith("target."):
            target_params[key.split(".", 1)[1]] = value
        elif "." in key:
            method, opt = key.split(".", 1)
            if method not in METHODS:
                raise InvalidConfigError(f"unknown method {method!r} in key {key!r}")
            if opt not in _SAMPLER_KEYS:
                raise InvalidConfigError(f"unknown sampler setting {opt!r}; available: {sorted(_SAMPLER_KEYS)}")
            method_opts.setdefault(method, {})[opt] = value
        else:
            raise InvalidConfigError(f"unknown config key {key!r}")
    names = [str(m) for m in _as_list(chosen)] if chosen is not None else list(method_opts)
    max_iter = int(top.get("max_iter", 20))
    methods = {}
    for m in names:
        opts = method_opts.get(m, {})
        if "step_size" not in opts:
            raise InvalidConfigError(f"no step size for method {m!r}; set {m}.step_size")
        opts = {"max_iter": max_iter, **opts}
        methods[m] = SamplerConfig(method=m, **opts)
    snaps = top.pop("snapshots", DEFAULT_SNAPSHOTS)
    bounds = top.pop("reference_bounds", None)
    return ExperimentConfig(
        target=target,
        methods=methods,
        target_params=target_params,
        n=int(top.pop("n", 100)),
        seed=int(top.pop("seed", 0)),
        out=str(top.pop("out", "results")),
        max_iter=max_iter,
        metric_every=int(top.pop("metric_every", 1)),
        snapshots=tuple(int(s) for s in _as_list(snaps)) if snaps is not None else (),
        init_mean=[float(v) for v in _as_list(top.pop("init_mean", [0.0]))],
        init_cov=top.pop("init_cov", 1.0),
        reference=str(top.pop("reference", "none")),
        reference_n=int(top.pop("reference_n", 10_000)),
        reference_bounds=None if bounds is None else [float(b) for b in _as_list(bounds)],
    )


def load_config(path, overrides: Optional[Dict[str, object]] = None) -> ExperimentConfig:
    """Read a config file and apply ``overrides`` on top."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InvalidConfigError(f"cannot read config {path}: {exc}") from None
    entries = parse_config_text(text)
    entries.update(overrides or {})
    return build_config(entries)


def preset_config(target: str, methods: Optional[Sequence[str]] = None, **overrides) -> ExperimentConfig:
    """Config from the target preset with optional method subset and overrides."""
    entries = {"target": target, **overrides}
    if methods is not None:
        entries["methods"] = list(methods)
    return build_config(entries)


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    trajectories: Dict[str, Trajectory]
    files: List[Path]


def _init_cov(cfg: ExperimentConfig, d: int) -> np.ndarray:
    c = np.asarray(cfg.init_cov, dtype=float)
    if c.ndim == 0:
        return float(c) * np.eye(d)
    return c.reshape(d, d)


def _setup(cfg: ExperimentConfig):
    """Target model, metric callback and reference summary for a config."""
    if cfg.target == "blr-synthetic":
        p = cfg.target_params
        data = synthetic_dataset(**{k: p[k] for k in ("dim", "n_train", "n_test") if k in p}, seed=cfg.seed)
        model = build_blr_posterior(data, prior_scale=float(p.get("prior_scale", 1.0)),
                                    batch_size=p.get("batch_size", 100), seed=cfg.seed)
        ref_mean = None
        if cfg.reference == "langevin":
            ref_mean = blr_reference_mean(model, cfg.seed)

        def metrics(ens):
            out = predictive_metrics(ens.positions, data.x_test, data.y_test)
            if ref_mean is not None:
                out["mean_error"] = float(np.linalg.norm(ens.positions.mean(axis=0) - ref_mean))
            return out

        return model, metrics, {"reference_mean": None if ref_mean is None else ref_mean.tolist()}
    model = build_target(cfg.target, cfg.target_params)
    if cfg.reference == "none":
        return model, None, {}
    if cfg.reference == "grid":
        if cfg.reference_bounds is None:
            raise InvalidConfigError("grid reference needs reference_bounds")
        ref = grid_reference_samples(model, cfg.reference_n, cfg.seed, np.reshape(cfg.reference_bounds, (-1, 2)))
    else:
        chains = init_ensemble(100, np.zeros(model.dim), np.eye(model.dim), cfg.seed).positions
        steps = max(cfg.reference_n // 100, 1)
        ref = langevin_reference(model.grad, chains, 1000 + steps, 1e-3, cfg.seed, burn_in=1000)
    ed = EnergyDistance(ref)

    def metrics(ens):
        return {"energy_distance": ed(ens.positions), **moment_errors(ens.positions, ref)}

    return model, metrics, {"reference_size": int(ref.shape[0])}


def blr_reference_mean(model: TargetModel, seed: int, chains: int = 20, steps: int = 5000,
                       step: float = 1e-3, burn_in: int = 1000) -> np.ndarray:
    """Posterior mean from full-batch unadjusted Langevin chains (chains * steps total steps)."""
    x0 = init_ensemble(chains, np.zeros(model.dim), np.eye(model.dim), seed).positions
    samples = langevin_reference(model.grad, x0, steps, step, seed, burn_in=burn_in)
    return samples.mean(axis=0)


def _run_method(cfg: ExperimentConfig, name: str, model, metrics, ensemble) -> Trajectory:
    scfg = replace(cfg.methods[name], max_iter=cfg.max_iter)
    return run(scfg, model, ensemble, metrics=metrics, snapshot_at=cfg.snapshots, metric_every=cfg.metric_every)


def run_experiment(cfg: ExperimentConfig, parallel: bool = False, write: bool = True) -> ExperimentResult:
    """Run every configured method from the same initial ensemble and write results.

    Each method draws from random streams keyed by (seed, iteration, stream),
    so results do not depend on method order or on ``parallel``. A solver
    failure truncates that method's trajectory and is recorded in
    ``summary.json``; the other methods still run.

    Files written under ``cfg.out``: ``metrics.csv`` (long format),
    ``trajectory_<method>.csv`` (one row per measured iteration),
    ``snapshots/iterNNN.csv`` and ``summary.json``.
    """
    model, metrics, ref_info = _setup(cfg)
    d = model.dim
    mean = np.asarray(cfg.init_mean, dtype=float)
    if mean.shape[0] == 1 and d > 1:
        mean = np.full(d, mean[0])
    ensemble = init_ensemble(cfg.n, mean, _init_cov(cfg, d), cfg.seed)
    names = list(cfg.methods)
    t0 = time.perf_counter()
    if parallel and len(names) > 1:
        with ThreadPoolExecutor(max_workers=len(names)) as pool:
            futures = {m: pool.submit(_run_method, cfg, m, model, metrics, ensemble) for m in names}
            trajs = {m: futures[m].result() for m in names}
    else:
        trajs = {m: _run_method(cfg, m, model, metrics, ensemble) for m in names}
    elapsed = time.perf_counter() - t0
    files = write_results(cfg, trajs, ref_info, elapsed) if write else []
    return ExperimentResult(cfg, trajs, files)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_results(cfg: ExperimentConfig, trajs: Dict[str, Trajectory], extra: Optional[dict] = None,
                  elapsed: Optional[float] = None) -> List[Path]:
    """Serialize trajectories; CSV content depends only on the config and seed."""
    out = Path(cfg.out)
    try:
        (out / "snapshots").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InvalidConfigError(f"cannot create output directory {out}: {exc}") from None
    files = []
    path = out / "metrics.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "method", "metric", "value"])
        for m, tr in trajs.items():
            for r in tr.records:
                w.writerow([r["iteration"], m, r["metric"], _fmt(r["value"])])
    files.append(path)
    for m, tr in trajs.items():
        names = list(dict.fromkeys(r["metric"] for r in tr.records))
        rows: Dict[int, dict] = {}
        for r in tr.records:
            rows.setdefault(r["iteration"], {})[r["metric"]] = r["value"]
        path = out / f"trajectory_{m}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration"] + names)
            for k in sorted(rows):
                w.writerow([k] + [_fmt(rows[k][n]) if n in rows[k] else "" for n in names])
        files.append(path)
    iters = sorted({k for tr in trajs.values() for k in tr.snapshots})
    for k in iters:
        path = out / "snapshots" / f"iter{k:03d}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            d = next(tr.snapshots[k].shape[1] for tr in trajs.values() if k in tr.snapshots)
            w.writerow(["method", "particle"] + [f"x{i}" for i in range(d)])
            for m, tr in trajs.items():
                if k not in tr.snapshots:
                    continue
                for i, row in enumerate(tr.snapshots[k]):
                    w.writerow([m, i] + [_fmt(v) for v in row])
        files.append(path)
    summary = {
        "target": cfg.target,
        "target_params": cfg.target_params,
        "n": cfg.n,
        "seed": cfg.seed,
        "max_iter": cfg.max_iter,
        "methods": {},
        "elapsed_seconds": elapsed,
        **(extra or {}),
    }
    for m, tr in trajs.items():
        last = {}
        for r in tr.records:
            last[r["metric"]] = r["value"]
        summary["methods"][m] = {
            "settings": {k: getattr(cfg.methods[m], k) for k in sorted(_SAMPLER_KEYS)},
            "final_metrics": last,
            "iterations_completed": len(tr.step_seconds),
            "error": tr.error,
            "flagged_iterations": tr.flags,
            "mean_step_seconds": float(np.mean(tr.step_seconds)) if tr.step_seconds else None,
        }
    path = out / "summary.json"
    path.write_text(json.dumps(summary, indent=2, default=str) + "\n")
    files.append(path)
    return files


# ---------------------------------------------------------------------------
# Gaussian oracle and grid modes
# ---------------------------------------------------------------------------


def gaussian_oracle(sigma0: float, sigma_star: float, t_end: float, mu0: float = 0.0, mu_star: float = 0.0,
                    dt: float = 1e-3, n_out: int = 11) -> List[dict]:
    """Simulated Gaussian Newton flow next to the closed-form trajectories.

    Returns rows with the time, simulated mean and variance, and the
    closed-form mean and variance of ``nld``, ``old_lld`` and ``hamcmc``.
    """
    if sigma0 <= 0 or sigma_star <= 0 or t_end < 0:
        raise InvalidConfigError("variances must be positive and t nonnegative")
    times = [round(float(t), 12) for t in np.linspace(0.0, t_end, n_out)]
    sim = simulate_gaussian_newton(GaussianState([mu0], [[sigma0]]), GaussianState([mu_star], [[sigma_star]]),
                                   t_end, dt, record_times=times)
    rows = []
    for t in times:
        st = sim[t]
        row = {"t": t, "sim_mean": float(st.mean[0]), "sim_var": float(st.cov[0, 0])}
        for method in ("nld", "old_lld", "hamcmc"):
            mu, var = closed_form_1d(method, mu0, sigma0, mu_star, sigma_star, t)
            row[f"{method}_mean"], row[f"{method}_var"] = mu, var
        rows.append(row)
    return rows


def write_rows(rows: List[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(rows[0]))
        for r in rows:
            w.writerow([_fmt(v) if isinstance(v, float) else v for v in r.values()])
    return path


def grid_experiment(target: str, points: int, steps: int = 50, dt: float = 0.1, bounds=(-8.0, 8.0),
                    init_mean: float = 0.5, init_var: float = 2.0, params: Optional[dict] = None) -> dict:
    """Wasserstein- and Fisher-Rao-Newton density flows for a 1D target on a grid.

    Both flows start from a Gaussian modulated by 1 + 0.2 cos(2x). The
    Wasserstein step is capped at 0.9 of the transport stability limit.

    Returns:
        Dict with the grid, the target density, final densities per metric
        and ``kl`` rows (step, metric, KL to the target).
    """
    model = build_target(target, params)
    if model.dim != 1:
        raise InvalidConfigError(f"grid flows need a 1D target; {target!r} has dimension {model.dim}")
    x = np.linspace(bounds[0], bounds[1], int(points))
    target_density = grid1d.GridDensity.from_potential(x, lambda z: model.f(z[:, None]))
    start = grid1d.GridDensity.normalized(
        x, np.exp(-(x - init_mean) ** 2 / (2 * init_var)) * (1 + 0.2 * np.cos(2 * x)))
    rows, finals = [], {}
    for metric in ("w", "fr"):
        rho = start
        rows.append({"step": 0, "metric": metric, "kl": grid1d.kl_divergence(rho, target_density)})
        for k in range(1, steps + 1):
            try:
                if metric == "w":
                    rho, _ = grid1d.w_newton_step(rho, model, dt)
                else:
                    rho = grid1d.fr_newton_step(rho, model, dt)
            except InfoNewtonError as exc:
                log.warning("%s grid flow stopped at step %d: %s", metric, k, exc)
                break
            rows.append({"step": k, "metric": metric, "kl": grid1d.kl_divergence(rho, target_density)})
        finals[metric] = rho
    return {"x": x, "target": target_density, "final": finals, "kl": rows}
