"""Particle samplers: Langevin baselines, SVGD, Hessian-preconditioned
Lagrangian dynamics and the Wasserstein Newton method with hybrid updates."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional

import numpy as np

from .core import (
    STREAM_NOISE,
    DirectionField,
    InfoNewtonError,
    InvalidConfigError,
    InvalidInputError,
    ParticleEnsemble,
    TargetModel,
)
from .newton_affine import affine_direction
from .newton_kernel import DEFAULT_LAMBDA, kernel_direction
from .score import KernelSpec, ScoreEstimate, estimate_score, select_bandwidth

log = logging.getLogger(__name__)

METHODS = ("old", "wgf", "svgd", "halld", "wnewton-a", "wnewton-k")
ADAGRAD_EPS = 1e-6


@dataclass(frozen=True)
class SamplerConfig:
    """Settings for one sampler run.

    Attributes:
        method: One of ``old``, ``wgf``, ``svgd``, ``halld``, ``wnewton-a``,
            ``wnewton-k``.
        step_size: Initial step size alpha_0.
        decay: Multiplicative step decay factor.
        decay_every: Iterations between decays; 0 disables the schedule.
        gamma: Weight of the gradient direction in hybrid Newton updates.
        eps: Shift added to target Hessians in Newton solves.
        lam: Kernel solver regularization.
        bandwidth: Bandwidth selector name or a fixed bandwidth.
        max_iter: Number of iterations K.
        hybrid: ``"stochastic"`` adds Langevin noise, ``"deterministic"`` uses
            the score instead.
        score: Score estimator, ``"kde"`` or ``"gaussian"`` (moment matched).
        kernel_mode: Kernel solver variant.
        n_anchors: Anchor count for the sparse kernel solver.
        seed: Overrides the ensemble seed when set.
    """

    method: str
    step_size: float
    decay: float = 1.0
    decay_every: int = 0
    gamma: float = 0.0
    eps: float = 0.0
    lam: float = DEFAULT_LAMBDA
    bandwidth: object = "median"
    max_iter: int = 100
    hybrid: str = "stochastic"
    score: str = "kde"
    kernel_mode: str = "reduced"
    n_anchors: Optional[int] = None
    seed: Optional[int] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidConfigError(f"unknown method {self.method!r}; available: {METHODS}")
        if not self.step_size > 0:
            raise InvalidConfigError(f"step size must be positive, got {self.step_size}")
        if self.max_iter < 0:
            raise InvalidConfigError("max_iter must be nonnegative")
        if self.gamma < 0 or self.eps < 0 or self.lam < 0:
            raise InvalidConfigError("gamma, eps and lam must be nonnegative")
        if self.hybrid not in ("stochastic", "deterministic"):
            raise InvalidConfigError(f"unknown hybrid variant {self.hybrid!r}")
        if self.decay_every < 0 or not self.decay > 0:
            raise InvalidConfigError("invalid step schedule")

    def step_at(self, k: int) -> float:
        """Step size at iteration k: alpha_0 * decay^(k // decay_every)."""
        if self.decay_every <= 0:
            return self.step_size
        return self.step_size * self.decay ** (k // self.decay_every)


def _noise(ensemble: ParticleEnsemble, noise) -> np.ndarray:
    if noise is not None:
        return np.broadcast_to(np.asarray(noise, dtype=float), ensemble.positions.shape)
    return ensemble.rng(STREAM_NOISE).standard_normal(ensemble.positions.shape)


def step_old(ensemble: ParticleEnsemble, model: TargetModel, alpha: float, noise=None) -> ParticleEnsemble:
    """Euler-Maruyama step x - alpha grad f(x) + sqrt(2 alpha) z.

    Args:
        ensemble: Current particles.
        model: Target.
        alpha: Step size.
        noise: Optional fixed z (test hook); drawn from the keyed stream
            otherwise.
    """
    x = ensemble.positions
    z = _noise(ensemble, noise)
    return ensemble.advance(x - alpha * model.grad(x) + np.sqrt(2 * alpha) * z)


def step_wgf(ensemble: ParticleEnsemble, model: TargetModel, score: ScoreEstimate, alpha: float) -> ParticleEnsemble:
    """Deterministic gradient-flow step x + alpha (-grad f(x) - xi(x))."""
    x = ensemble.positions
    return ensemble.advance(x - alpha * (model.grad(x) + score.values))


@dataclass
class AdagradState:
    """Running sum of squared SVGD updates, one entry per coordinate."""

    accum: np.ndarray

    @classmethod
    def zeros(cls, shape) -> "AdagradState":
        return cls(np.zeros(shape))


def svgd_direction(ensemble: ParticleEnsemble, model: TargetModel, kernel: KernelSpec) -> np.ndarray:
    """phi(x_i) = mean_j [k(x_j, x_i) (-grad f(x_j)) + grad_{x_j} k(x_j, x_i)]."""
    x = ensemble.positions
    K = kernel(x, x)  # K[j, i] = k(x_j, x_i)
    drift = K.T @ (-model.grad(x))
    # grad_{x_j} k(x_j, x_i) = -(x_j - x_i) / h * k
    repulse = (K.sum(axis=0)[:, None] * x - K.T @ x) / kernel.bandwidth
    return (drift + repulse) / x.shape[0]


def step_svgd(ensemble: ParticleEnsemble, model: TargetModel, kernel: KernelSpec, alpha: float,
              adagrad_state: Optional[AdagradState] = None):
    """SVGD step with per-coordinate Adagrad scaling.

    The accumulator is updated with phi^2 before the step
    x + alpha phi / (1e-6 + sqrt(accum)).

    Returns:
        Tuple (new ensemble, new Adagrad state).
    """
    phi = svgd_direction(ensemble, model, kernel)
    state = adagrad_state if adagrad_state is not None else AdagradState.zeros(phi.shape)
    if state.accum.shape != phi.shape:
        raise InvalidInputError("Adagrad state shape does not match the ensemble")
    accum = state.accum + phi**2
    new = ensemble.advance(ensemble.positions + alpha * phi / (ADAGRAD_EPS + np.sqrt(accum)))
    return new, AdagradState(accum)


def step_halld(ensemble: ParticleEnsemble, model: TargetModel, score: ScoreEstimate, alpha: float,
               rtol: float = 1e-12):
    """Hessian-preconditioned Lagrangian step x + alpha Hess f(x)^{-1} (-grad f(x) - xi(x)).

    A particle's Hessian counts as singular when its smallest singular value
    is at most ``rtol`` times the largest singular value over the ensemble.
    Such particles are left in place and flagged.

    Returns:
        Tuple (new ensemble, boolean mask of flagged particles).
    """
    x = ensemble.positions
    H = model.hess(x)
    rhs = -(model.grad(x) + score.values)
    sv = np.linalg.svd(H, compute_uv=False)
    scale = np.max(sv) if np.all(np.isfinite(sv)) else np.inf
    flagged = ~np.all(np.isfinite(sv), axis=1) | (sv[:, -1] <= rtol * scale)
    upd = np.zeros_like(x)
    ok = ~flagged
    if np.any(ok):
        upd[ok] = np.linalg.solve(H[ok], rhs[ok][..., None])[..., 0]
    if np.any(flagged):
        log.warning("singular Hessian at %d particle(s); update skipped", int(flagged.sum()))
    return ensemble.advance(x + alpha * upd), flagged


def newton_direction(ensemble: ParticleEnsemble, model: TargetModel, score: Optional[ScoreEstimate],
                     solver: str, cfg: SamplerConfig, bandwidth: Optional[float] = None) -> DirectionField:
    """Newton direction from the affine or kernel solver."""
    if solver == "affine":
        if score is None:
            raise InvalidInputError("the affine solver needs a score estimate")
        return affine_direction(ensemble, model, score, cfg.eps)
    if solver == "kernel":
        h = bandwidth if bandwidth is not None else select_bandwidth(ensemble, cfg.bandwidth)
        return kernel_direction(ensemble, model, KernelSpec(h), cfg.lam, cfg.eps, cfg.kernel_mode, cfg.n_anchors)
    raise InvalidConfigError(f"unknown solver {solver!r}")


def step_wnewton(ensemble: ParticleEnsemble, model: TargetModel, score: Optional[ScoreEstimate], solver: str,
                 cfg: SamplerConfig, alpha: Optional[float] = None, direction: Optional[DirectionField] = None,
                 noise=None) -> ParticleEnsemble:
    """Newton step with optional hybrid gradient term.

    stochastic: x + alpha grad Phi(x) - gamma alpha grad f(x) + sqrt(2 gamma alpha) z
    deterministic: x + alpha grad Phi(x) - gamma alpha (grad f(x) + xi(x))

    Args:
        ensemble: Current particles.
        model: Target.
        score: Score estimate; needed by the affine solver and the
            deterministic hybrid.
        solver: ``"affine"`` or ``"kernel"``.
        cfg: Sampler settings (gamma, eps, lam, hybrid variant).
        alpha: Step size, defaults to ``cfg.step_size``.
        direction: Precomputed direction; solved here when omitted.
        noise: Optional fixed noise for the stochastic hybrid.
    """
    alpha = cfg.step_size if alpha is None else alpha
    if direction is None:
        direction = newton_direction(ensemble, model, score, solver, cfg)
    x = ensemble.positions
    new = x + alpha * direction.vectors
    g = cfg.gamma
    if g > 0:
        if cfg.hybrid == "stochastic":
            new = new - g * alpha * model.grad(x) + np.sqrt(2 * g * alpha) * _noise(ensemble, noise)
        else:
            if score is None:
                raise InvalidInputError("the deterministic hybrid needs a score estimate")
            new = new - g * alpha * (model.grad(x) + score.values)
    return ensemble.advance(new)


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """Record of a sampler run.

    Attributes:
        snapshots: Positions keyed by iteration.
        records: Metric rows ``{"iteration", "metric", "value"}``.
        step_seconds: Wall-clock time per iteration.
        error: Message of the failure that truncated the run, if any.
        flags: Iterations at which a solver fallback or skipped update occurred.
        final: Last ensemble reached.
    """

    snapshots: Dict[int, np.ndarray] = field(default_factory=dict)
    records: List[dict] = field(default_factory=list)
    step_seconds: List[float] = field(default_factory=list)
    error: Optional[str] = None
    flags: List[int] = field(default_factory=list)
    final: Optional[ParticleEnsemble] = None

    def metric(self, name: str):
        """(iterations, values) arrays for one metric."""
        rows = [(r["iteration"], r["value"]) for r in self.records if r["metric"] == name]
        if not rows:
            return np.array([], dtype=int), np.array([])
        it, val = zip(*rows)
        return np.array(it), np.array(val)


MetricFn = Callable[[ParticleEnsemble], Dict[str, float]]


def run(cfg: SamplerConfig, model: TargetModel, ensemble: ParticleEnsemble, metrics: Optional[MetricFn] = None,
        snapshot_at=None, metric_every: int = 1) -> Trajectory:
    """Iterate a sampler for ``cfg.max_iter`` steps.

    Each iteration selects a bandwidth, estimates the score when the method
    uses one, solves for the Newton direction (Newton methods), steps all
    particles and applies the step-size schedule. Solver failures end the run
    early with the error recorded.

    Args:
        cfg: Sampler settings.
        model: Target; stochastic models are refreshed per iteration.
        ensemble: Initial particles.
        metrics: Optional callback returning named metric values.
        snapshot_at: Iterations to snapshot; all iterations when None.
        metric_every: Metric cadence in iterations (the last iteration is
            always measured).

    Returns:
        The trajectory.
    """
    if model.dim != ensemble.dim:
        raise InvalidInputError(f"model dimension {model.dim} does not match ensemble dimension {ensemble.dim}")
    if cfg.seed is not None:
        ensemble = replace(ensemble, seed=int(cfg.seed))
    traj = Trajectory()
    snaps = None if snapshot_at is None else set(int(s) for s in snapshot_at)

    def record(ens: ParticleEnsemble):
        k = ens.iteration
        if snaps is None or k in snaps:
            traj.snapshots[k] = ens.positions.copy()
        if metrics is not None and (k % max(metric_every, 1) == 0 or k == cfg.max_iter):
            for name, value in metrics(ens).items():
                traj.records.append({"iteration": k, "metric": name, "value": float(value)})

    record(ensemble)
    adagrad = None
    start = ensemble.iteration
    for k in range(start, start + cfg.max_iter):
        t0 = time.perf_counter()
        m = model.for_iteration(k)
        alpha = cfg.step_at(k - start)
        try:
            ensemble, adagrad, flagged = _one_step(cfg, m, ensemble, alpha, adagrad)
        except (InfoNewtonError, np.linalg.LinAlgError, FloatingPointError) as exc:
            traj.error = f"iteration {k}: {exc}"
            log.warning("%s stopped at iteration %d: %s", cfg.method, k, exc)
            break
        if not np.all(np.isfinite(ensemble.positions)):
            traj.error = f"iteration {k}: non-finite positions"
            break
        if flagged:
            traj.flags.append(k)
        traj.step_seconds.append(time.perf_counter() - t0)
        record(ensemble)
    traj.final = ensemble
    return traj


def _one_step(cfg: SamplerConfig, model: TargetModel, ensemble: ParticleEnsemble, alpha: float, adagrad):
    method = cfg.method
    if method == "old":
        return step_old(ensemble, model, alpha), adagrad, False
    if method == "svgd":
        h = select_bandwidth(ensemble, cfg.bandwidth)
        new, adagrad = step_svgd(ensemble, model, KernelSpec(h), alpha, adagrad)
        return new, adagrad, False
    needs_score = method in ("wgf", "halld", "wnewton-a") or (
        method == "wnewton-k" and cfg.gamma > 0 and cfg.hybrid == "deterministic"
    )
    h = select_bandwidth(ensemble, cfg.bandwidth)
    score = estimate_score(ensemble, cfg.score, h) if needs_score else None
    if method == "wgf":
        return step_wgf(ensemble, model, score, alpha), adagrad, False
    if method == "halld":
        new, flagged = step_halld(ensemble, model, score, alpha)
        return new, adagrad, bool(np.any(flagged))
    solver = "affine" if method == "wnewton-a" else "kernel"
    direction = newton_direction(ensemble, model, score, solver, cfg, bandwidth=h)
    new = step_wnewton(ensemble, model, score, solver, cfg, alpha=alpha, direction=direction)
    return new, adagrad, direction.flagged
