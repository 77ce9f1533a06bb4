"""Shared domain types, errors, seeded randomness and model validation."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional, Sequence

import numpy as np

# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------


class InfoNewtonError(Exception):
    """Base class for all package errors."""


class InvalidModelError(InfoNewtonError):
    """A target model produced non-finite or inconsistent values."""


class InvalidConfigError(InfoNewtonError, ValueError):
    """A configuration value is out of range or unknown."""


class InvalidInputError(InfoNewtonError, ValueError):
    """Array inputs have incompatible shapes or invalid entries."""


class CapacityError(InfoNewtonError):
    """A requested dense computation exceeds the configured size cap."""


class StepTooLargeError(InfoNewtonError):
    """A time step violates a stability or invertibility condition.

    Attributes:
        suggested: A step size that satisfies the condition, when known.
    """

    def __init__(self, message: str, suggested: Optional[float] = None):
        super().__init__(message)
        self.suggested = suggested


class InsufficientSupportError(InfoNewtonError):
    """A grid density has too few points above the support threshold."""


class DegenerateBandwidthError(InfoNewtonError):
    """All pairwise distances vanish, so no data-driven bandwidth exists."""


class UnsupportedError(InfoNewtonError):
    """The requested combination of options is not implemented."""


class SolverStateError(InfoNewtonError):
    """A solver was called with blocks assembled in the wrong mode."""


# ---------------------------------------------------------------------------
# Array helpers
# ---------------------------------------------------------------------------


def as_points(x, dim: Optional[int] = None) -> np.ndarray:
    """Coerce ``x`` to a float (M, d) array.

    A 1D array is read as M scalar points when ``dim`` is 1 or unknown and as a
    single point when its length equals ``dim > 1``.
    """
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        if dim is not None and dim > 1:
            if arr.shape[0] != dim:
                raise InvalidInputError(f"expected a point of length {dim}, got {arr.shape[0]}")
            arr = arr.reshape(1, dim)
        else:
            arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise InvalidInputError(f"expected a 2D array of points, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise InvalidInputError(f"expected points of dimension {dim}, got {arr.shape[1]}")
    return arr


def is_spd(mat: np.ndarray, tol: float = 0.0) -> bool:
    """Return True when ``mat`` is symmetric with minimum eigenvalue above ``tol``."""
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if mat.shape[0] != mat.shape[1] or not np.all(np.isfinite(mat)):
        return False
    if not np.allclose(mat, mat.T, rtol=1e-10, atol=1e-12):
        return False
    return bool(np.linalg.eigvalsh(0.5 * (mat + mat.T)).min() > tol)


# ---------------------------------------------------------------------------
# Target model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TargetModel:
    """Unnormalized target density exp(-f) with analytic derivatives.

    All callables are batched: they take an (M, d) array and return arrays of
    shape (M,), (M, d) and (M, d, d) respectively.

    Attributes:
        potential: f evaluated row-wise.
        gradient: Gradient of f evaluated row-wise.
        hessian: Hessian of f evaluated row-wise.
        dim: Dimension d of the state space.
        exact_score: Optional score of the target, grad log of exp(-f).
        name: Human-readable label.
        refresh: Optional map from iteration index to the model used at that
            iteration. Stochastic targets (mini-batched likelihoods) use it to
            draw a fresh batch each step.
        params: Free-form parameters the model was built from.
    """

    potential: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], np.ndarray]
    dim: int
    exact_score: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "custom"
    refresh: Optional[Callable[[int], "TargetModel"]] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.dim) < 1:
            raise InvalidModelError(f"dimension must be positive, got {self.dim}")

    def for_iteration(self, k: int) -> "TargetModel":
        """Model to use at iteration ``k`` (itself unless it is stochastic)."""
        return self if self.refresh is None else self.refresh(k)

    def f(self, x) -> np.ndarray:
        return np.asarray(self.potential(as_points(x, self.dim)), dtype=float)

    def grad(self, x) -> np.ndarray:
        return np.asarray(self.gradient(as_points(x, self.dim)), dtype=float)

    def hess(self, x) -> np.ndarray:
        return np.asarray(self.hessian(as_points(x, self.dim)), dtype=float)


@dataclass(frozen=True)
class ModelDiagnostics:
    """Finite-difference consistency report for a :class:`TargetModel`.

    Attributes:
        gradient_error: Max relative error of the analytic gradient against
            central differences of the potential.
        hessian_error: Max relative error of the analytic Hessian against
            central differences of the analytic gradient.
        symmetry_error: Max absolute asymmetry of the Hessian.
        gradients: Analytic gradients at the probes.
        hessians: Analytic Hessians at the probes.
    """

    gradient_error: float
    hessian_error: float
    symmetry_error: float
    gradients: np.ndarray
    hessians: np.ndarray

    def ok(self, tol: float = 1e-5) -> bool:
        return self.gradient_error <= tol and self.hessian_error <= tol and self.symmetry_error <= 1e-12


def _relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(1.0, float(np.max(np.abs(b))))
    return float(np.max(np.abs(a - b))) / scale


def validate_model(model: TargetModel, probes, step: float = 1e-5) -> ModelDiagnostics:
    """Check analytic derivatives of ``model`` by central finite differences.

    The gradient is compared to differences of the potential and the Hessian to
    differences of the gradient, each with step ``step``. Errors are relative to
    ``max(1, |reference|)`` so that vanishing derivatives do not blow up the
    ratio.

    Args:
        model: Target to check.
        probes: Probe points, (M, d) or a single point.
        step: Finite-difference step.

    Returns:
        A :class:`ModelDiagnostics` record.

    Raises:
        InvalidModelError: If the potential is not finite at some probe.
        InvalidInputError: If no probes are given.
    """
    x = as_points(probes, model.dim)
    if x.shape[0] == 0:
        raise InvalidInputError("at least one probe point is required")
    fx = model.f(x)
    if not np.all(np.isfinite(fx)):
        bad = x[~np.isfinite(fx)][0]
        raise InvalidModelError(f"potential is not finite at probe {bad}")
    g = model.grad(x)
    H = model.hess(x)
    d = model.dim
    eye = np.eye(d)
    g_fd = np.empty_like(g)
    H_fd = np.empty_like(H)
    for i in range(d):
        shift = step * eye[i]
        g_fd[:, i] = (model.f(x + shift) - model.f(x - shift)) / (2 * step)
        H_fd[:, :, i] = (model.grad(x + shift) - model.grad(x - shift)) / (2 * step)
    return ModelDiagnostics(
        gradient_error=_relative_error(g, g_fd),
        hessian_error=_relative_error(H, H_fd),
        symmetry_error=float(np.max(np.abs(H - np.swapaxes(H, 1, 2)))),
        gradients=g,
        hessians=H,
    )


# ---------------------------------------------------------------------------
# Ensembles and directions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParticleEnsemble:
    """N particles in R^d together with the iteration counter and seed.

    Attributes:
        positions: (N, d) array of particle positions.
        iteration: Number of updates applied so far.
        seed: Root seed of the random streams used by stochastic updates.
    """

    positions: np.ndarray
    iteration: int = 0
    seed: int = 0

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        if pos.ndim == 1:
            pos = pos.reshape(-1, 1)
        if pos.ndim != 2 or pos.shape[0] < 1:
            raise InvalidInputError(f"positions must be a nonempty (N, d) array, got shape {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise InvalidInputError("particle positions must be finite")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        if self.iteration < 0:
            raise InvalidInputError("iteration must be nonnegative")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def advance(self, positions: np.ndarray) -> "ParticleEnsemble":
        """Return the ensemble at the next iteration with new positions."""
        return replace(self, positions=positions, iteration=self.iteration + 1)

    def rng(self, stream: int = 0) -> np.random.Generator:
        """Generator for the current iteration, see :func:`keyed_rng`."""
        return keyed_rng(self.seed, self.iteration, stream)


@dataclass(frozen=True)
class DirectionField:
    """Newton direction evaluated at the particles.

    Attributes:
        vectors: (N, d) array of direction vectors.
        payload: Optional solver-specific coefficients that allow evaluation
            away from the particles.
        flagged: True when the solve needed a fallback (pseudo-inverse).
    """

    vectors: np.ndarray
    payload: Any = None
    flagged: bool = False

    def __post_init__(self):
        vec = np.asarray(self.vectors, dtype=float)
        if vec.ndim == 1:
            vec = vec.reshape(-1, 1)
        if not np.all(np.isfinite(vec)):
            raise InvalidInputError("direction field has non-finite entries")
        object.__setattr__(self, "vectors", vec)


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------


def keyed_rng(seed: int, iteration: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, iteration, stream)``.

    Every key gives an independent Philox stream, so the draws for one
    iteration never depend on how many numbers earlier iterations consumed.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(iteration), int(stream)])
    return np.random.Generator(np.random.Philox(ss))


STREAM_INIT = 0
STREAM_NOISE = 1
STREAM_BATCH = 2
STREAM_ANCHORS = 3


def init_ensemble(n: int, mean, cov, seed: int = 0) -> ParticleEnsemble:
    """Draw ``n`` particles from a Gaussian N(mean, cov).

    Args:
        n: Number of particles.
        mean: Mean vector, or a scalar in 1D.
        cov: Covariance matrix, or a scalar variance in 1D. A zero covariance
            gives a point mass at ``mean``.
        seed: Root seed.

    Returns:
        Ensemble at iteration 0.

    Raises:
        InvalidConfigError: If ``n < 1`` or the covariance is not symmetric
            positive semidefinite.
    """
    if int(n) < 1:
        raise InvalidConfigError(f"need at least one particle, got {n}")
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    d = mean.shape[0]
    cov = np.asarray(cov, dtype=float)
    cov = cov * np.eye(d) if cov.ndim == 0 else np.atleast_2d(cov)
    if cov.shape != (d, d) or not np.all(np.isfinite(cov)):
        raise InvalidConfigError(f"covariance must be ({d}, {d}) and finite")
    if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12):
        raise InvalidConfigError("covariance must be symmetric")
    evals, evecs = np.linalg.eigh(0.5 * (cov + cov.T))
    if evals.min() < -1e-12 * max(1.0, abs(evals.max())):
        raise InvalidConfigError("covariance must be positive semidefinite")
    root = evecs * np.sqrt(np.clip(evals, 0.0, None))
    z = keyed_rng(seed, 0, STREAM_INIT).standard_normal((int(n), d))
    return ParticleEnsemble(mean + z @ root.T, iteration=0, seed=int(seed))
