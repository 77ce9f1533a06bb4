"""Newton flow of the KL divergence restricted to Gaussian families, plus
closed-form 1D trajectories of Langevin-type dynamics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .core import CapacityError, InvalidConfigError, InvalidInputError, StepTooLargeError, is_spd

MAX_DIM = 64


@dataclass(frozen=True)
class GaussianState:
    """Mean and covariance of a Gaussian.

    Attributes:
        mean: (d,) mean vector.
        cov: (d, d) symmetric positive definite covariance.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise InvalidInputError(f"covariance shape {cov.shape} does not match mean length {mean.shape[0]}")
        if not is_spd(cov):
            raise InvalidInputError("covariance must be symmetric positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class NewtonDirectionMatrix:
    """Symmetric matrix S of the quadratic Newton potential x^T S x.

    Attributes:
        S: (d, d) symmetric matrix.
        residual: Frobenius residual of the defining linear equation.
    """

    S: np.ndarray
    residual: float = 0.0


def _spd(mat, name: str) -> np.ndarray:
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if not is_spd(mat):
        raise InvalidInputError(f"{name} must be symmetric positive definite")
    return mat


def kl_gaussian(cov, cov_target) -> float:
    """Covariance part of KL(N(., cov) || N(., cov_target)).

    E = 1/2 (tr(cov W) - d - log det(cov W)) with W = cov_target^{-1}.
    """
    S = _spd(cov, "cov")
    T = _spd(cov_target, "cov_target")
    d = S.shape[0]
    SW = np.linalg.solve(T, S)
    _, logdet_s = np.linalg.slogdet(S)
    _, logdet_t = np.linalg.slogdet(T)
    val = 0.5 * (np.trace(SW) - d - (logdet_s - logdet_t))
    return max(float(val), 0.0)


def kl_gaussian_full(state: GaussianState, target: GaussianState) -> float:
    """KL divergence between two Gaussians including the mean term."""
    diff = state.mean - target.mean
    return kl_gaussian(state.cov, target.cov) + 0.5 * float(diff @ np.linalg.solve(target.cov, diff))


def solve_newton_direction(cov, cov_target) -> NewtonDirectionMatrix:
    """Solve 2 Sigma S W + 2 W S Sigma + 4 S = -(Sigma W + W Sigma - 2 I), W = cov_target^{-1}.

    The equation is vectorized with Kronecker products into a d^2 x d^2
    linear system; the solution is symmetrized afterwards.

    Args:
        cov: Current covariance Sigma.
        cov_target: Target covariance.

    Returns:
        The direction matrix and its residual.

    Raises:
        CapacityError: If d exceeds 64.
    """
    sig = _spd(cov, "cov")
    T = _spd(cov_target, "cov_target")
    d = sig.shape[0]
    if d > MAX_DIM:
        raise CapacityError(f"dimension {d} exceeds the dense solve cap {MAX_DIM}")
    W = np.linalg.inv(T)
    W = 0.5 * (W + W.T)
    eye = np.eye(d)
    # vec(A X B) = (B^T kron A) vec(X) in column-major order
    L = 2 * np.kron(W.T, sig) + 2 * np.kron(sig.T, W) + 4 * np.eye(d * d)
    rhs = -(sig @ W + W @ sig - 2 * eye)
    S = np.linalg.solve(L, rhs.reshape(-1, order="F")).reshape(d, d, order="F")
    S = 0.5 * (S + S.T)
    res = np.linalg.norm(2 * sig @ S @ W + 2 * W @ S @ sig + 4 * S - rhs)
    return NewtonDirectionMatrix(S, float(res))


def newton_direction_1d(cov: float, cov_target: float) -> float:
    """Scalar closed form S = -(Sigma W - 1) / (2 (Sigma W + 1))."""
    r = cov / cov_target
    return -(r - 1) / (2 * (r + 1))


def step_gaussian_newton(state: GaussianState, S, dt: float, mean_target=None) -> GaussianState:
    """Geodesic covariance step with an exact mean relaxation.

    Sigma' = (I + 2 dt S) Sigma (I + 2 dt S) and
    mu' = mu* + exp(-dt) (mu - mu*), the exact solution of d mu = (mu* - mu) dt
    over one step.

    Args:
        state: Current mean and covariance.
        S: Direction matrix (array or :class:`NewtonDirectionMatrix`).
        dt: Step length.
        mean_target: Target mean; defaults to zero.

    Raises:
        StepTooLargeError: If I + 2 dt S is singular.
    """
    S = S.S if isinstance(S, NewtonDirectionMatrix) else np.atleast_2d(np.asarray(S, dtype=float))
    d = state.dim
    G = np.eye(d) + 2 * dt * S
    sv = np.linalg.svd(G, compute_uv=False)
    if sv.min() <= 1e-12 * max(1.0, sv.max()):
        ev = np.linalg.eigvalsh(S)
        neg = ev[ev < 0]
        suggested = 0.5 * 0.5 / abs(neg.min()) if neg.size else None
        raise StepTooLargeError(f"I + 2 dt S is singular at dt={dt}", suggested)
    cov = G @ state.cov @ G
    cov = 0.5 * (cov + cov.T)
    mu_t = np.zeros(d) if mean_target is None else np.atleast_1d(np.asarray(mean_target, dtype=float))
    mean = mu_t + np.exp(-dt) * (state.mean - mu_t)
    return GaussianState(mean, cov)


def _midpoint_direction(state: GaussianState, cov_target: np.ndarray, dt: float) -> np.ndarray:
    """Effective geodesic momentum for a second-order step.

    A half step along the current direction gives S_mid; the geodesic from
    Sigma with momentum P = S_mid (I - dt S_mid)^{-1} passes through the half
    point with direction S_mid, so stepping with P is a midpoint rule on the
    manifold.
    """
    S0 = solve_newton_direction(state.cov, cov_target).S
    G = np.eye(state.dim) + dt * S0
    half = G @ state.cov @ G
    Sm = solve_newton_direction(0.5 * (half + half.T), cov_target).S
    P = Sm @ np.linalg.inv(np.eye(state.dim) - dt * Sm)
    return 0.5 * (P + P.T)


def simulate_gaussian_newton(state: GaussianState, target: GaussianState, t_end: float, dt: float = 1e-3,
                             scheme: str = "midpoint", record_times=None) -> Dict[float, GaussianState]:
    """Integrate the Gaussian-family Newton flow with geodesic steps.

    Args:
        state: Initial Gaussian.
        target: Target Gaussian.
        t_end: Final time.
        dt: Step length.
        scheme: ``"midpoint"`` (second order) or ``"geodesic"`` (first order,
            momentum from the current direction).
        record_times: Times at which to record the state; they are rounded to
            the nearest step. Defaults to ``[t_end]``.

    Returns:
        Mapping from requested time to state.
    """
    if scheme not in ("midpoint", "geodesic"):
        raise InvalidConfigError(f"unknown scheme {scheme!r}")
    times = [t_end] if record_times is None else list(record_times)
    marks = {int(round(t / dt)): t for t in times}
    n_steps = max(marks)
    out = {}
    if 0 in marks:
        out[marks[0]] = state
    for k in range(1, n_steps + 1):
        if scheme == "midpoint":
            S = _midpoint_direction(state, target.cov, dt)
        else:
            S = solve_newton_direction(state.cov, target.cov).S
        state = step_gaussian_newton(state, S, dt, target.mean)
        if k in marks:
            out[marks[k]] = state
    return out


CLOSED_FORM_METHODS = ("nld", "old_lld", "hamcmc")


def closed_form_1d(method: str, mu0: float, var0: float, mu_target: float, var_target: float, t):
    """Mean and variance at time t of 1D Gaussian dynamics started at (mu0, var0).

    * ``nld``: mu_t = mu* + e^{-t}(mu0 - mu*); Sigma_t is the root of
      Sigma^2 - (2 Sigma* + c e^{-2t}) Sigma + Sigma*^2 = 0 with
      c = (Sigma0 - Sigma*)^2 / Sigma0 lying on Sigma0's side of Sigma*.
    * ``old_lld``: rates 1/Sigma* for the mean and 2/Sigma* for the variance.
    * ``hamcmc``: rates 1 for the mean and 2 for the variance.

    Args:
        method: One of ``nld``, ``old_lld``, ``hamcmc``.
        mu0: Initial mean.
        var0: Initial variance.
        mu_target: Target mean.
        var_target: Target variance.
        t: Time, scalar or array.

    Returns:
        Tuple (mu_t, var_t).
    """
    if var0 <= 0 or var_target <= 0:
        raise InvalidInputError("variances must be positive")
    t = np.asarray(t, dtype=float)
    if method == "nld":
        mu = mu_target + np.exp(-t) * (mu0 - mu_target)
        c = (var0 - var_target) ** 2 / var0
        p = 2 * var_target + c * np.exp(-2 * t)
        # roots (p +- sqrt(p^2 - 4 Sigma*^2)) / 2; product is Sigma*^2
        disc = np.sqrt(np.maximum(p * p - 4 * var_target**2, 0.0))
        upper = 0.5 * (p + disc)
        # the smaller root via the product avoids cancellation
        lower = var_target**2 / upper
        var = upper if var0 >= var_target else lower
    elif method == "old_lld":
        mu = mu_target + np.exp(-t / var_target) * (mu0 - mu_target)
        var = var_target + np.exp(-2 * t / var_target) * (var0 - var_target)
    elif method == "hamcmc":
        mu = mu_target + np.exp(-t) * (mu0 - mu_target)
        var = var_target + np.exp(-2 * t) * (var0 - var_target)
    else:
        raise InvalidConfigError(f"unknown method {method!r}; available: {CLOSED_FORM_METHODS}")
    if mu.ndim == 0:
        return float(mu), float(var)
    return mu, var


def nld_variance_rhs(var, var_target):
    """Right-hand side of d Sigma / dt = 2 Sigma (Sigma* - Sigma) / (Sigma* + Sigma)."""
    return 2 * var * (var_target - var) / (var_target + var)


def newton_direction_affine_1d(mu: float, var: float, mu_target: float, var_target: float):
    """Slope and intercept of the 1D Gaussian Newton field u(x) = a x + c.

    a = (1/Sigma - 1/Sigma*) / (1/Sigma + 1/Sigma*) and
    c = -2 mu / Sigma / (1/Sigma + 1/Sigma*) + mu*.
    """
    p, q = 1.0 / var, 1.0 / var_target
    return (p - q) / (p + q), -2 * p * mu / (p + q) + mu_target


def fit_exponential_rate(t, err) -> float:
    """Decay rate r of a least-squares fit log|err| ~ log C - r t."""
    t = np.asarray(t, dtype=float)
    y = np.log(np.abs(np.asarray(err, dtype=float)))
    slope = np.polyfit(t, y, 1)[0]
    return float(-slope)
