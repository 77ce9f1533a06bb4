"""Densities on a uniform 1D grid: first variations, Fisher-Rao and
Wasserstein gradients and Hessian operators, the Wasserstein Newton direction
of KL and explicit density updates.

All integrals use the trapezoid rule. The same weights define the
mass, the expectations, the inner product <a, b> = sum_j w_j a_j b_j and the
finite-volume control volumes, so discrete conservation and self-adjointness
hold exactly rather than up to quadrature error.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Tuple

import numpy as np
import scipy.linalg

from .core import (
    InsufficientSupportError,
    InvalidInputError,
    SolverStateError,
    StepTooLargeError,
    TargetModel,
    UnsupportedError,
)

RHO_MIN = 1e-300
WINDOW_REL_THRESHOLD = 1e-8


def trapezoid_weights(n: int, dx: float) -> np.ndarray:
    w = np.full(n, dx)
    w[0] = w[-1] = 0.5 * dx
    return w


@dataclass(frozen=True)
class GridDensity:
    """Nonnegative density with unit trapezoid mass on a uniform grid.

    Attributes:
        x: (J,) uniformly spaced grid points.
        values: (J,) density values.
    """

    x: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if x.ndim != 1 or x.shape != v.shape or x.shape[0] < 3:
            raise InvalidInputError("grid and values must be 1D arrays of equal length >= 3")
        dx = np.diff(x)
        if not np.all(dx > 0) or np.max(np.abs(dx - dx.mean())) > 1e-9 * abs(dx.mean()) + 1e-14:
            raise InvalidInputError("grid must be increasing and uniform")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise InvalidInputError("density values must be finite and nonnegative")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "values", v)
        mass = float(self.weights @ v)
        if abs(mass - 1.0) > 1e-12:
            raise InvalidInputError(f"density mass is {mass!r}, expected 1; use GridDensity.normalized")

    @classmethod
    def normalized(cls, x, values) -> "GridDensity":
        """Build a density from unnormalized values."""
        x = np.asarray(x, dtype=float)
        v = np.clip(np.asarray(values, dtype=float), 0.0, None)
        mass = trapezoid_weights(x.shape[0], x[1] - x[0]) @ v
        if not mass > 0:
            raise InvalidInputError("values have zero mass")
        return cls(x, v / mass)

    @classmethod
    def from_potential(cls, x, f: Callable[[np.ndarray], np.ndarray]) -> "GridDensity":
        """Density proportional to exp(-f) on the grid."""
        x = np.asarray(x, dtype=float)
        logp = -np.asarray(f(x), dtype=float)
        return cls.normalized(x, np.exp(logp - logp.max()))

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def weights(self) -> np.ndarray:
        return trapezoid_weights(self.x.shape[0], self.x[1] - self.x[0])

    def expect(self, g) -> np.ndarray:
        """Trapezoid expectation of g (vector or columns of a matrix)."""
        return (self.weights * self.values) @ g

    def to_csv(self, path) -> None:
        """Write a two-column CSV with header ``x,rho``."""
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "rho"])
            for xi, ri in zip(self.x, self.values):
                w.writerow([repr(float(xi)), repr(float(ri))])

    @classmethod
    def from_csv(cls, path) -> "GridDensity":
        """Read a density written by :meth:`to_csv` (renormalized on load)."""
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls.normalized(data[:, 0], data[:, 1])


@dataclass(frozen=True)
class GridFunction:
    """Function on the grid, e.g. a cotangent potential Phi.

    Attributes:
        x: (J,) grid.
        values: (J,) values.
        field: Optional (J,) derivative Phi' when it is known more accurately
            than by differencing ``values``.
    """

    x: np.ndarray
    values: np.ndarray
    field: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("grid function has non-finite values")
        object.__setattr__(self, "values", v)


# ---------------------------------------------------------------------------
# Functionals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KLFunctional:
    """KL(rho || exp(-f)/Z) through E(rho) = int rho log rho + f rho.

    Attributes:
        potential: f, vectorized over grid points.
        second_derivative: f'', vectorized.
        first_derivative: f', vectorized.
    """

    potential: Callable[[np.ndarray], np.ndarray]
    second_derivative: Callable[[np.ndarray], np.ndarray]
    first_derivative: Optional[Callable[[np.ndarray], np.ndarray]] = None

    @classmethod
    def from_model(cls, model: TargetModel) -> "KLFunctional":
        if model.dim != 1:
            raise InvalidInputError("grid functionals need a 1D model")
        return cls(
            lambda x: model.f(np.asarray(x)[:, None]),
            lambda x: model.hess(np.asarray(x)[:, None])[:, 0, 0],
            lambda x: model.grad(np.asarray(x)[:, None])[:, 0],
        )


@dataclass(frozen=True)
class InteractionFunctional:
    """E(rho) = 1/2 int int W(x, y) rho(x) rho(y) for symmetric W.

    Attributes:
        kernel: W(x, y) with broadcasting.
        kernel_xy: d^2 W / dx dy.
        kernel_xx: d^2 W / dx^2.
    """

    kernel: Callable[[np.ndarray, np.ndarray], np.ndarray]
    kernel_xy: Callable[[np.ndarray, np.ndarray], np.ndarray]
    kernel_xx: Callable[[np.ndarray, np.ndarray], np.ndarray]


def gaussian_interaction(scale: float = 1.0, strength: float = 1.0) -> InteractionFunctional:
    """W(x, y) = strength * exp(-(x - y)^2 / (2 scale^2))."""
    s2 = scale**2

    def W(x, y):
        return strength * np.exp(-((x - y) ** 2) / (2 * s2))

    def Wxx(x, y):
        r = x - y
        return W(x, y) * (r * r / s2**2 - 1 / s2)

    def Wxy(x, y):
        return -Wxx(x, y)

    return InteractionFunctional(W, Wxy, Wxx)


def zero_interaction() -> InteractionFunctional:
    z = lambda x, y: np.zeros(np.broadcast(x, y).shape)
    return InteractionFunctional(z, z, z)


@dataclass(frozen=True)
class ReverseKLFunctional:
    """E(rho) = KL(rho* || rho) = int rho* log(rho* / rho).

    Attributes:
        target: Reference density rho* on the same grid.
    """

    target: GridDensity


def _floored(rho: GridDensity):
    v = rho.values
    flagged = v <= 0
    return np.where(flagged, RHO_MIN, v), flagged


def energy(functional, rho: GridDensity) -> float:
    """Value of the functional by trapezoid quadrature."""
    w, v, x = rho.weights, rho.values, rho.x
    if isinstance(functional, KLFunctional):
        safe = np.where(v > 0, v, 1.0)
        return float(w @ (v * np.log(safe) + functional.potential(x) * v))
    if isinstance(functional, InteractionFunctional):
        M = functional.kernel(x[:, None], x[None, :])
        wv = w * v
        return float(0.5 * wv @ M @ wv)
    if isinstance(functional, ReverseKLFunctional):
        t = functional.target.values
        pos = t > 0
        vv, _ = _floored(rho)
        return float(w[pos] @ (t[pos] * (np.log(t[pos]) - np.log(vv[pos]))))
    raise UnsupportedError(f"unknown functional {type(functional).__name__}")


def first_variation(functional, rho: GridDensity) -> GridFunction:
    """dE/drho on the grid.

    kl: log rho + f + 1; interaction: int W(x, y) rho(y) dy; reverse KL:
    -rho*/rho. Zero density values are floored at 1e-300 for the logarithm
    and the ratio; :func:`first_variation_flags` reports where.
    """
    return GridFunction(rho.x, _first_variation(functional, rho)[0])


def first_variation_flags(functional, rho: GridDensity) -> np.ndarray:
    """Mask of grid points where the density was floored."""
    return _first_variation(functional, rho)[1]


def _first_variation(functional, rho: GridDensity):
    x = rho.x
    if isinstance(functional, KLFunctional):
        v, flagged = _floored(rho)
        return np.log(v) + functional.potential(x) + 1.0, flagged
    if isinstance(functional, InteractionFunctional):
        M = functional.kernel(x[:, None], x[None, :])
        return M @ (rho.weights * rho.values), np.zeros(x.shape, dtype=bool)
    if isinstance(functional, ReverseKLFunctional):
        _check_same_grid(rho, functional.target)
        v, flagged = _floored(rho)
        return -functional.target.values / v, flagged
    raise UnsupportedError(f"unknown functional {type(functional).__name__}")


def _check_same_grid(a: GridDensity, b: GridDensity):
    if a.x.shape != b.x.shape or not np.allclose(a.x, b.x):
        raise InvalidInputError("densities live on different grids")


def kl_divergence(rho: GridDensity, target: GridDensity) -> float:
    """KL(rho || target) by trapezoid quadrature (0 log 0 = 0)."""
    _check_same_grid(rho, target)
    v, t = rho.values, target.values
    pos = v > 0
    tt = np.maximum(t[pos], RHO_MIN)
    return float(rho.weights[pos] @ (v[pos] * (np.log(v[pos]) - np.log(tt))))


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


def _values(g) -> np.ndarray:
    return g.values if isinstance(g, GridFunction) else np.asarray(g, dtype=float)


def fr_gradient(rho: GridDensity, dE) -> np.ndarray:
    """Fisher-Rao gradient rho (dE - E_rho[dE])."""
    g = _values(dE)
    return rho.values * (g - rho.expect(g))


def _face_density(rho: GridDensity) -> np.ndarray:
    v = rho.values
    return 0.5 * (v[1:] + v[:-1])


def _divergence(flux_faces: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Finite-volume divergence with zero flux through the domain ends."""
    padded = np.concatenate([np.zeros((1,) + flux_faces.shape[1:]), flux_faces,
                             np.zeros((1,) + flux_faces.shape[1:])])
    return (padded[1:] - padded[:-1]) / (w if flux_faces.ndim == 1 else w[:, None])


def w_gradient(rho: GridDensity, dE) -> np.ndarray:
    """Wasserstein gradient -(rho dE')' as a conservative finite-volume divergence.

    The flux at each cell face is the face density times the centered
    difference of dE across the face; the ends carry zero flux, so the
    output has zero trapezoid integral.
    """
    g = _values(dE)
    flux = _face_density(rho) * np.diff(g) / rho.dx
    return -_divergence(flux, rho.weights)


# ---------------------------------------------------------------------------
# Hessian operators
# ---------------------------------------------------------------------------


def _fr_kl(rho: GridDensity, functional: KLFunctional, P: np.ndarray) -> np.ndarray:
    v, _ = _floored(rho)
    L = np.log(v) + functional.potential(rho.x)
    Lc = L - rho.expect(L)
    r = rho.values[:, None] if P.ndim == 2 else rho.values
    Lc_ = Lc[:, None] if P.ndim == 2 else Lc
    EP = rho.expect(P)
    cov = rho.expect(Lc_ * P)
    return 0.5 * (2 + Lc_) * (P - EP) * r - 0.5 * cov * r


def _fr_interaction(rho: GridDensity, functional: InteractionFunctional, P: np.ndarray) -> np.ndarray:
    x, w = rho.x, rho.weights
    M = functional.kernel(x[:, None], x[None, :])
    V = M @ (w * rho.values)
    Vc = V - rho.expect(V)
    two = P.ndim == 2
    r = rho.values[:, None] if two else rho.values
    Vc_ = Vc[:, None] if two else Vc
    EP = rho.expect(P)
    conv = M @ ((w * rho.values)[:, None] * P if two else w * rho.values * P)
    convc = conv - rho.expect(conv)
    return (
        0.5 * Vc_ * (P - EP) * r
        - 0.5 * rho.expect(Vc_ * P) * r
        + convc * r
        - EP * Vc_ * r
    )


def _fr_reverse_kl(rho: GridDensity, functional: ReverseKLFunctional, P: np.ndarray) -> np.ndarray:
    _check_same_grid(rho, functional.target)
    t = functional.target
    two = P.ndim == 2
    r = rho.values[:, None] if two else rho.values
    s = t.values[:, None] if two else t.values
    return 0.5 * (P - t.expect(P)) * r + 0.5 * (P - rho.expect(P)) * s


def _diff_ops(J: int, dx: float):
    """Forward difference to faces (J-1, J) and second difference at interior nodes (J-2, J)."""
    D1 = (np.eye(J, k=1) - np.eye(J))[: J - 1] / dx
    D2 = (np.eye(J, k=-1) - 2 * np.eye(J) + np.eye(J, k=1))[1:-1] / dx**2
    return D1, D2


def _w_quadratic_form(rho: GridDensity, functional) -> np.ndarray:
    """Symmetric matrix Q with <Phi, H Phi> = Phi^T Q Phi for the Wasserstein Hessian."""
    x, dx = rho.x, rho.dx
    J = x.shape[0]
    D1, D2 = _diff_ops(J, dx)
    faces = 0.5 * (x[1:] + x[:-1])
    rf = _face_density(rho)
    if isinstance(functional, KLFunctional):
        # int rho Phi''^2 + int rho f'' Phi'^2
        ri = rho.values[1:-1]
        fpp = functional.second_derivative(faces)
        return D2.T @ (dx * ri[:, None] * D2) + D1.T @ ((dx * rf * fpp)[:, None] * D1)
    if isinstance(functional, InteractionFunctional):
        # int int Phi'(x) W_xy(x, y) Phi'(y) rho rho + int Phi'^2 (W_xx * rho) rho
        Wxy = functional.kernel_xy(faces[:, None], faces[None, :])
        c = functional.kernel_xx(faces[:, None], x[None, :]) @ (rho.weights * rho.values)
        a = dx * rf
        inner = a[:, None] * Wxy * a[None, :] + np.diag(a * c)
        return D1.T @ inner @ D1
    if isinstance(functional, ReverseKLFunctional):
        # int (rho*/rho^2) ((rho Phi')')^2 - int rho (rho*/rho)'' Phi'^2
        _check_same_grid(rho, functional.target)
        v, _ = _floored(rho)
        T = (rf[1:, None] * D1[1:] - rf[:-1, None] * D1[:-1]) / dx  # (rho Phi')' at interior nodes
        coef = dx * functional.target.values[1:-1] / v[1:-1] ** 2
        ratio = functional.target.values / v
        rpp = D2 @ ratio
        rpp_f = np.concatenate([[rpp[0]], 0.5 * (rpp[1:] + rpp[:-1]), [rpp[-1]]])
        return T.T @ (coef[:, None] * T) - D1.T @ ((dx * rf * rpp_f)[:, None] * D1)
    raise UnsupportedError(f"unknown functional {type(functional).__name__}")


def hessian_apply(metric: str, functional, rho: GridDensity, phi) -> np.ndarray:
    """Apply the Hessian operator of a functional under a metric to Phi.

    Fisher-Rao operators are evaluated pointwise from their closed forms
    with trapezoid expectations and convolutions. Wasserstein operators are
    W^{-1} Q Phi where Q is the symmetric matrix of the discretized quadratic
    form and W the trapezoid weights.

    Args:
        metric: ``"fr"`` or ``"w"``.
        functional: A KL, interaction or reverse-KL functional.
        rho: Base density.
        phi: Cotangent function, (J,) or (J, K) for several at once.

    Raises:
        UnsupportedError: For an unknown metric or functional.
    """
    P = _values(phi)
    if metric == "fr":
        if isinstance(functional, KLFunctional):
            return _fr_kl(rho, functional, P)
        if isinstance(functional, InteractionFunctional):
            return _fr_interaction(rho, functional, P)
        if isinstance(functional, ReverseKLFunctional):
            return _fr_reverse_kl(rho, functional, P)
        raise UnsupportedError(f"unknown functional {type(functional).__name__}")
    if metric == "w":
        Q = _w_quadratic_form(rho, functional)
        w = rho.weights
        return (Q @ P) / (w if P.ndim == 1 else w[:, None])
    raise UnsupportedError(f"unknown metric {metric!r}")


def hessian_matrix(metric: str, functional, rho: GridDensity) -> np.ndarray:
    """Dense (J, J) matrix A with hessian_apply(..., Phi) = A Phi."""
    return hessian_apply(metric, functional, rho, np.eye(rho.x.shape[0]))


def inner(rho_or_grid, a, b) -> float:
    """Trapezoid inner product on the grid of ``rho_or_grid``."""
    w = rho_or_grid.weights
    return float(np.sum(w * _values(a) * _values(b)))


# ---------------------------------------------------------------------------
# Newton direction and density updates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NewtonSolveReport:
    window: Tuple[int, int]
    residual: float


def solve_w_newton_direction_kl(rho: GridDensity, model, threshold: float = WINDOW_REL_THRESHOLD,
                                with_report: bool = False):
    """Wasserstein Newton direction of KL for a 1D density.

    The field u = Phi' solves (rho u')' = rho f'' u + rho f' + rho' on the
    window where rho >= threshold * max(rho). Second-order central
    differences are used in the interior and u'' = 0 at both window ends;
    u is extended linearly outside the window.

    Args:
        rho: Density.
        model: A 1D :class:`TargetModel` or a :class:`KLFunctional` with a
            first derivative.
        threshold: Relative support threshold.
        with_report: Also return the window and residual.

    Returns:
        GridFunction Phi (zero at the left end) with ``field`` u, and the
        report when requested.

    Raises:
        InsufficientSupportError: If the window has fewer than 5 points.
    """
    kl = model if isinstance(model, KLFunctional) else KLFunctional.from_model(model)
    if kl.first_derivative is None:
        raise InvalidInputError("the functional needs a first derivative")
    x, v, dx = rho.x, rho.values, rho.dx
    idx = np.nonzero(v >= threshold * v.max())[0]
    lo, hi = int(idx[0]), int(idx[-1])
    if hi - lo + 1 < 5 or np.any(v[lo:hi + 1] <= 0):
        raise InsufficientSupportError(f"support window has {hi - lo + 1} points; need at least 5 positive")
    xs, rs = x[lo:hi + 1], v[lo:hi + 1]
    n = xs.shape[0]
    rf = 0.5 * (rs[1:] + rs[:-1])
    fp = kl.first_derivative(xs)
    fpp = kl.second_derivative(xs)
    # rows divided by rho_j to keep coefficients O(1/dx^2)
    inv = 1.0 / rs[1:-1]
    sub = rf[:-1] * inv / dx**2
    sup = rf[1:] * inv / dx**2
    diag = -(rf[:-1] + rf[1:]) * inv / dx**2 - fpp[1:-1]
    rhs_int = fp[1:-1] + (rs[2:] - rs[:-2]) / (2 * dx) * inv
    # banded storage with two sub- and two super-diagonals
    ab = np.zeros((5, n))
    ab[2, 1:-1] = diag
    ab[1, 2:] = sup
    ab[3, :-2] = sub
    # (u0 - 2 u1 + u2) / dx^2 = 0 and the mirror row at the right end, scaled like the interior rows
    c = 1.0 / dx**2
    ab[2, 0], ab[1, 1], ab[0, 2] = c, -2 * c, c
    ab[2, -1], ab[3, -2], ab[4, -3] = c, -2 * c, c
    rhs = np.concatenate([[0.0], rhs_int, [0.0]])
    u_win = scipy.linalg.solve_banded((2, 2), ab, rhs)
    interior = sub * u_win[:-2] + diag * u_win[1:-1] + sup * u_win[2:] - rhs_int
    residual = float(np.max(np.abs(interior))) if interior.size else 0.0
    u = np.empty_like(x)
    u[lo:hi + 1] = u_win
    left_slope = (u_win[1] - u_win[0]) / dx
    right_slope = (u_win[-1] - u_win[-2]) / dx
    u[:lo] = u_win[0] + left_slope * (x[:lo] - xs[0])
    u[hi + 1:] = u_win[-1] + right_slope * (x[hi + 1:] - xs[-1])
    phi = np.concatenate([[0.0], np.cumsum(0.5 * (u[1:] + u[:-1]) * dx)])
    out = GridFunction(x, phi, field=u)
    if with_report:
        return out, NewtonSolveReport((lo, hi), residual)
    return out


def transport_step_limit(rho: GridDensity, phi) -> float:
    """Largest step keeping the upwind update nonnegative.

    Each node may lose at most its own mass: dt * outflow / w_j <= 1, where
    outflow sums the outward face velocities. For one-signed velocities in
    the interior this is dt * max|Phi'| <= dx.
    """
    c = np.diff(_values(phi)) / rho.dx
    out = np.zeros_like(rho.values)
    out[:-1] += np.maximum(c, 0.0)
    out[1:] += np.maximum(-c, 0.0)
    rate = np.max(out / rho.weights)
    return np.inf if rate == 0 else float(1.0 / rate)


def w_transport_step(rho: GridDensity, phi, dt: float) -> GridDensity:
    """One upwind finite-volume step of d rho/dt + (rho Phi')' = 0.

    Face velocities are differences of Phi; the ends carry no flux, so the
    trapezoid mass is conserved to rounding.

    Raises:
        StepTooLargeError: If ``dt`` exceeds :func:`transport_step_limit`.
    """
    limit = transport_step_limit(rho, phi)
    if dt > limit * (1 + 1e-12):
        raise StepTooLargeError(f"step {dt} violates the CFL limit {limit}", suggested=limit)
    v = rho.values
    c = np.diff(_values(phi)) / rho.dx
    flux = np.maximum(c, 0.0) * v[:-1] + np.minimum(c, 0.0) * v[1:]
    new = v - dt * _divergence(flux, rho.weights)
    new = np.maximum(new, 0.0)
    # renormalize only the rounding drift
    return GridDensity(rho.x, new / (rho.weights @ new))


def fr_newton_direction(rho: GridDensity, functional, eta: float = 1e-8) -> GridFunction:
    """Solve H Phi = -grad for the Fisher-Rao Newton potential.

    The system is symmetrized in the trapezoid inner product,
    (W A + eta_abs W) Phi = -W grad, with eta_abs = eta * ||W A||_inf.
    """
    A = hessian_matrix("fr", functional, rho)
    w = rho.weights
    WA = w[:, None] * A
    WA = 0.5 * (WA + WA.T)
    g = fr_gradient(rho, first_variation(functional, rho))
    eta_abs = eta * max(np.max(np.sum(np.abs(WA), axis=1)), np.finfo(float).tiny)
    M = WA + eta_abs * np.diag(w)
    try:
        phi = scipy.linalg.solve(M, -w * g, assume_a="sym")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise SolverStateError(f"Fisher-Rao Newton solve failed (condition {np.linalg.cond(M):.3e})") from exc
    if not np.all(np.isfinite(phi)):
        raise SolverStateError(f"Fisher-Rao Newton solve failed (condition {np.linalg.cond(M):.3e})")
    return GridFunction(rho.x, phi)


def fr_newton_step(rho: GridDensity, model, dt: float, eta: float = 1e-8) -> GridDensity:
    """Explicit Euler step of d rho/dt = rho (Phi - E_rho[Phi]) with the Newton potential.

    Values are clipped at 1e-300 and renormalized to unit mass.
    """
    kl = model if isinstance(model, KLFunctional) else KLFunctional.from_model(model)
    phi = fr_newton_direction(rho, kl, eta).values
    v = rho.values
    new = v + dt * v * (phi - rho.expect(phi))
    new = np.maximum(new, RHO_MIN)
    return GridDensity(rho.x, new / (rho.weights @ new))


def w_newton_step(rho: GridDensity, model, dt: float, cfl: float = 0.9):
    """Wasserstein Newton step: solve the direction, then transport.

    The step is shortened to ``cfl`` times the stability limit when needed.

    Returns:
        Tuple (new density, step actually taken).
    """
    phi = solve_w_newton_direction_kl(rho, model)
    step = min(dt, cfl * transport_step_limit(rho, phi))
    return w_transport_step(rho, phi, step), step
