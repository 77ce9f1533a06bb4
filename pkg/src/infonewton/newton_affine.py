"""Newton direction restricted to affine fields (diagonal quadratic potentials)
and to the span of a general finite basis."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .core import DirectionField, InvalidInputError, ParticleEnsemble, TargetModel, as_points
from .score import ScoreEstimate

PINV_RCOND = 1e-12


@dataclass(frozen=True)
class AffineDirection:
    """Potential Phi(x) = 1/2 x^T diag(s) x + b^T x with field diag(s) x + b.

    Attributes:
        s: (d,) diagonal slopes.
        b: (d,) offsets.
        flagged: True when the solve fell back to a pseudo-inverse.
        residual: Residual norm of the linear solve.
    """

    s: np.ndarray
    b: np.ndarray
    flagged: bool = False
    residual: float = 0.0

    def __call__(self, at) -> np.ndarray:
        return evaluate_affine(self, at)


@dataclass(frozen=True)
class BasisFunction:
    """Scalar basis function with batched value, gradient and Hessian."""

    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class GeneralBasis:
    """Finite family of basis functions psi_1..psi_m."""

    functions: Sequence[BasisFunction]

    def __post_init__(self):
        if len(self.functions) < 1:
            raise InvalidInputError("a basis needs at least one function")

    @property
    def size(self) -> int:
        return len(self.functions)

    def gradients(self, x: np.ndarray) -> np.ndarray:
        """(N, m, d) stacked basis gradients."""
        return np.stack([np.asarray(p.gradient(x), dtype=float) for p in self.functions], axis=1)

    def hessians(self, x: np.ndarray) -> np.ndarray:
        """(N, m, d, d) stacked basis Hessians."""
        return np.stack([np.asarray(p.hessian(x), dtype=float) for p in self.functions], axis=1)


def monomial_basis(dim: int) -> GeneralBasis:
    """Basis {x_1, ..., x_d, x_1^2, ..., x_d^2}.

    Its coefficients a relate to the affine parametrization by b_i = a_i and
    s_i = 2 a_{i+d}.
    """
    funcs = []
    for i in range(dim):
        e = np.eye(dim)[i]

        def lin_grad(x, e=e):
            return np.broadcast_to(e, x.shape).copy()

        funcs.append(BasisFunction(lambda x, i=i: x[:, i], lin_grad, lambda x: np.zeros((x.shape[0], dim, dim))))
    for i in range(dim):
        E = np.zeros((dim, dim))
        E[i, i] = 2.0

        def sq_grad(x, i=i):
            g = np.zeros_like(x)
            g[:, i] = 2 * x[:, i]
            return g

        funcs.append(
            BasisFunction(lambda x, i=i: x[:, i] ** 2, sq_grad, lambda x, E=E: np.broadcast_to(E, (x.shape[0], dim, dim)).copy())
        )
    return GeneralBasis(funcs)


def _check_aligned(ensemble: ParticleEnsemble, model: TargetModel, score: ScoreEstimate):
    if ensemble.dim != model.dim:
        raise InvalidInputError(f"ensemble dimension {ensemble.dim} does not match model dimension {model.dim}")
    if score.values.shape != ensemble.positions.shape:
        raise InvalidInputError(
            f"score shape {score.values.shape} does not match ensemble shape {ensemble.positions.shape}"
        )


def assemble_quadratic_system(ensemble: ParticleEnsemble, model: TargetModel, score: ScoreEstimate, eps: float = 0.0):
    """Normal equations for the affine Newton direction.

    With A_i = Hess f(x_i) + eps I, D_i = diag(x_i) and v_i = grad f(x_i) + xi(x_i),
    the system is

        H = [[I + mean D A D, mean D A], [mean A D, mean A]]
        u = [mean D v; mean v].

    Args:
        ensemble: Particles.
        model: Target.
        score: Score estimate at the particles.
        eps: Hessian shift.

    Returns:
        Tuple (H, u) of shapes (2d, 2d) and (2d,).
    """
    _check_aligned(ensemble, model, score)
    x = ensemble.positions
    n, d = x.shape
    A = model.hess(x) + eps * np.eye(d)
    v = model.grad(x) + score.values
    # D A D entries are x_a A_ab x_b; A D entries are A_ab x_b
    DAD = np.einsum("nab,nab->ab", x[:, :, None] * x[:, None, :], A) / n
    AD = np.einsum("nab,nb->ab", A, x) / n
    DA = np.einsum("na,nab->ab", x, A) / n
    H = np.block([[np.eye(d) + DAD, DA], [AD, A.mean(axis=0)]])
    u = np.concatenate([(x * v).mean(axis=0), v.mean(axis=0)])
    return H, u


def default_ridge(H: np.ndarray) -> float:
    """Tiny diagonal shift 1e-10 * trace(H) / size, never negative."""
    return max(1e-10 * float(np.trace(H)) / H.shape[0], 0.0)


def _symmetric_solve(M: np.ndarray, rhs: np.ndarray, rcond: float):
    """Solve M x = rhs for symmetric M, falling back to a pseudo-inverse.

    Returns:
        Tuple (x, flagged).
    """
    if np.linalg.cond(M) < 1 / rcond:
        try:
            sol = scipy.linalg.solve(M, rhs, assume_a="sym")
            if np.all(np.isfinite(sol)):
                return sol, False
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            pass
    return np.linalg.pinv(M, rcond=rcond, hermitian=True) @ rhs, True


def solve_affine_direction(H: np.ndarray, u: np.ndarray, ridge=None) -> AffineDirection:
    """Minimizer [s; b] = -(H + ridge I)^{-1} u.

    Args:
        H: (2d, 2d) symmetric system matrix.
        u: (2d,) right-hand side.
        ridge: Diagonal shift; defaults to :func:`default_ridge`.

    Returns:
        The affine direction; ``flagged`` is set when the matrix was
        numerically singular and a pseudo-inverse was used.
    """
    H = np.asarray(H, dtype=float)
    u = np.asarray(u, dtype=float)
    if H.ndim != 2 or H.shape[0] != H.shape[1] or H.shape[0] % 2 or u.shape != (H.shape[0],):
        raise InvalidInputError(f"incompatible shapes H {H.shape}, u {u.shape}")
    r = default_ridge(H) if ridge is None else float(ridge)
    M = H + r * np.eye(H.shape[0])
    sol, flagged = _symmetric_solve(M, -u, PINV_RCOND)
    d = H.shape[0] // 2
    residual = float(np.linalg.norm(M @ sol + u))
    return AffineDirection(sol[:d].copy(), sol[d:].copy(), flagged, residual)


def evaluate_affine(direction: AffineDirection, at) -> np.ndarray:
    """Field diag(s) x + b at (M, d) points."""
    x = as_points(at, direction.s.shape[0])
    return x * direction.s + direction.b


def affine_direction(ensemble, model, score, eps: float = 0.0, ridge=None) -> DirectionField:
    """Assemble, solve and evaluate the affine Newton direction at the particles."""
    H, u = assemble_quadratic_system(ensemble, model, score, eps)
    sol = solve_affine_direction(H, u, ridge)
    return DirectionField(evaluate_affine(sol, ensemble.positions), payload=sol, flagged=sol.flagged)


def assemble_general_basis(ensemble, model, score, eps: float, basis: GeneralBasis):
    """Quadratic form of the Newton objective over span(basis).

    With G_i the (m, d) matrix of basis gradients at x_i,

        B = mean G_i (Hess f(x_i) + eps I) G_i^T
        D_jk = mean tr(Hess psi_j(x_i) Hess psi_k(x_i))
        c = mean G_i (grad f(x_i) + xi(x_i)).

    Returns:
        Tuple (B + D, c); the coefficients minimizing the objective are
        -(B + D)^{-1} c.
    """
    _check_aligned(ensemble, model, score)
    x = ensemble.positions
    n, d = x.shape
    A = model.hess(x) + eps * np.eye(d)
    v = model.grad(x) + score.values
    G = basis.gradients(x)
    Hs = basis.hessians(x)
    B = np.einsum("nja,nab,nkb->jk", G, A, G) / n
    D = np.einsum("njab,nkab->jk", Hs, Hs) / n
    c = np.einsum("nja,na->j", G, v) / n
    return B + D, c


def solve_general_basis(BD: np.ndarray, c: np.ndarray, ridge: float = 0.0):
    """Coefficients a = -(B + D + ridge I)^{-1} c with pseudo-inverse fallback."""
    M = BD + ridge * np.eye(BD.shape[0])
    sol, flagged = _symmetric_solve(M, -np.asarray(c, dtype=float), PINV_RCOND)
    return sol, flagged
