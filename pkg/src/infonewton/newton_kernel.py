"""Kernelized Newton direction: Gaussian-kernel derivative blocks and the
regularized least-squares solves built from them.

Index conventions. For particles x_1..x_N in R^d, first-order blocks use the
flat index n*d + i and second-order blocks use n*d*d + j1*d + j2. With
r = x_n - x_m and g(r) the Gaussian kernel as a function of the difference,

    K11[(n,i),(m,j)]       = d/dx_i d/dy_j k(x_n, x_m)              = -g_ij(r)
    K12[(n,i),(m,j1,j2)]   = d/dx_i d/dy_j1 d/dy_j2 k(x_n, x_m)     = +g_i j1 j2(r)
    K22[(n,i1,i2),(m,j1,j2)] = d/dx_i1 d/dx_i2 d/dy_j1 d/dy_j2 k    = +g_i1 i2 j1 j2(r)

and K21 = K12^T.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .core import (
    STREAM_ANCHORS,
    CapacityError,
    DirectionField,
    InvalidConfigError,
    InvalidInputError,
    ParticleEnsemble,
    SolverStateError,
    TargetModel,
    as_points,
    keyed_rng,
)
from .score import KernelSpec

PINV_RCOND = 1e-10
DEFAULT_LAMBDA = 1e-3
# full mode stores an (N d^2) x (N d^2) block; refuse beyond this many rows
FULL_MODE_MAX_ROWS = 4000


# ---------------------------------------------------------------------------
# Kernel derivatives
# ---------------------------------------------------------------------------


def gaussian_kernel_derivatives(r: np.ndarray, h: float, order: int = 2):
    """Derivatives of g(r) = (2 pi h)^(-d/2) exp(-|r|^2 / (2h)) with respect to r.

    Args:
        r: (..., d) differences.
        h: Bandwidth.
        order: Highest derivative order, 2, 3 or 4.

    Returns:
        List [g, g1, g2, ...] with g of shape (...) and the k-th derivative of
        shape (..., d, ..., d) with k trailing axes.
    """
    r = np.asarray(r, dtype=float)
    d = r.shape[-1]
    eye = np.eye(d)
    g = (2 * np.pi * h) ** (-d / 2) * np.exp(-np.sum(r * r, axis=-1) / (2 * h))
    out = [g]
    # Hermite structure: each derivative multiplies g by a polynomial in r / h
    g1 = -(r / h) * g[..., None]
    out.append(g1)
    rr = r[..., :, None] * r[..., None, :]
    g2 = (rr / h**2 - eye / h) * g[..., None, None]
    out.append(g2)
    if order >= 3:
        rrr = rr[..., :, :, None] * r[..., None, None, :]
        # delta_ab r_c + delta_ac r_b + delta_bc r_a
        dr = (
            eye[:, :, None] * r[..., None, None, :]
            + eye[:, None, :] * r[..., None, :, None]
            + eye[None, :, :] * r[..., :, None, None]
        )
        g3 = (-rrr / h**3 + dr / h**2) * g[..., None, None, None]
        out.append(g3)
    if order >= 4:
        rrrr = rrr[..., None] * r[..., None, None, None, :]
        E = eye
        # six delta * r * r terms over the index pairs (ab, ac, ad, bc, bd, cd)
        drr = (
            E[:, :, None, None] * rr[..., None, None, :, :]
            + E[:, None, :, None] * rr[..., None, :, None, :]
            + E[:, None, None, :] * rr[..., None, :, :, None]
            + E[None, :, :, None] * rr[..., :, None, None, :]
            + E[None, :, None, :] * rr[..., :, None, :, None]
            + E[None, None, :, :] * rr[..., :, :, None, None]
        )
        dd = (
            E[:, :, None, None] * E[None, None, :, :]
            + E[:, None, :, None] * E[None, :, None, :]
            + E[:, None, None, :] * E[None, :, :, None]
        )
        g4 = (rrrr / h**4 - drr / h**3 + dd / h**2) * g[..., None, None, None, None]
        out.append(g4)
    return out


@dataclass(frozen=True)
class KernelBlocks:
    """Kernel-derivative Gram blocks between row points and column points.

    Attributes:
        K11: (M d, N d) mixed first derivatives.
        K12: (M d, N d^2) one x and two y derivatives.
        K22: Optional (N d^2, N d^2) four-derivative block (full mode only).
        rows: (M, d) row points (anchors); equal to ``cols`` when square.
        cols: (N, d) column points (particles).
        bandwidth: Kernel bandwidth.
        mode: ``"reduced"`` or ``"full"``.
    """

    K11: np.ndarray
    K12: np.ndarray
    K22: Optional[np.ndarray]
    rows: np.ndarray
    cols: np.ndarray
    bandwidth: float
    mode: str

    @property
    def K21(self) -> np.ndarray:
        return self.K12.T

    @property
    def dim(self) -> int:
        return self.cols.shape[1]

    @property
    def n(self) -> int:
        return self.cols.shape[0]


def _blocks_between(z: np.ndarray, x: np.ndarray, h: float, full: bool):
    m, d = z.shape
    n = x.shape[0]
    r = z[:, None, :] - x[None, :, :]
    ders = gaussian_kernel_derivatives(r, h, order=4 if full else 3)
    g2, g3 = ders[2], ders[3]
    K11 = (-g2).transpose(0, 2, 1, 3).reshape(m * d, n * d)
    K12 = g3.transpose(0, 2, 1, 3, 4).reshape(m * d, n * d * d)
    K22 = None
    if full:
        K22 = ders[4].transpose(0, 2, 3, 1, 4, 5).reshape(m * d * d, n * d * d)
    return K11, K12, K22


def kernel_derivative_blocks(ensemble: ParticleEnsemble, kernel: KernelSpec, order: str = "reduced",
                             anchors=None, max_full_rows: int = FULL_MODE_MAX_ROWS) -> KernelBlocks:
    """Assemble the kernel-derivative Gram blocks.

    Args:
        ensemble: Particles (columns).
        kernel: Gaussian kernel settings.
        order: ``"reduced"`` for K11 and K12, ``"full"`` to add K22.
        anchors: Optional (M, d) row points; defaults to the particles.
        max_full_rows: Cap on N d^2 in full mode.

    Raises:
        CapacityError: If full mode would exceed ``max_full_rows``.
    """
    x = ensemble.positions
    z = x if anchors is None else as_points(anchors, x.shape[1])
    full = order == "full"
    if order not in ("reduced", "full"):
        raise InvalidConfigError(f"unknown block order {order!r}")
    if full:
        if anchors is not None:
            raise InvalidConfigError("full mode does not support anchors")
        rows = x.shape[0] * x.shape[1] ** 2
        if rows > max_full_rows:
            raise CapacityError(
                f"full mode needs a {rows}x{rows} block (cap {max_full_rows}); use reduced or sparse mode"
            )
    K11, K12, K22 = _blocks_between(z, x, kernel.bandwidth, full)
    return KernelBlocks(K11, K12, K22, z, x, kernel.bandwidth, order)


def assemble_rhs(ensemble: ParticleEnsemble, model: TargetModel):
    """Stacked right-hand sides v = [-grad f(x_n)] and e = [vec(I_d)]."""
    x = ensemble.positions
    n, d = x.shape
    v = -model.grad(x).reshape(n * d)
    e = np.tile(np.eye(d).reshape(d * d), n)
    return v, e


# ---------------------------------------------------------------------------
# Solves
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelDirection:
    """Coefficients and particle values of a kernelized Newton direction.

    Attributes:
        alpha: (M d,) first-order coefficients attached to the row points.
        beta: (M d^2,) second-order coefficients (zero outside full mode).
        field: (N, d) direction at the particles.
        anchors: (M, d) points the coefficients are attached to.
        bandwidth: Kernel bandwidth.
        flagged: True when a pseudo-inverse fallback was used.
        residual: Relative residual of the linear solve.
    """

    alpha: np.ndarray
    beta: np.ndarray
    field: np.ndarray
    anchors: np.ndarray
    bandwidth: float
    flagged: bool = False
    residual: float = 0.0

    def __call__(self, at) -> np.ndarray:
        return evaluate_kernel_direction(self, at)


def _stacked_hessian_apply(Hs: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Block-diagonal (stacked d x d) Hessians applied to the rows of ``M``."""
    n, d, _ = Hs.shape
    return np.einsum("nab,nbk->nak", Hs, M.reshape(n, d, -1)).reshape(n * d, -1)


def _check_hessians(Hs, n, d) -> np.ndarray:
    Hs = np.asarray(Hs, dtype=float)
    if Hs.shape != (n, d, d):
        raise InvalidInputError(f"expected stacked Hessians of shape {(n, d, d)}, got {Hs.shape}")
    return Hs


def _sym_solve(C: np.ndarray, rhs: np.ndarray):
    """Symmetric solve with pseudo-inverse fallback; returns (x, flagged)."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
            sol = scipy.linalg.solve(C, rhs, assume_a="sym")
        if np.all(np.isfinite(sol)):
            return sol, False
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, scipy.linalg.LinAlgWarning):
        pass
    return np.linalg.pinv(C, rcond=PINV_RCOND, hermitian=True) @ rhs, True


def _rel_residual(C, sol, rhs) -> float:
    return float(np.linalg.norm(C @ sol - rhs) / max(np.linalg.norm(rhs), np.finfo(float).tiny))


def solve_reduced(blocks: KernelBlocks, v, e, lam: float, Hs) -> KernelDirection:
    """Direction with second-order coefficients fixed to zero.

    alpha = (K12 K21 + K11 H K11 + N lam K11)^{-1} (K11 v + K12 e) and the
    field at the particles is K11 alpha. With anchors as row points the same
    formula uses the rectangular blocks and N lam K11(anchors, anchors).

    Args:
        blocks: Blocks from :func:`kernel_derivative_blocks`.
        v: (N d,) stacked negative gradients.
        e: (N d^2,) stacked identities.
        lam: Regularization weight.
        Hs: (N, d, d) Hessians (shift included).
    """
    n, d = blocks.n, blocks.dim
    Hs = _check_hessians(Hs, n, d)
    A, B = blocks.K11, blocks.K12
    if blocks.rows is blocks.cols:
        Kzz = A
    else:
        Kzz = _blocks_between(blocks.rows, blocks.rows, blocks.bandwidth, False)[0]
    AH = _stacked_hessian_apply(Hs, A.T).T
    C = B @ B.T + AH @ A.T + n * lam * Kzz
    rhs = A @ np.asarray(v, dtype=float) + B @ np.asarray(e, dtype=float)
    alpha, flagged = _sym_solve(C, rhs)
    field = (A.T @ alpha).reshape(n, d)
    return KernelDirection(alpha, np.zeros(blocks.rows.shape[0] * d * d), field, blocks.rows,
                           blocks.bandwidth, flagged, _rel_residual(C, alpha, rhs))


def solve_full(blocks: KernelBlocks, v, e, lam: float, Hs) -> KernelDirection:
    """Direction with both first- and second-order coefficients.

    With P = [K12; K22], Q = [K11; K21] and K = [[K11, K12], [K21, K22]],
    [alpha; beta] = (P P^T + Q H Q^T + N lam K)^+ K [v; e], using a
    pseudo-inverse with relative cutoff 1e-10.

    Raises:
        SolverStateError: If the blocks were assembled without K22.
    """
    if blocks.K22 is None:
        raise SolverStateError("full solve needs blocks assembled with order='full'")
    n, d = blocks.n, blocks.dim
    Hs = _check_hessians(Hs, n, d)
    K11, K12, K22 = blocks.K11, blocks.K12, blocks.K22
    K = np.block([[K11, K12], [K12.T, K22]])
    P = np.vstack([K12, K22])
    Q = np.vstack([K11, K12.T])
    QH = _stacked_hessian_apply(Hs, Q.T).T
    M = P @ P.T + QH @ Q.T + n * lam * K
    M = 0.5 * (M + M.T)
    rhs = K @ np.concatenate([np.asarray(v, dtype=float), np.asarray(e, dtype=float)])
    coef = np.linalg.pinv(M, rcond=PINV_RCOND, hermitian=True) @ rhs
    alpha, beta = coef[: n * d], coef[n * d:]
    field = (K11 @ alpha + K12 @ beta).reshape(n, d)
    return KernelDirection(alpha, beta, field, blocks.rows, blocks.bandwidth, True, _rel_residual(M, coef, rhs))


def solve_block_diagonal(blocks: KernelBlocks, v, e, lam: float, Hs) -> KernelDirection:
    """Direction from the block-diagonal part of the reduced system.

    Each d x d diagonal block
    C_nn = N lam K11_nn + sum_m (K12_nm K21_mn + K11_nm H_m K11_mn)
    is solved on its own and the field is K11 C_bd^{-1} (K11 v + K12 e).

    Raises:
        InvalidConfigError: If ``lam`` is not positive.
    """
    if not lam > 0:
        raise InvalidConfigError("block-diagonal solve requires lam > 0")
    if blocks.rows is not blocks.cols:
        raise InvalidConfigError("block-diagonal solve needs square blocks")
    n, d = blocks.n, blocks.dim
    Hs = _check_hessians(Hs, n, d)
    K11 = blocks.K11.reshape(n, d, n, d)
    K12 = blocks.K12.reshape(n, d, n, d * d)
    rhs = (blocks.K11 @ np.asarray(v, dtype=float) + blocks.K12 @ np.asarray(e, dtype=float)).reshape(n, d)
    diag11 = K11[np.arange(n), :, np.arange(n), :]
    C = (
        n * lam * diag11
        + np.einsum("namp,nbmp->nab", K12, K12)
        + np.einsum("nami,mij,nbmj->nab", K11, Hs, K11)
    )
    alpha = np.empty((n, d))
    flagged = False
    for i in range(n):
        sol, bad = _sym_solve(C[i], rhs[i])
        alpha[i] = sol
        flagged |= bad
    alpha = alpha.reshape(n * d)
    field = (blocks.K11 @ alpha).reshape(n, d)
    return KernelDirection(alpha, np.zeros(n * d * d), field, blocks.rows, blocks.bandwidth, flagged, 0.0)


def sparse_anchors(ensemble: ParticleEnsemble, m: int, seed: Optional[int] = None) -> np.ndarray:
    """Indices of ``m`` anchors drawn uniformly without replacement.

    ``m == N`` returns the identity ordering so the sparse solve coincides
    with :func:`solve_reduced`.

    Raises:
        InvalidConfigError: If ``m`` is not in [1, N].
    """
    n = ensemble.n
    if not 1 <= int(m) <= n:
        raise InvalidConfigError(f"anchor count must be in [1, {n}], got {m}")
    if int(m) == n:
        return np.arange(n)
    seed = ensemble.seed if seed is None else seed
    rng = keyed_rng(seed, ensemble.iteration, STREAM_ANCHORS)
    return np.sort(rng.choice(n, size=int(m), replace=False))


def solve_sparse(ensemble: ParticleEnsemble, kernel: KernelSpec, anchor_idx, v, e, lam: float, Hs) -> KernelDirection:
    """Reduced solve with the representation restricted to anchor particles."""
    idx = np.asarray(anchor_idx)
    z = ensemble.positions[idx]
    if len(idx) == ensemble.n and np.array_equal(idx, np.arange(ensemble.n)):
        blocks = kernel_derivative_blocks(ensemble, kernel, "reduced")
    else:
        blocks = kernel_derivative_blocks(ensemble, kernel, "reduced", anchors=z)
    return solve_reduced(blocks, v, e, lam, Hs)


def evaluate_kernel_direction(direction: KernelDirection, at) -> np.ndarray:
    """Evaluate the direction field at arbitrary (P, d) points."""
    z = direction.anchors
    m, d = z.shape
    y = as_points(at, d)
    r = z[:, None, :] - y[None, :, :]
    ders = gaussian_kernel_derivatives(r, direction.bandwidth, order=3)
    a = direction.alpha.reshape(m, d)
    b = direction.beta.reshape(m, d, d)
    # d/dy_j of d/dx_i k is -g_ij; d/dy_j of d/dx_i1 d/dx_i2 k is -g_i1 i2 j
    out = -np.einsum("mi,mpij->pj", a, ders[2])
    if np.any(b):
        out -= np.einsum("mab,mpabj->pj", b, ders[3])
    return out


MODES = ("reduced", "block-diagonal", "full", "sparse")


def kernel_direction(ensemble: ParticleEnsemble, model: TargetModel, kernel: KernelSpec, lam: float = DEFAULT_LAMBDA,
                     eps: float = 0.0, mode: str = "reduced", n_anchors: Optional[int] = None) -> DirectionField:
    """Kernelized Newton direction at the particles.

    Args:
        ensemble: Particles.
        model: Target.
        kernel: Gaussian kernel.
        lam: Regularization weight.
        eps: Hessian shift added to every particle Hessian.
        mode: One of ``reduced``, ``block-diagonal``, ``full``, ``sparse``.
        n_anchors: Anchor count for sparse mode (defaults to N // 4).

    Returns:
        Direction field whose payload is a :class:`KernelDirection`.
    """
    if mode not in MODES:
        raise InvalidConfigError(f"unknown kernel mode {mode!r}; available: {MODES}")
    v, e = assemble_rhs(ensemble, model)
    Hs = model.hess(ensemble.positions) + eps * np.eye(ensemble.dim)
    if mode == "sparse":
        m = n_anchors if n_anchors is not None else max(1, ensemble.n // 4)
        sol = solve_sparse(ensemble, kernel, sparse_anchors(ensemble, m), v, e, lam, Hs)
    else:
        blocks = kernel_derivative_blocks(ensemble, kernel, "full" if mode == "full" else "reduced")
        solver = {"reduced": solve_reduced, "block-diagonal": solve_block_diagonal, "full": solve_full}[mode]
        sol = solver(blocks, v, e, lam, Hs)
    return DirectionField(sol.field, payload=sol, flagged=sol.flagged)
