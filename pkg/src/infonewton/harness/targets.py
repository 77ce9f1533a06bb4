"""Built-in target densities, registered by name."""

from __future__ import annotations

from typing import Callable, Dict

import numpy as np

from ..core import InvalidConfigError, TargetModel, is_spd


def gaussian_target(mean=(0.0, 0.0), cov=1.0, name: str = "gaussNd") -> TargetModel:
    """Gaussian target with f(x) = 1/2 (x - mean)^T cov^{-1} (x - mean)."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    d = mean.shape[0]
    cov = np.asarray(cov, dtype=float)
    cov = cov * np.eye(d) if cov.ndim == 0 else np.atleast_2d(cov)
    if cov.shape != (d, d) or not is_spd(cov):
        raise InvalidConfigError("Gaussian target covariance must be SPD and match the mean")
    prec = np.linalg.inv(cov)
    prec = 0.5 * (prec + prec.T)

    def potential(x):
        r = x - mean
        return 0.5 * np.einsum("na,ab,nb->n", r, prec, r)

    def gradient(x):
        return (x - mean) @ prec

    def hessian(x):
        return np.broadcast_to(prec, (x.shape[0], d, d)).copy()

    return TargetModel(potential, gradient, hessian, d, exact_score=lambda x: -gradient(x), name=name,
                       params={"mean": mean, "cov": cov})


def gauss1d(mean: float = 0.0, var: float = 1.0) -> TargetModel:
    return gaussian_target([mean], [[var]], name="gauss1d")


def double_well() -> TargetModel:
    """f(x) = 1/2 (x^2 - 1)^2 in one dimension."""

    def potential(x):
        return 0.5 * (x[:, 0] ** 2 - 1) ** 2

    def gradient(x):
        return 2 * x**3 - 2 * x

    def hessian(x):
        return (6 * x**2 - 2)[:, :, None]

    return TargetModel(potential, gradient, hessian, 1, name="double-well")


def bimodal2d(radius: float = 3.0, sharp: float = 2.0) -> TargetModel:
    """Ring of the given radius modulated by two bumps at x_1 = +-radius.

    rho(x) ~ exp(-2(|x| - 3)^2) [exp(-2(x_1 - 3)^2) + exp(-2(x_1 + 3)^2)].
    """
    R, c = radius, sharp

    def _mix(x1):
        a = -c * (x1 - R) ** 2
        b = -c * (x1 + R) ** 2
        m = np.maximum(a, b)
        lse = m + np.log(np.exp(a - m) + np.exp(b - m))
        p = np.exp(a - lse)
        return lse, p, 1 - p

    def potential(x):
        r = np.linalg.norm(x, axis=1)
        lse, _, _ = _mix(x[:, 0])
        return c * (r - R) ** 2 - lse

    def gradient(x):
        r = np.maximum(np.linalg.norm(x, axis=1), 1e-300)
        _, p, q = _mix(x[:, 0])
        g = (2 * c * (r - R) / r)[:, None] * x
        da = -2 * c * (x[:, 0] - R)
        db = -2 * c * (x[:, 0] + R)
        g[:, 0] -= p * da + q * db
        return g

    def hessian(x):
        r = np.maximum(np.linalg.norm(x, axis=1), 1e-300)
        _, p, q = _mix(x[:, 0])
        xx = x[:, :, None] * x[:, None, :]
        eye = np.eye(2)
        H = 2 * c * (xx / r[:, None, None] ** 2 + ((r - R) / r)[:, None, None] * (eye - xx / r[:, None, None] ** 2))
        # second derivative of -logsumexp: -(p a'' + q b'' + p q (a' - b')^2)
        H[:, 0, 0] += 2 * c - p * q * (4 * c * R) ** 2
        return H

    return TargetModel(potential, gradient, hessian, 2, name="bimodal2d", params={"radius": R, "sharp": c})


def double_banana(y: float = np.log(30.0), sigma: float = 0.3, gauss_newton: bool = False) -> TargetModel:
    """Posterior exp(-|x|^2 / 2 - (y - F(x))^2 / (2 sigma^2)) with
    F(x) = log((1 - x_1)^2 + 100 (x_2 - x_1^2)^2).

    The exact Hessian is strongly indefinite away from the two ridges. With
    ``gauss_newton`` the Hessian drops the (F - y) F'' term and is always SPD.
    """
    s2 = sigma**2

    def _parts(x):
        x1, x2 = x[:, 0], x[:, 1]
        w = x2 - x1**2
        q = (1 - x1) ** 2 + 100 * w**2
        dq = np.stack([-2 * (1 - x1) - 400 * x1 * w, 200 * w], axis=1)
        d2q = np.empty((x.shape[0], 2, 2))
        d2q[:, 0, 0] = 2 - 400 * w + 800 * x1**2
        d2q[:, 0, 1] = d2q[:, 1, 0] = -400 * x1
        d2q[:, 1, 1] = 200.0
        return q, dq, d2q

    def potential(x):
        q, _, _ = _parts(x)
        return 0.5 * np.sum(x * x, axis=1) + (np.log(q) - y) ** 2 / (2 * s2)

    def gradient(x):
        q, dq, _ = _parts(x)
        F = np.log(q)
        return x + ((F - y) / (s2 * q))[:, None] * dq

    def hessian(x):
        q, dq, d2q = _parts(x)
        F = np.log(q)
        dF = dq / q[:, None]
        outer = dF[:, :, None] * dF[:, None, :]
        if gauss_newton:
            return np.eye(2) + outer / s2
        d2F = d2q / q[:, None, None] - outer
        return np.eye(2) + (outer + (F - y)[:, None, None] * d2F) / s2

    return TargetModel(potential, gradient, hessian, 2, name="double-banana",
                       params={"y": y, "sigma": sigma, "gauss_newton": gauss_newton})


def _blr_synthetic(**params) -> TargetModel:
    from .blr import build_blr_posterior, synthetic_dataset

    data = synthetic_dataset(**{k: v for k, v in params.items() if k in ("dim", "n_train", "n_test", "seed")})
    kw = {k: v for k, v in params.items() if k in ("prior_scale", "batch_size")}
    return build_blr_posterior(data, seed=int(params.get("seed", 0)), **kw)


TARGETS: Dict[str, Callable[..., TargetModel]] = {
    "gauss1d": gauss1d,
    "gaussNd": gaussian_target,
    "double-well": double_well,
    "bimodal2d": bimodal2d,
    "double-banana": double_banana,
    "blr-synthetic": _blr_synthetic,
}


def build_target(name: str, params: dict = None) -> TargetModel:
    """Construct a registered target by name.

    Raises:
        InvalidConfigError: If the name is unknown or parameters are invalid.
    """
    try:
        factory = TARGETS[name]
    except KeyError:
        raise InvalidConfigError(f"unknown target {name!r}; available: {sorted(TARGETS)}") from None
    try:
        return factory(**(params or {}))
    except TypeError as exc:
        raise InvalidConfigError(f"bad parameters for target {name!r}: {exc}") from None
