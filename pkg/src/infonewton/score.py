"""Kernel density score estimation and bandwidth selection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict

import numpy as np
from scipy.spatial.distance import pdist
from scipy.special import logsumexp

from .core import (
    DegenerateBandwidthError,
    InvalidConfigError,
    InvalidInputError,
    ParticleEnsemble,
    as_points,
)

H_MIN = 1e-8


@dataclass(frozen=True)
class KernelSpec:
    """Isotropic Gaussian kernel k(x, y) = (2 pi h)^(-d/2) exp(-|x - y|^2 / (2 h)).

    Attributes:
        bandwidth: Squared length scale h.
        family: Kernel family; only ``"gaussian"`` is available.
    """

    bandwidth: float
    family: str = "gaussian"

    def __post_init__(self):
        if self.family != "gaussian":
            raise InvalidConfigError(f"unsupported kernel family {self.family!r}")
        if not (np.isfinite(self.bandwidth) and self.bandwidth > 0):
            raise InvalidConfigError(f"bandwidth must be positive, got {self.bandwidth}")

    def __call__(self, x, y) -> np.ndarray:
        """Gram matrix between point sets ``x`` (M, d) and ``y`` (N, d)."""
        x = as_points(x)
        y = as_points(y, x.shape[1])
        d = x.shape[1]
        sq = np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=-1)
        return (2 * np.pi * self.bandwidth) ** (-d / 2) * np.exp(-sq / (2 * self.bandwidth))


@dataclass(frozen=True)
class ScoreEstimate:
    """Estimated score at a set of query points.

    Attributes:
        values: (M, d) score vectors.
        flagged: Boolean mask of rows where the density estimate underflowed
            and a zero vector was returned.
    """

    values: np.ndarray
    flagged: np.ndarray = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(vals)):
            raise InvalidInputError("score estimate has non-finite entries")
        object.__setattr__(self, "values", vals)
        if self.flagged is None:
            object.__setattr__(self, "flagged", np.zeros(vals.shape[0], dtype=bool))


def median_bandwidth(ensemble: ParticleEnsemble) -> float:
    """Median heuristic h = med^2 / log N.

    ``med`` is the median of the pairwise Euclidean distances.

    Raises:
        InvalidInputError: If the ensemble has a single particle.
        DegenerateBandwidthError: If all particles coincide.
    """
    x = ensemble.positions
    n = x.shape[0]
    if n < 2:
        raise InvalidInputError("median bandwidth needs at least two particles")
    med = float(np.median(pdist(x)))
    if med <= 0.0:
        raise DegenerateBandwidthError("all pairwise distances are zero")
    return med**2 / np.log(n)


def median_bandwidth_or_floor(ensemble: ParticleEnsemble, h_min: float = H_MIN) -> float:
    """Median bandwidth clipped below at ``h_min``; collapsed or single-particle
    ensembles get ``h_min``."""
    try:
        return max(median_bandwidth(ensemble), h_min)
    except (DegenerateBandwidthError, InvalidInputError):
        return h_min


# Selectors map an ensemble to a bandwidth. Register new selectors here.
BANDWIDTH_SELECTORS: Dict[str, Callable[[ParticleEnsemble], float]] = {
    "median": median_bandwidth_or_floor,
}


def select_bandwidth(ensemble: ParticleEnsemble, selector="median") -> float:
    """Resolve a bandwidth from a selector name, a callable or a fixed value."""
    if callable(selector):
        return max(float(selector(ensemble)), H_MIN)
    if isinstance(selector, str):
        try:
            return BANDWIDTH_SELECTORS[selector](ensemble)
        except KeyError:
            raise InvalidConfigError(
                f"unknown bandwidth selector {selector!r}; available: {sorted(BANDWIDTH_SELECTORS)}"
            ) from None
    h = float(selector)
    if not h > 0:
        raise InvalidConfigError(f"fixed bandwidth must be positive, got {h}")
    return h


def kde_score(ensemble: ParticleEnsemble, kernel: KernelSpec, at=None) -> ScoreEstimate:
    """Gradient of the log kernel density estimate.

    xi(x) = sum_i grad_x k(x, x_i) / sum_i k(x, x_i), which for the Gaussian
    kernel is the softmax-weighted mean of (x_i - x) / h. Weights are formed
    with log-sum-exp so far-apart clouds do not overflow.

    Args:
        ensemble: Particles defining the density estimate.
        kernel: Gaussian kernel settings.
        at: (M, d) query points, defaulting to the particles.

    Returns:
        Score estimate at the queries. Rows whose largest kernel value
        underflows to zero are flagged and set to zero.
    """
    x = ensemble.positions
    q = x if at is None else as_points(at, x.shape[1])
    h = kernel.bandwidth
    d = x.shape[1]
    sq = np.sum((q[:, None, :] - x[None, :, :]) ** 2, axis=-1)
    logk = -sq / (2 * h)
    lse = logsumexp(logk, axis=1, keepdims=True)
    w = np.exp(logk - lse)
    vals = (w @ x - q) / h
    # the normalized density at the query underflows when even the nearest
    # particle contributes nothing in double precision
    log_density = lse[:, 0] - np.log(x.shape[0]) - 0.5 * d * np.log(2 * np.pi * h)
    flagged = log_density < np.log(np.finfo(float).tiny)
    vals[flagged] = 0.0
    return ScoreEstimate(vals, flagged)


def gaussian_moment_score(ensemble: ParticleEnsemble, at=None, ridge: float = 0.0) -> ScoreEstimate:
    """Score of the Gaussian matched to the ensemble mean and covariance.

    Exact in the population limit for Gaussian ensembles, which makes it the
    reference score for Gaussian-family experiments.
    """
    x = ensemble.positions
    q = x if at is None else as_points(at, x.shape[1])
    mu = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False, bias=True)) + ridge * np.eye(x.shape[1])
    return ScoreEstimate(-np.linalg.solve(cov, (q - mu).T).T)


def estimate_score(ensemble: ParticleEnsemble, method: str = "kde", bandwidth=None, model=None) -> ScoreEstimate:
    """Dispatch to a score estimator by name.

    Args:
        ensemble: Particles.
        method: ``"kde"``, ``"gaussian"`` (moment matched) or ``"target"``
            (the model's exact target score, only meaningful at equilibrium).
        bandwidth: Bandwidth for ``"kde"``, selector name or value.
        model: Target model, required for ``"target"``.
    """
    if method == "kde":
        h = select_bandwidth(ensemble, "median" if bandwidth is None else bandwidth)
        return kde_score(ensemble, KernelSpec(h))
    if method == "gaussian":
        return gaussian_moment_score(ensemble)
    if method == "target":
        if model is None or model.exact_score is None:
            raise InvalidConfigError("target score requested but the model has no exact score")
        return ScoreEstimate(model.exact_score(ensemble.positions))
    raise InvalidConfigError(f"unknown score method {method!r}")
