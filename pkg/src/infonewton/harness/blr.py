"""Bayesian logistic regression: datasets, posterior targets and predictive metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit, log_expit

from ..core import STREAM_BATCH, InvalidConfigError, TargetModel, keyed_rng


@dataclass(frozen=True)
class BLRDataset:
    """Binary classification data split into train and test parts.

    Attributes:
        x_train: (n_train, d) features.
        y_train: (n_train,) labels in {0, 1}.
        x_test: (n_test, d) features.
        y_test: (n_test,) labels in {0, 1}.
        true_weights: Generating weights for synthetic data, else None.
    """

    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    true_weights: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("x_train", "x_test"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim != 2 or not np.all(np.isfinite(arr)):
                raise InvalidConfigError(f"{name} must be a finite 2D array")
            object.__setattr__(self, name, arr)
        for name in ("y_train", "y_test"):
            lab = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isin(lab, (0.0, 1.0))):
                raise InvalidConfigError(f"{name} must contain only 0/1 labels")
            object.__setattr__(self, name, lab)
        if self.x_train.shape[1] != self.x_test.shape[1]:
            raise InvalidConfigError("train and test feature dimensions differ")

    @property
    def dim(self) -> int:
        return self.x_train.shape[1]


def synthetic_dataset(dim: int = 5, n_train: int = 500, n_test: int = 500, seed: int = 0) -> BLRDataset:
    """Logistic data from a known weight vector with standard normal features."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    w = rng.normal(size=dim)
    x = rng.normal(size=(n_train + n_test, dim))
    y = (rng.random(n_train + n_test) < expit(x @ w)).astype(float)
    return BLRDataset(x[:n_train], y[:n_train], x[n_train:], y[n_train:], w)


def load_csv_dataset(path, test_fraction: float = 0.2, seed: int = 0) -> BLRDataset:
    """Read a CSV with a header row whose last column is a 0/1 label.

    Rows are shuffled with ``seed`` before splitting.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        rows = [r for r in reader if r]
    if not rows:
        raise InvalidConfigError(f"{path} has no data rows")
    try:
        data = np.array(rows, dtype=float)
    except ValueError as exc:
        raise InvalidConfigError(f"{path}: non-numeric or missing value ({exc})") from None
    if not np.all(np.isfinite(data)):
        raise InvalidConfigError(f"{path} contains missing values")
    order = np.random.default_rng(seed).permutation(len(data))
    data = data[order]
    n_test = int(round(test_fraction * len(data)))
    x, y = data[:, :-1], data[:, -1]
    return BLRDataset(x[n_test:], y[n_test:], x[:n_test], y[:n_test])


def _logistic_model(x: np.ndarray, y: np.ndarray, scale: float, prior_scale: float, name: str) -> TargetModel:
    """Negative log posterior scale * sum log(1 + exp(-s x^T w)) + |w|^2 / (2 prior^2), s = 2y - 1."""
    s = 2 * y - 1
    d = x.shape[1]
    prec = 1.0 / prior_scale**2

    def potential(w):
        m = (w @ x.T) * s  # (P, B) margins
        return -scale * log_expit(m).sum(axis=1) + 0.5 * prec * np.sum(w * w, axis=1)

    def gradient(w):
        m = (w @ x.T) * s
        return -scale * (expit(-m) * s) @ x + prec * w

    def hessian(w):
        p = expit(w @ x.T)
        c = scale * p * (1 - p)
        return np.einsum("pb,bi,bj->pij", c, x, x) + prec * np.eye(d)

    return TargetModel(potential, gradient, hessian, d, name=name, params={"prior_scale": prior_scale})


def build_blr_posterior(data: BLRDataset, prior_scale: float = 1.0, batch_size: Optional[int] = 100,
                        seed: int = 0) -> TargetModel:
    """Posterior over logistic-regression weights with mini-batched likelihood.

    The returned model evaluates the full-data posterior. Its ``refresh``
    hook gives the mini-batch model for an iteration, scaling the batch term
    by n_train / batch. The batch is drawn without replacement from a stream
    keyed by ``(seed, iteration)``.

    Args:
        data: Training data.
        prior_scale: Standard deviation of the isotropic Gaussian prior.
        batch_size: Mini-batch size; None or >= n_train uses all data.
        seed: Root seed of the batch stream.

    Raises:
        InvalidConfigError: If the batch is empty.
    """
    x, y = data.x_train, data.y_train
    n = x.shape[0]
    if batch_size is not None and int(batch_size) < 1:
        raise InvalidConfigError("mini-batch must be nonempty")
    full = _logistic_model(x, y, 1.0, prior_scale, "blr")
    if batch_size is None or int(batch_size) >= n:
        return full
    b = int(batch_size)

    def refresh(k: int) -> TargetModel:
        idx = keyed_rng(seed, k, STREAM_BATCH).choice(n, size=b, replace=False)
        return _logistic_model(x[idx], y[idx], n / b, prior_scale, "blr-batch")

    return TargetModel(full.potential, full.gradient, full.hessian, full.dim, name="blr", refresh=refresh,
                       params={"prior_scale": prior_scale, "batch_size": b})


def predictive_metrics(weights: np.ndarray, x: np.ndarray, y: np.ndarray) -> dict:
    """Accuracy and mean log-likelihood of the posterior-averaged predictive.

    The predictive probability is the average of sigmoid(x^T w) over the
    weight samples; a point is classified as 1 when it exceeds 0.5.
    """
    w = np.atleast_2d(weights)
    p = expit(x @ w.T).mean(axis=1)
    pred = (p > 0.5).astype(float)
    eps = np.finfo(float).tiny
    ll = y * np.log(np.maximum(p, eps)) + (1 - y) * np.log(np.maximum(1 - p, eps))
    return {"test_accuracy": float(np.mean(pred == y)), "test_loglik": float(np.mean(ll))}
