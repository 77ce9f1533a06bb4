import numpy as np
import pytest

from infonewton.core import DegenerateBandwidthError, InvalidConfigError, InvalidInputError, ParticleEnsemble
from infonewton.score import (
    H_MIN,
    KernelSpec,
    estimate_score,
    kde_score,
    median_bandwidth,
    median_bandwidth_or_floor,
    select_bandwidth,
)


def _ens(x):
    return ParticleEnsemble(np.asarray(x, dtype=float).reshape(len(x), -1))


class TestKernelSpec:
    def test_gram_normalization(self):
        k = KernelSpec(1.0)
        np.testing.assert_allclose(k(np.zeros((1, 1)), np.zeros((1, 1))), [[1 / np.sqrt(2 * np.pi)]])

    def test_rejects_nonpositive_bandwidth(self):
        with pytest.raises(InvalidConfigError):
            KernelSpec(0.0)


class TestMedianBandwidth:
    def test_two_points(self):
        assert median_bandwidth(_ens([0.0, 1.0])) == pytest.approx(1 / np.log(2), rel=1e-14)

    def test_scaling(self):
        rng = np.random.default_rng(42)
        x = rng.normal(size=(30, 2))
        h1 = median_bandwidth(ParticleEnsemble(x))
        h2 = median_bandwidth(ParticleEnsemble(3.0 * x))
        assert h2 == pytest.approx(9.0 * h1, rel=1e-12)

    def test_standard_normal_range(self):
        rng = np.random.default_rng(42)
        h = median_bandwidth(_ens(rng.normal(size=500)))
        assert 0.1 <= h <= 1.0

    def test_collapsed_ensemble(self):
        with pytest.raises(DegenerateBandwidthError):
            median_bandwidth(_ens([1.0, 1.0, 1.0]))
        assert median_bandwidth_or_floor(_ens([1.0, 1.0])) == H_MIN

    def test_single_particle(self):
        with pytest.raises(InvalidInputError):
            median_bandwidth(_ens([1.0]))


class TestSelectBandwidth:
    def test_fixed_value_and_callable(self):
        ens = _ens([0.0, 1.0])
        assert select_bandwidth(ens, 0.3) == 0.3
        assert select_bandwidth(ens, lambda e: 0.7) == 0.7

    def test_unknown_selector(self):
        with pytest.raises(InvalidConfigError):
            select_bandwidth(_ens([0.0, 1.0]), "brownian-motion")


class TestKdeScore:
    def test_single_particle(self):
        q = np.linspace(-3, 3, 7)[:, None]
        xi = kde_score(_ens([0.0]), KernelSpec(1.0), at=q)
        np.testing.assert_allclose(xi.values, -q, atol=1e-15)

    def test_symmetric_cloud_mode(self):
        xi = kde_score(_ens([-2.0, -1.0, 1.0, 2.0]), KernelSpec(0.5), at=[[0.0]])
        np.testing.assert_allclose(xi.values, [[0.0]], atol=1e-15)

    def test_matches_log_kde_gradient(self):
        rng = np.random.default_rng(42)
        x = rng.normal(size=(40, 2))
        h = 0.4
        q = rng.normal(size=(5, 2))

        def log_kde(p):
            sq = np.sum((p[None, :] - x) ** 2, axis=1)
            return np.log(np.mean(np.exp(-sq / (2 * h))))

        step = 1e-6
        fd = np.array([[(log_kde(p + step * e) - log_kde(p - step * e)) / (2 * step) for e in np.eye(2)] for p in q])
        np.testing.assert_allclose(kde_score(ParticleEnsemble(x), KernelSpec(h), at=q).values, fd, atol=1e-7)

    def test_gaussian_samples_mse(self):
        rng = np.random.default_rng(42)
        ens = _ens(2 + 0.5 * rng.normal(size=5000))
        xi = estimate_score(ens, "kde")
        mse = np.mean((xi.values[:, 0] + (ens.positions[:, 0] - 2) / 0.25) ** 2)
        assert mse < 0.5

    def test_translation_equivariance(self):
        rng = np.random.default_rng(42)
        x = rng.normal(size=(20, 3))
        q = rng.normal(size=(4, 3))
        t = np.array([5.0, -2.0, 100.0])
        a = kde_score(ParticleEnsemble(x), KernelSpec(0.3), at=q).values
        b = kde_score(ParticleEnsemble(x + t), KernelSpec(0.3), at=q + t).values
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_wide_cloud_no_overflow(self):
        x = np.array([[-500.0], [500.0]])
        xi = kde_score(ParticleEnsemble(x), KernelSpec(1e-6), at=[[-500.0], [0.0], [500.0]])
        assert np.all(np.isfinite(xi.values))

    def test_far_query_flagged(self):
        xi = kde_score(_ens([0.0, 0.1]), KernelSpec(1e-4), at=[[0.05], [50.0]])
        np.testing.assert_array_equal(xi.flagged, [False, True])
        np.testing.assert_array_equal(xi.values[1], [0.0])


class TestEstimateScore:
    def test_gaussian_moment_score(self):
        rng = np.random.default_rng(42)
        ens = _ens(1 + 2 * rng.normal(size=100_000))
        xi = estimate_score(ens, "gaussian")
        np.testing.assert_allclose(xi.values[:5, 0], -(ens.positions[:5, 0] - 1) / 4, atol=0.02)

    def test_target_requires_model(self):
        with pytest.raises(InvalidConfigError):
            estimate_score(_ens([0.0, 1.0]), "target")

    def test_unknown_method(self):
        with pytest.raises(InvalidConfigError):
            estimate_score(_ens([0.0, 1.0]), "svgd")
