import numpy as np
import pytest

from infonewton.core import InvalidInputError, ParticleEnsemble, TargetModel, init_ensemble
from infonewton.gaussian import newton_direction_affine_1d
from infonewton.harness.targets import gauss1d, gaussian_target
from infonewton.newton_affine import (
    AffineDirection,
    BasisFunction,
    GeneralBasis,
    affine_direction,
    assemble_general_basis,
    assemble_quadratic_system,
    evaluate_affine,
    monomial_basis,
    solve_affine_direction,
    solve_general_basis,
)
from infonewton.score import ScoreEstimate


def _flat_model(d):
    return TargetModel(lambda x: np.zeros(x.shape[0]), lambda x: np.zeros_like(x),
                       lambda x: np.zeros((x.shape[0], d, d)), d)


def _loop_system(x, hess, v):
    """Reference assembly with explicit per-particle matrices."""
    n, d = x.shape
    H = np.zeros((2 * d, 2 * d))
    u = np.zeros(2 * d)
    for i in range(n):
        D = np.diag(x[i])
        A = hess[i]
        H[:d, :d] += D @ A @ D
        H[:d, d:] += D @ A
        H[d:, :d] += A @ D
        H[d:, d:] += A
        u[:d] += D @ v[i]
        u[d:] += v[i]
    H /= n
    H[:d, :d] += np.eye(d)
    return H, u / n


class TestAssembleQuadraticSystem:
    def test_single_particle_at_origin(self):
        ens = ParticleEnsemble(np.zeros((1, 1)))
        H, u = assemble_quadratic_system(ens, gauss1d(), ScoreEstimate(np.zeros((1, 1))))
        np.testing.assert_array_equal(H, np.eye(2))
        np.testing.assert_array_equal(u, [0.0, 0.0])

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(42)
        L = rng.normal(size=(3, 3))
        model = gaussian_target(rng.normal(size=3), L @ L.T + np.eye(3))
        ens = ParticleEnsemble(rng.normal(size=(25, 3)))
        xi = ScoreEstimate(rng.normal(size=(25, 3)))
        H, u = assemble_quadratic_system(ens, model, xi, eps=0.3)
        Hr, ur = _loop_system(ens.positions, model.hess(ens.positions) + 0.3 * np.eye(3),
                              model.grad(ens.positions) + xi.values)
        np.testing.assert_allclose(H, Hr, rtol=1e-13, atol=1e-13)
        np.testing.assert_allclose(u, ur, rtol=1e-13, atol=1e-13)

    def test_exactly_symmetric(self):
        rng = np.random.default_rng(42)
        ens = ParticleEnsemble(rng.normal(size=(50, 4)))
        model = gaussian_target(np.zeros(4), np.diag([1.0, 2.0, 3.0, 4.0]))
        H, _ = assemble_quadratic_system(ens, model, ScoreEstimate(np.zeros((50, 4))))
        np.testing.assert_array_equal(H, H.T)

    def test_population_limit(self):
        ens = init_ensemble(200_000, 2.0, 0.25, seed=42)
        model = gauss1d()
        xi = ScoreEstimate(-4 * (ens.positions - 2))
        H, u = assemble_quadratic_system(ens, model, xi)
        np.testing.assert_allclose(H, [[5.25, 2.0], [2.0, 1.0]], atol=0.02)
        np.testing.assert_allclose(u, [3.25, 2.0], atol=0.02)

    def test_flat_potential_with_shift(self):
        rng = np.random.default_rng(42)
        x = rng.normal(size=(30, 2))
        H, _ = assemble_quadratic_system(ParticleEnsemble(x), _flat_model(2), ScoreEstimate(np.zeros_like(x)),
                                         eps=10.0)
        m2 = np.mean(x**2, axis=0)
        m1 = np.mean(x, axis=0)
        np.testing.assert_allclose(H[:2, :2], np.eye(2) + 10 * np.diag(m2), rtol=1e-13)
        np.testing.assert_allclose(H[:2, 2:], 10 * np.diag(m1), rtol=1e-13, atol=1e-15)
        np.testing.assert_allclose(H[2:, 2:], 10 * np.eye(2), rtol=1e-13)

    def test_psd_under_convexity(self):
        rng = np.random.default_rng(42)
        ens = ParticleEnsemble(rng.normal(size=(40, 3)))
        model = gaussian_target(np.zeros(3), np.diag([0.5, 1.0, 5.0]))
        H, _ = assemble_quadratic_system(ens, model, ScoreEstimate(np.zeros((40, 3))))
        z = rng.normal(size=(1000, 6))
        assert np.all(np.einsum("ka,ab,kb->k", z, H, z) >= 0)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            assemble_quadratic_system(ParticleEnsemble(np.zeros((3, 1))), gauss1d(), ScoreEstimate(np.zeros((2, 1))))


class TestSolveAffineDirection:
    def test_population_system(self):
        d = solve_affine_direction(np.array([[5.25, 2.0], [2.0, 1.0]]), np.array([3.25, 2.0]), ridge=0.0)
        np.testing.assert_allclose(d.s, [0.6], atol=1e-12)
        np.testing.assert_allclose(d.b, [-3.2], atol=1e-12)
        assert not d.flagged

    def test_zero_rhs(self):
        d = solve_affine_direction(np.eye(4), np.zeros(4), ridge=0.0)
        np.testing.assert_array_equal(np.concatenate([d.s, d.b]), np.zeros(4))

    def test_identity_system(self):
        d = solve_affine_direction(np.eye(6), np.ones(6), ridge=0.0)
        np.testing.assert_allclose(d.s, -np.ones(3))
        np.testing.assert_allclose(d.b, -np.ones(3))

    def test_residual_bound(self):
        rng = np.random.default_rng(42)
        L = rng.normal(size=(8, 8))
        H = L @ L.T + np.eye(8)
        u = rng.normal(size=8)
        d = solve_affine_direction(H, u, ridge=0.0)
        sol = np.concatenate([d.s, d.b])
        assert np.linalg.norm(H @ sol + u) <= 1e-10 * (1 + np.linalg.norm(u))

    def test_singular_falls_back(self):
        H = np.array([[1.0, 1.0], [1.0, 1.0]])
        d = solve_affine_direction(H, np.array([1.0, 1.0]), ridge=0.0)
        assert d.flagged
        np.testing.assert_allclose(H @ np.concatenate([d.s, d.b]), [-1.0, -1.0], atol=1e-10)

    def test_linearity_in_rhs(self):
        rng = np.random.default_rng(42)
        H = np.diag([2.0, 3.0, 4.0, 5.0])
        u = rng.normal(size=4)
        a = solve_affine_direction(H, u, ridge=0.0)
        b = solve_affine_direction(H, 2 * u, ridge=0.0)
        np.testing.assert_allclose(b.s, 2 * a.s, rtol=1e-14)
        np.testing.assert_allclose(b.b, 2 * a.b, rtol=1e-14)


class TestEvaluateAffine:
    def test_zero_direction(self):
        d = AffineDirection(np.zeros(2), np.zeros(2))
        np.testing.assert_array_equal(evaluate_affine(d, np.ones((3, 2))), np.zeros((3, 2)))

    def test_values(self):
        d = AffineDirection(np.array([0.6]), np.array([-3.2]))
        np.testing.assert_allclose(evaluate_affine(d, [[2.0], [16 / 3]]), [[-2.0], [0.0]], atol=1e-14)


class TestAffineDirectionFinite:
    def test_recovers_gaussian_newton_direction(self):
        ens = init_ensemble(20_000, 2.0, 0.25, seed=42)
        xi = ScoreEstimate(-4 * (ens.positions - 2))
        field = affine_direction(ens, gauss1d(), xi)
        s, b = field.payload.s[0], field.payload.b[0]
        slope, intercept = newton_direction_affine_1d(2.0, 0.25, 0.0, 1.0)
        assert abs(s - slope) < 0.05
        assert abs(b - intercept) < 0.05

    def test_diagonal_2d_per_coordinate(self):
        mean = np.array([1.0, -1.0])
        var = np.array([0.5, 2.0])
        ens = init_ensemble(20_000, mean, np.diag(var), seed=42)
        target_var = np.array([1.0, 0.5])
        model = gaussian_target(np.zeros(2), np.diag(target_var))
        xi = ScoreEstimate(-(ens.positions - mean) / var)
        payload = affine_direction(ens, model, xi).payload
        for i in range(2):
            slope, intercept = newton_direction_affine_1d(mean[i], var[i], 0.0, target_var[i])
            assert abs(payload.s[i] - slope) < 0.05
            assert abs(payload.b[i] - intercept) < 0.05


def _transform(d):
    """Map [s; b] to monomial-basis coefficients [b; s / 2]."""
    T = np.zeros((2 * d, 2 * d))
    T[:d, d:] = np.eye(d)
    T[d:, :d] = 0.5 * np.eye(d)
    return T


class TestGeneralBasis:
    def test_monomials_reproduce_quadratic_system(self):
        rng = np.random.default_rng(42)
        ens = ParticleEnsemble(rng.normal(size=(30, 2)))
        model = gaussian_target([0.5, -0.5], [[1.0, 0.3], [0.3, 2.0]])
        xi = ScoreEstimate(rng.normal(size=(30, 2)))
        H, u = assemble_quadratic_system(ens, model, xi, eps=0.1)
        BD, c = assemble_general_basis(ens, model, xi, 0.1, monomial_basis(2))
        T = _transform(2)
        np.testing.assert_allclose(T.T @ BD @ T, H, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(T.T @ c, u, rtol=1e-12, atol=1e-12)

    def test_monomial_solution_maps_to_affine(self):
        rng = np.random.default_rng(42)
        ens = ParticleEnsemble(rng.normal(1.0, 0.7, size=(200, 1)))
        xi = ScoreEstimate(rng.normal(size=(200, 1)))
        H, u = assemble_quadratic_system(ens, gauss1d(), xi)
        aff = solve_affine_direction(H, u, ridge=0.0)
        a, _ = solve_general_basis(*assemble_general_basis(ens, gauss1d(), xi, 0.0, monomial_basis(1)))
        np.testing.assert_allclose(a, [aff.b[0], aff.s[0] / 2], rtol=1e-10)

    def test_linear_basis_quadratic_target(self):
        rng = np.random.default_rng(42)
        ens = ParticleEnsemble(rng.normal(size=(20, 3)))
        cov = np.diag([1.0, 2.0, 4.0])
        model = gaussian_target(np.zeros(3), cov)
        lin = GeneralBasis(monomial_basis(3).functions[:3])
        BD, _ = assemble_general_basis(ens, model, ScoreEstimate(np.zeros((20, 3))), 0.5, lin)
        np.testing.assert_allclose(BD, np.linalg.inv(cov) + 0.5 * np.eye(3), rtol=1e-13)

    def test_constant_function_is_unidentifiable(self):
        const = BasisFunction(lambda x: np.ones(x.shape[0]), lambda x: np.zeros_like(x),
                              lambda x: np.zeros((x.shape[0], x.shape[1], x.shape[1])))
        basis = GeneralBasis([const] + list(monomial_basis(1).functions))
        rng = np.random.default_rng(42)
        ens = ParticleEnsemble(rng.normal(size=(10, 1)))
        BD, c = assemble_general_basis(ens, gauss1d(), ScoreEstimate(rng.normal(size=(10, 1))), 0.0, basis)
        np.testing.assert_array_equal(BD[0], 0.0)
        np.testing.assert_array_equal(BD[:, 0], 0.0)
        assert c[0] == 0.0
        np.testing.assert_array_equal(BD, BD.T)
