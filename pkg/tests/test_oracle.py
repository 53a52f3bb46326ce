"""Exact finite-distribution identities, checked against hand-solved values."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from mcdebias.oracle import (
    DegenerateFunctionalError,
    FiniteDistribution,
    LinearFunctional,
    discretized_gaussian,
    exact_estimand,
    inner,
    project_orthocomplement,
    random_case,
    reconstruct_rr,
    riesz_exact,
    run_identity_suite,
    sq_norm,
    verify_mixed_bias,
    verify_mu_decomposition,
    verify_sufficiency,
)


def two_point():
    dist = FiniteDistribution(
        support=np.array([[0.0], [1.0]]),
        probs=np.array([0.5, 0.5]),
        reg=np.array([0.0, 1.0]),
    )
    return dist, LinearFunctional(ell=np.array([-1.0, 1.0]))


def four_point():
    dist = FiniteDistribution(
        support=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]),
        probs=np.array([0.4, 0.1, 0.25, 0.25]),
        reg=np.array([1.0, 2.0, -1.0, 3.0]),
    )
    return dist, LinearFunctional(ell=np.array([-0.5, 0.5, -0.5, 0.5]))


class TestValidation:
    def test_rejects_nonpositive_probs(self):
        with pytest.raises(ValueError, match="strictly positive"):
            FiniteDistribution(support=np.array([[0.0], [1.0]]), probs=np.array([1.0, 0.0]))

    def test_rejects_unnormalized_probs(self):
        with pytest.raises(ValueError, match="sum"):
            FiniteDistribution(support=np.array([[0.0], [1.0]]), probs=np.array([0.5, 0.6]))

    def test_rejects_duplicate_support(self):
        with pytest.raises(ValueError, match="distinct"):
            FiniteDistribution(support=np.array([[1.0], [1.0]]), probs=np.array([0.5, 0.5]))

    def test_rejects_mismatched_reg(self):
        with pytest.raises(ValueError, match="reg"):
            FiniteDistribution(
                support=np.array([[0.0], [1.0]]),
                probs=np.array([0.5, 0.5]),
                reg=np.array([1.0]),
            )

    def test_rejects_zero_functional(self):
        with pytest.raises(DegenerateFunctionalError):
            LinearFunctional(ell=np.zeros(3))


class TestRieszExact:
    def test_two_point_representer(self):
        dist, functional = two_point()
        assert_allclose(riesz_exact(dist, functional), [-2.0, 2.0], rtol=0, atol=0)

    def test_four_point_representer(self):
        dist, functional = four_point()
        alpha = riesz_exact(dist, functional)
        assert_allclose(alpha, [-1.25, 5.0, -2.0, 2.0], rtol=0, atol=0)
        assert_allclose(sq_norm(dist, alpha), 5.125, rtol=0, atol=1e-15)

    def test_defining_property_random(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            dist, functional, _ = random_case(rng)
            alpha = riesz_exact(dist, functional)
            for _ in range(5):
                f = rng.standard_normal(dist.size)
                assert_allclose(inner(dist, alpha, f), functional(f), rtol=0, atol=1e-10)


class TestProjection:
    def test_two_point_projection(self):
        dist, functional = two_point()
        perp = project_orthocomplement(dist, functional, np.array([0.0, 1.0]))
        assert_allclose(perp, [0.5, 0.5], rtol=0, atol=1e-15)

    def test_four_point_projection(self):
        dist, functional = four_point()
        perp = project_orthocomplement(dist, functional, np.array([0.0, 1.0, 0.0, 1.0]))
        expected = np.array([10.0, 1.0, 16.0, 25.0]) / 41.0
        assert_allclose(perp, expected, rtol=0, atol=1e-15)

    def test_zero_moment_and_idempotent(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            dist, functional, beta = random_case(rng)
            perp = project_orthocomplement(dist, functional, beta)
            assert abs(functional(perp)) <= 1e-11
            again = project_orthocomplement(dist, functional, perp)
            assert_allclose(again, perp, rtol=0, atol=1e-12)

    def test_residual_orthogonal_to_zero_moment_functions(self):
        rng = np.random.default_rng(13)
        dist, functional, beta = random_case(rng)
        perp = project_orthocomplement(dist, functional, beta)
        g = beta - perp
        for _ in range(10):
            f = project_orthocomplement(dist, functional, rng.standard_normal(dist.size))
            assert abs(inner(dist, g, f)) <= 1e-10


class TestReconstruction:
    def test_matches_exact_representer(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            dist, functional, beta = random_case(rng)
            perp = project_orthocomplement(dist, functional, beta)
            recon = reconstruct_rr(dist, beta, perp, functional(beta))
            assert_allclose(recon, riesz_exact(dist, functional), rtol=0, atol=1e-9)

    def test_norm_identity(self):
        rng = np.random.default_rng(19)
        for _ in range(100):
            dist, functional, beta = random_case(rng)
            perp = project_orthocomplement(dist, functional, beta)
            lhs = np.sqrt(sq_norm(dist, riesz_exact(dist, functional)))
            rhs = abs(functional(beta)) / np.sqrt(sq_norm(dist, beta - perp))
            assert_allclose(lhs, rhs, rtol=0, atol=1e-9)

    def test_degenerate_direction_raises(self):
        dist, functional = two_point()
        beta = np.array([0.3, 0.3])
        perp = project_orthocomplement(dist, functional, beta)
        with pytest.raises(DegenerateFunctionalError):
            reconstruct_rr(dist, beta, perp, functional(beta))


class TestEstimandAndBias:
    def test_four_point_estimand(self):
        dist, functional = four_point()
        assert_allclose(exact_estimand(dist, functional), 2.5, rtol=0, atol=0)

    def test_mixed_bias_hand_case(self):
        # mu_hat = (1, 1), alpha_hat = (0, 2): both sides equal -1.
        dist, functional = two_point()
        lhs, rhs = verify_mixed_bias(
            dist, functional, np.array([1.0, 1.0]), np.array([0.0, 2.0])
        )
        assert_allclose(lhs, -1.0, rtol=0, atol=1e-15)
        assert_allclose(rhs, -1.0, rtol=0, atol=1e-15)

    def test_either_nuisance_exact_kills_bias(self):
        rng = np.random.default_rng(23)
        for _ in range(20):
            dist, functional, _ = random_case(rng)
            mu = dist.reg
            alpha = riesz_exact(dist, functional)
            lhs, _ = verify_mixed_bias(
                dist, functional, mu, alpha + rng.standard_normal(dist.size)
            )
            assert abs(lhs) <= 1e-10
            lhs, _ = verify_mixed_bias(
                dist, functional, mu + rng.standard_normal(dist.size), alpha
            )
            assert abs(lhs) <= 1e-10

    def test_both_sides_agree_random(self):
        rng = np.random.default_rng(29)
        for _ in range(50):
            dist, functional, _ = random_case(rng)
            mu_hat = dist.reg + rng.standard_normal(dist.size)
            alpha_hat = riesz_exact(dist, functional) + rng.standard_normal(dist.size)
            lhs, rhs = verify_mixed_bias(dist, functional, mu_hat, alpha_hat)
            assert_allclose(lhs, rhs, rtol=0, atol=1e-10)


class TestDecompositionAndSufficiency:
    def test_outcome_decomposition(self):
        rng = np.random.default_rng(31)
        for _ in range(50):
            dist, functional, beta = random_case(rng)
            assert verify_mu_decomposition(dist, functional, beta) <= 1e-10

    def test_sufficiency_random(self):
        rng = np.random.default_rng(37)
        for _ in range(50):
            dist, functional, beta = random_case(rng)
            grouped, exact = verify_sufficiency(dist, functional, beta)
            assert_allclose(grouped, exact, rtol=0, atol=1e-10)

    def test_sufficiency_groups_ties(self):
        # Two support points share the same residual value, so eta pools
        # their outcome means yet the estimand is unchanged.
        dist = FiniteDistribution(
            support=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]),
            probs=np.array([0.25, 0.25, 0.25, 0.25]),
            reg=np.array([0.0, 4.0, 2.0, 2.0]),
        )
        functional = LinearFunctional(ell=np.array([-0.5, 0.5, -0.5, 0.5]))
        beta = np.array([0.0, 1.0, 0.0, 1.0])
        grouped, exact = verify_sufficiency(dist, functional, beta)
        assert_allclose(exact, 2.0, rtol=0, atol=0)
        assert_allclose(grouped, exact, rtol=0, atol=1e-12)


class TestDerivativeFunctional:
    def test_projection_recovers_conditional_mean(self):
        # With a symmetric grid per covariate level, projecting beta(a) = a
        # lands exactly on the conditional treatment mean m(x).
        m = np.array([-1.0, 0.5, 2.0])
        wx = np.array([0.3, 0.45, 0.25])
        dist, functional, score = discretized_gaussian(m, wx, sigma=0.8)
        beta = dist.a.copy()
        perp = project_orthocomplement(dist, functional, beta)
        expected = m[dist.x[:, 0].astype(int)]
        assert_allclose(perp, expected, rtol=0, atol=1e-10)
        recon = reconstruct_rr(dist, beta, perp, functional(beta))
        assert_allclose(recon, -score, rtol=0, atol=1e-10)

    def test_shifted_alternative_violates_constraint(self):
        # The form 2a - m(x) differs from the projection by a multiple of
        # beta itself; its moment is 2 h(beta), not 0, so it cannot be the
        # zero-moment projection even though it has the same residual a - m.
        m = np.array([0.0, 1.0])
        wx = np.array([0.5, 0.5])
        dist, functional, _ = discretized_gaussian(m, wx, sigma=1.0)
        beta = dist.a.copy()
        alt = 2.0 * beta - m[dist.x[:, 0].astype(int)]
        h_beta = functional(beta)
        assert_allclose(functional(alt), 2.0 * h_beta, rtol=1e-9)
        assert abs(functional(alt)) > 1.9

    def test_quadrature_consistent_with_analytic_derivative(self):
        # Independent route: h(f) built from the score should match the
        # average analytic derivative under the discretized distribution.
        m = np.array([0.0, 1.5])
        wx = np.array([0.6, 0.4])
        dist, functional, _ = discretized_gaussian(m, wx, sigma=1.2, n_grid=401)
        a = dist.a
        f = np.sin(a) + 0.1 * a**2
        df = np.cos(a) + 0.2 * a
        expected = float(np.sum(dist.probs * df))
        assert_allclose(functional(f), expected, rtol=0, atol=5e-3)


class TestSerializationAndSampling:
    def test_json_round_trip_bit_exact(self):
        rng = np.random.default_rng(41)
        dist, _, _ = random_case(rng)
        clone = FiniteDistribution.from_json(dist.to_json())
        assert np.array_equal(clone.support, dist.support)
        assert np.array_equal(clone.probs, dist.probs)
        assert np.array_equal(clone.reg, dist.reg)

    def test_sampling_deterministic_and_on_support(self):
        dist, _ = four_point()
        y1, a1, x1 = dist.sample(64, np.random.default_rng(5))
        y2, a2, x2 = dist.sample(64, np.random.default_rng(5))
        assert np.array_equal(y1, y2) and np.array_equal(a1, a2) and np.array_equal(x1, x2)
        rows = np.column_stack([a1, x1])
        for row in rows:
            assert any(np.array_equal(row, s) for s in dist.support)

    def test_noise_variance_used(self):
        dist = FiniteDistribution(
            support=np.array([[0.0], [1.0]]),
            probs=np.array([0.5, 0.5]),
            reg=np.array([0.0, 0.0]),
            noise_var=np.array([0.0, 4.0]),
        )
        y, a, _ = dist.sample(4000, np.random.default_rng(9))
        assert np.allclose(y[a == 0.0], 0.0)
        assert 1.5 < np.std(y[a == 1.0]) < 2.5


class TestIdentitySuite:
    def test_all_identities_pass(self):
        report = run_identity_suite(n_random=200, seed=0)
        assert report.all_passed, report.format_table()

    def test_injected_error_is_caught(self):
        report = run_identity_suite(n_random=20, seed=0, inject_error=True)
        failed = {c.name for c in report.checks if not c.passed}
        assert "reconstruction_elementwise" in failed
        assert not report.all_passed
