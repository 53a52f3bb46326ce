"""Estimator algebra against hand-computed values and exact identities."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from mcdebias import oracle
from mcdebias.estimators import (
    DegenerateRieszError,
    EstimateReport,
    FittedNuisances,
    direct,
    dr,
    estimate_all,
    ipw,
    moment_identity_diag,
    perp_dr,
    rr_from_beta_perp,
    tmle_linear,
)
from mcdebias.moments import (
    DifferentiableFunction,
    MissingDerivativeError,
    ade,
    ate,
    beta_default,
    induced_functional,
)
from mcdebias.scenarios import Dataset


def const_fn(c, slope=0.0):
    return DifferentiableFunction(
        fn=lambda a, x: np.full_like(a, c) + slope * a,
        da=lambda a, x: np.full_like(a, slope),
    )


def toy_data():
    return Dataset(y=[2.0, 0.0], a=[1.0, 0.0], x=np.zeros((2, 1)))


def toy_nuisances(beta_perp=0.5):
    return FittedNuisances(
        moment=ate(),
        mu_hat=const_fn(0.0, slope=1.0),
        beta=beta_default(ate()),
        beta_perp_hat=const_fn(beta_perp),
    )


class TestToyValues:
    def test_direct(self):
        report = direct(toy_nuisances(), toy_data())
        assert report.psi_hat == 1.0
        assert report.std_error == 0.0
        assert report.naive_se

    def test_rr_reconstruction(self):
        rr = rr_from_beta_perp(toy_nuisances(), toy_data())
        vals = rr.value(np.array([1.0, 0.0]), np.zeros((2, 1)))
        assert_allclose(vals, [2.0, -2.0], rtol=0, atol=1e-14)
        assert_allclose(rr.scale_factor, 4.0, rtol=0, atol=1e-14)
        assert not rr.degenerate

    def test_ipw(self):
        rr = rr_from_beta_perp(toy_nuisances(), toy_data())
        report = ipw(rr, toy_data())
        assert_allclose(report.psi_hat, 2.0, rtol=0, atol=1e-14)
        assert report.naive_se

    def test_dr_point_and_se(self):
        nuis = toy_nuisances()
        data = toy_data()
        rr = rr_from_beta_perp(nuis, data)
        report = dr(nuis, rr, data)
        assert_allclose(report.psi_hat, 2.0, rtol=0, atol=1e-14)
        assert_allclose(report.std_error, 1.0, rtol=0, atol=1e-14)
        assert_allclose(report.mean_bias_correction, 1.0, rtol=0, atol=1e-14)
        assert not report.naive_se

    def test_tmle(self):
        nuis = toy_nuisances()
        data = toy_data()
        rr = rr_from_beta_perp(nuis, data)
        report = tmle_linear(nuis, rr, data)
        assert_allclose(report.psi_hat, 2.0, rtol=0, atol=1e-14)
        assert_allclose(report.scale_factor, 1.0, rtol=0, atol=1e-14)

    def test_perp_dr_scale_and_correction(self):
        report = perp_dr(toy_nuisances(), toy_data())
        assert_allclose(report.psi_hat, 2.0, rtol=0, atol=1e-14)
        assert_allclose(report.scale_factor, 4.0, rtol=0, atol=1e-14)
        assert_allclose(report.mean_bias_correction, 0.25, rtol=0, atol=1e-14)
        assert_allclose(report.std_error, 1.0, rtol=0, atol=1e-14)
        assert_allclose(report.moment_identity_error, 0.0, rtol=0, atol=1e-14)

    def test_constant_shift_of_projection_moves_the_estimate(self):
        # The empirical moment of the residual is shift-invariant, but the
        # second moment and the residual correction are not, so shifting
        # the fitted projection by a constant changes the estimate: at
        # shift 0.1 the toy value moves from 2 to 1 + 0.2/0.26 = 23/13.
        report = perp_dr(toy_nuisances(beta_perp=0.6), toy_data())
        assert_allclose(report.psi_hat, 23.0 / 13.0, rtol=0, atol=1e-12)
        rr_shifted = rr_from_beta_perp(toy_nuisances(beta_perp=0.6), toy_data())
        rr_base = rr_from_beta_perp(toy_nuisances(), toy_data())
        assert_allclose(rr_shifted.hn_residual, rr_base.hn_residual, rtol=0, atol=1e-14)

    def test_degenerate_direction_flagged(self):
        # beta_perp = beta + c has residual -c, whose contrast moment is 0;
        # the representer collapses to zero and the report records it.
        nuis = FittedNuisances(
            moment=ate(),
            mu_hat=const_fn(0.0, slope=1.0),
            beta=beta_default(ate()),
            beta_perp_hat=const_fn(0.3, slope=1.0),
        )
        rr = rr_from_beta_perp(nuis, toy_data())
        assert rr.degenerate
        assert_allclose(rr.value(toy_data().a, toy_data().x), [0.0, 0.0], rtol=0, atol=0)
        report = perp_dr(nuis, toy_data())
        assert_allclose(report.psi_hat, 1.0, rtol=0, atol=1e-14)
        assert_allclose(report.moment_identity_error, -1.0, rtol=0, atol=0)

    def test_zero_second_moment_raises(self):
        nuis = FittedNuisances(
            moment=ate(),
            mu_hat=const_fn(0.0, slope=1.0),
            beta=beta_default(ate()),
            beta_perp_hat=const_fn(0.0, slope=1.0),
        )
        with pytest.raises(DegenerateRieszError):
            rr_from_beta_perp(nuis, toy_data())


class TestReportContract:
    def test_ci_and_serialization(self):
        report = perp_dr(toy_nuisances(), toy_data())
        lo, hi = report.ci95
        assert_allclose(lo, report.psi_hat - 1.96 * report.std_error, rtol=0, atol=0)
        assert_allclose(hi, report.psi_hat + 1.96 * report.std_error, rtol=0, atol=0)
        payload = report.to_dict()
        assert payload["estimator"] == "perp_dr"
        assert set(payload["diagnostics"]) == {
            "moment_identity_error",
            "scale_factor",
            "mean_bias_correction",
        }
        assert payload["std_error"] >= 0.0

    def test_minimum_rows(self):
        data = Dataset(y=[1.0], a=[1.0], x=np.zeros((1, 1)))
        with pytest.raises(ValueError, match="at least 2"):
            direct(toy_nuisances(), data)


class TestMomentIdentityDiag:
    def test_reconstructed_rr_on_balanced_sample(self):
        rr = rr_from_beta_perp(toy_nuisances(), toy_data())
        assert_allclose(moment_identity_diag(rr, toy_data()), 0.0, rtol=0, atol=1e-14)

    def test_zero_function(self):
        zero = const_fn(0.0)
        assert moment_identity_diag(zero, toy_data()) == -1.0

    def test_unbalanced_sample_formula(self):
        # E_n[a * 4(a - 0.5)] = 2q for treated fraction q.
        data = Dataset(y=np.zeros(4), a=[1.0, 1.0, 1.0, 0.0], x=np.zeros((4, 1)))
        rr = DifferentiableFunction(fn=lambda a, x: 4.0 * (a - 0.5))
        assert_allclose(moment_identity_diag(rr, data), 2.0 * 0.75 - 1.0, rtol=0, atol=1e-14)


def random_linear_fn(rng, d, with_da=True):
    w = rng.standard_normal(d)
    b, s = rng.standard_normal(2)
    return DifferentiableFunction(
        fn=lambda a, x: x @ w + b + s * a,
        da=(lambda a, x: np.full_like(a, s)) if with_da else None,
    )


def random_ate_case(rng, n=40):
    d = 2
    data = Dataset(
        y=rng.standard_normal(n),
        a=rng.integers(0, 2, n).astype(float),
        x=rng.standard_normal((n, d)),
    )
    nuis = FittedNuisances(
        moment=ate(),
        mu_hat=random_linear_fn(rng, d),
        beta=beta_default(ate()),
        beta_perp_hat=random_linear_fn(rng, d),
    )
    return nuis, data


def random_ade_case(rng, n=40):
    d = 2
    data = Dataset(
        y=rng.standard_normal(n),
        a=rng.standard_normal(n),
        x=rng.standard_normal((n, d)),
    )
    nuis = FittedNuisances(
        moment=ade(),
        mu_hat=random_linear_fn(rng, d),
        beta=beta_default(ade()),
        beta_perp_hat=random_linear_fn(rng, d),
    )
    return nuis, data


class TestAlgebraicIdentities:
    def test_perp_dr_equals_dr_equals_tmle_on_residual(self):
        rng = np.random.default_rng(61)
        for maker in (random_ate_case, random_ade_case):
            for _ in range(25):
                nuis, data = maker(rng)
                rr = rr_from_beta_perp(nuis, data)
                beta_f, perp_f = nuis.beta.f, nuis.beta_perp_hat
                residual = DifferentiableFunction(
                    fn=lambda a, x: beta_f.value(a, x) - perp_f.value(a, x),
                    da=lambda a, x: beta_f.deriv(a, x) - perp_f.deriv(a, x),
                )
                p = perp_dr(nuis, data).psi_hat
                via_dr = dr(nuis, rr, data).psi_hat
                via_tmle = tmle_linear(nuis, residual, data).psi_hat
                scale = max(1.0, abs(p))
                assert abs(p - via_dr) <= 1e-12 * scale
                assert abs(p - via_tmle) <= 1e-12 * scale

    def test_tmle_scale_invariance(self):
        rng = np.random.default_rng(67)
        nuis, data = random_ate_case(rng)
        rr = rr_from_beta_perp(nuis, data)
        base = tmle_linear(nuis, rr, data).psi_hat
        for c in (-2.0, 0.1, 10.0):
            scaled = DifferentiableFunction(
                fn=lambda a, x, c=c: c * rr.value(a, x),
                da=lambda a, x, c=c: c * rr.deriv(a, x),
            )
            psi = tmle_linear(nuis, scaled, data).psi_hat
            assert abs(psi - base) <= 1e-12 * max(1.0, abs(base))

    def test_zero_residuals_collapse_to_direct(self):
        rng = np.random.default_rng(71)
        nuis, data = random_ate_case(rng)
        mu = nuis.mu_hat
        exact = Dataset(y=mu.value(data.a, data.x), a=data.a, x=data.x)
        rr = rr_from_beta_perp(nuis, exact)
        base = direct(nuis, exact).psi_hat
        assert_allclose(dr(nuis, rr, exact).psi_hat, base, rtol=0, atol=1e-12)
        assert_allclose(tmle_linear(nuis, rr, exact).psi_hat, base, rtol=0, atol=1e-12)

    def test_tmle_needs_derivative_for_derivative_moments(self):
        rng = np.random.default_rng(73)
        nuis, data = random_ade_case(rng)
        bad_rr = DifferentiableFunction(fn=lambda a, x: a)
        with pytest.raises(MissingDerivativeError):
            tmle_linear(nuis, bad_rr, data)


def tabular_fn(support, values, slope_by_point=None):
    table = {row.tobytes(): v for row, v in zip(support, values)}

    def fn(a, x):
        rows = np.column_stack([a, x])
        return np.array([table[r.tobytes()] for r in rows])

    return DifferentiableFunction(fn=fn)


class TestDoubleRobustnessOnFiniteSupport:
    def setup_method(self):
        self.dist = oracle.FiniteDistribution(
            support=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]),
            probs=np.array([0.4, 0.1, 0.25, 0.25]),
            reg=np.array([1.0, 2.0, -1.0, 3.0]),
        )
        self.functional = induced_functional(ate(), self.dist)
        counts = np.round(self.dist.probs * 20).astype(int)
        idx = np.repeat(np.arange(self.dist.size), counts)
        self.data = Dataset(
            y=self.dist.reg[idx], a=self.dist.a[idx], x=self.dist.x[idx]
        )
        self.psi = oracle.exact_estimand(self.dist, self.functional)

    def nuis(self, mu_vals, perp_vals):
        return FittedNuisances(
            moment=ate(),
            mu_hat=tabular_fn(self.dist.support, mu_vals),
            beta=beta_default(ate()),
            beta_perp_hat=tabular_fn(self.dist.support, perp_vals),
        )

    def test_exact_outcome_any_projection(self):
        rng = np.random.default_rng(79)
        for _ in range(10):
            perp_vals = rng.standard_normal(self.dist.size)
            if abs(self.functional(self.dist.a - perp_vals)) < 1e-3:
                continue
            report = perp_dr(self.nuis(self.dist.reg, perp_vals), self.data)
            assert abs(report.psi_hat - self.psi) <= 1e-10

    def test_exact_projection_any_outcome(self):
        rng = np.random.default_rng(83)
        beta_perp = oracle.project_orthocomplement(self.dist, self.functional, self.dist.a)
        for _ in range(10):
            mu_vals = rng.standard_normal(self.dist.size)
            report = perp_dr(self.nuis(mu_vals, beta_perp), self.data)
            assert abs(report.psi_hat - self.psi) <= 1e-10

    def test_both_exact_recovers_estimand(self):
        beta_perp = oracle.project_orthocomplement(self.dist, self.functional, self.dist.a)
        report = perp_dr(self.nuis(self.dist.reg, beta_perp), self.data)
        assert abs(report.psi_hat - self.psi) <= 1e-12


class TestEstimateAll:
    def test_all_five_reports_share_representer(self):
        rng = np.random.default_rng(89)
        nuis, data = random_ate_case(rng, n=100)
        reports = estimate_all(nuis, data)
        assert list(reports) == ["direct", "ipw", "dr", "tmle", "perp_dr"]
        assert_allclose(
            reports["dr"].psi_hat, reports["perp_dr"].psi_hat, rtol=0, atol=1e-12
        )
        assert reports["ipw"].moment_identity_error == reports["dr"].moment_identity_error

    def test_external_representer_override(self):
        rng = np.random.default_rng(97)
        nuis, data = random_ate_case(rng, n=100)
        override = DifferentiableFunction(fn=lambda a, x: 4.0 * (a - 0.5))
        reports = estimate_all(nuis, data, alpha_hat=override)
        expected = dr(nuis, override, data).psi_hat
        assert_allclose(reports["dr"].psi_hat, expected, rtol=0, atol=0)
        assert "perp_dr" in reports

    def test_no_projection_skips_perp_dr(self):
        rng = np.random.default_rng(101)
        nuis, data = random_ate_case(rng, n=50)
        bare = FittedNuisances(
            moment=nuis.moment, mu_hat=nuis.mu_hat, beta=nuis.beta, beta_perp_hat=None
        )
        override = DifferentiableFunction(fn=lambda a, x: 4.0 * (a - 0.5))
        reports = estimate_all(bare, data, alpha_hat=override)
        assert "perp_dr" not in reports
        with pytest.raises(ValueError, match="needs a representer"):
            estimate_all(bare, data)

    def test_unknown_estimator_rejected(self):
        rng = np.random.default_rng(103)
        nuis, data = random_ate_case(rng)
        with pytest.raises(ValueError, match="unknown estimators"):
            estimate_all(nuis, data, estimators=("direct", "aipw"))


class TestStandardErrorConsistency:
    def test_sd_of_estimates_matches_reported_se(self):
        # 200 replicates with fixed near-truth nuisances: the spread of the
        # perp_dr estimates should match the mean reported standard error.
        rng = np.random.default_rng(107)
        n = 500

        def expit(t):
            return 1.0 / (1.0 + np.exp(-t))

        mu_hat = DifferentiableFunction(
            fn=lambda a, x: 1.0 + a * (1.0 + 0.5 * x[:, 1]) + x[:, 0] + 0.05 * np.sin(x[:, 0])
        )
        perp_hat = DifferentiableFunction(fn=lambda a, x: expit(0.75 * x[:, 0]))
        nuis = FittedNuisances(
            moment=ate(), mu_hat=mu_hat, beta=beta_default(ate()), beta_perp_hat=perp_hat
        )
        estimates, ses = [], []
        for _ in range(200):
            x = rng.standard_normal((n, 2))
            p = expit(0.8 * x[:, 0])
            a = (rng.uniform(size=n) < p).astype(float)
            y = 1.0 + a * (1.0 + 0.5 * x[:, 1]) + x[:, 0] + rng.standard_normal(n)
            report = perp_dr(nuis, Dataset(y=y, a=a, x=x))
            estimates.append(report.psi_hat)
            ses.append(report.std_error)
        ratio = np.std(estimates, ddof=1) / np.mean(ses)
        assert 0.8 <= ratio <= 1.25, f"sd/se ratio {ratio:.3f}"
