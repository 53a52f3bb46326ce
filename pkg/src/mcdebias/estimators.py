"""Point estimators and influence-curve uncertainty for average moment effects.

Five estimator families share one interface: the direct plug-in, inverse
probability weighting, the bias-corrected doubly robust estimator, its
targeted (TMLE) variant with a linear submodel, and the doubly robust
estimator parameterized by the zero-moment projection, whose Riesz
representer is reconstructed from the residual direction rather than
estimated densities. All constants of proportionality in the representer
are computed on the estimation sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .moments import (
    DifferentiableFunction,
    KnownBeta,
    MomentFunctional,
    empirical_moment,
    moment_rows,
)

__all__ = [
    "DegenerateRieszError",
    "FittedNuisances",
    "EstimateReport",
    "ReconstructedRR",
    "rr_from_beta_perp",
    "direct",
    "ipw",
    "dr",
    "tmle_linear",
    "perp_dr",
    "moment_identity_diag",
    "estimate_all",
]

ESTIMATOR_ORDER = ("direct", "ipw", "dr", "tmle", "perp_dr")


class DegenerateRieszError(ValueError):
    """The residual direction has zero second moment; no representer exists."""


@dataclass(frozen=True)
class FittedNuisances:
    """Fitted nuisance functions for one estimand.

    ``mu_hat`` predicts the outcome on the original scale; ``beta_perp_hat``
    approximates the zero-moment projection of the centering function
    ``beta``. ``beta_perp_hat`` may be None when only an externally
    supplied representer will be used.
    """

    moment: MomentFunctional
    mu_hat: DifferentiableFunction
    beta: KnownBeta
    beta_perp_hat: DifferentiableFunction | None = None


@dataclass(frozen=True)
class EstimateReport:
    """One estimator's point estimate, uncertainty, and representer diagnostics.

    Whenever a bias correction applies, the decomposition
    ``psi_hat = direct_term + scale_factor * mean_bias_correction`` holds,
    with the correction stored unscaled. ``naive_se`` marks standard
    errors taken from the raw sample variance of the summand rather than
    the influence curve.
    """

    estimator: str
    psi_hat: float
    std_error: float
    n: int
    naive_se: bool
    moment_identity_error: float | None = None
    scale_factor: float | None = None
    mean_bias_correction: float | None = None

    @property
    def ci95(self) -> tuple[float, float]:
        return (self.psi_hat - 1.96 * self.std_error, self.psi_hat + 1.96 * self.std_error)

    def to_dict(self) -> dict:
        lo, hi = self.ci95
        return {
            "estimator": self.estimator,
            "psi_hat": self.psi_hat,
            "std_error": self.std_error,
            "ci95": [lo, hi],
            "n": self.n,
            "naive_se": self.naive_se,
            "diagnostics": {
                "moment_identity_error": self.moment_identity_error,
                "scale_factor": self.scale_factor,
                "mean_bias_correction": self.mean_bias_correction,
            },
        }


@dataclass(frozen=True)
class ReconstructedRR(DifferentiableFunction):
    """Representer reconstructed from the projection residual.

    ``alpha_hat = scale_factor * (beta - beta_perp_hat)`` with the scale
    estimated on the estimation sample. ``degenerate`` is set when the
    residual has zero empirical moment, which collapses the representer
    to the zero function.
    """

    scale_factor: float = 0.0
    hn_residual: float = 0.0
    residual_second_moment: float = 0.0
    degenerate: bool = False


def _check_data(data) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    y = np.asarray(data.y, dtype=np.float64)
    a = np.asarray(data.a, dtype=np.float64)
    x = np.asarray(data.x, dtype=np.float64)
    if y.size < 2:
        raise ValueError("estimation requires at least 2 observations")
    return y, a, x


def _se(values: np.ndarray) -> float:
    return float(np.std(values, ddof=1) / np.sqrt(values.size))


def rr_from_beta_perp(nuis: FittedNuisances, data) -> ReconstructedRR:
    """Reconstruct the Riesz representer from the fitted projection.

    Computes ``alpha_hat(z) = h_n(beta - beta_perp_hat) (beta - beta_perp_hat)(z)
    / E_n[(beta - beta_perp_hat)^2]`` with both constants estimated on
    ``data``. A zero second moment raises; a zero empirical moment yields
    the zero function with ``degenerate`` set.
    """
    if nuis.beta_perp_hat is None:
        raise ValueError("nuisances carry no fitted projection to reconstruct from")
    _, a, x = _check_data(data)
    beta_f, perp = nuis.beta.f, nuis.beta_perp_hat

    def g_fn(av, xv):
        return beta_f.value(av, xv) - perp.value(av, xv)

    g_da = None
    if beta_f.has_derivative and perp.has_derivative:

        def g_da(av, xv):
            return beta_f.deriv(av, xv) - perp.deriv(av, xv)

    g = DifferentiableFunction(fn=g_fn, da=g_da)
    second = float(np.mean(g.value(a, x) ** 2))
    if second <= 0.0:
        raise DegenerateRieszError(
            "residual beta - beta_perp_hat has zero second moment on the estimation sample"
        )
    hn = empirical_moment(nuis.moment, g, data)
    # A residual whose empirical moment vanishes (up to rounding) lies in
    # the zero-moment subspace itself and carries no representer direction;
    # collapse to the zero function rather than amplify noise.
    degenerate = abs(hn) <= 1e-12 * max(1.0, np.sqrt(second))
    scale = 0.0 if degenerate else hn / second
    return ReconstructedRR(
        fn=lambda av, xv: scale * g.value(av, xv),
        da=None if g_da is None else (lambda av, xv: scale * g.deriv(av, xv)),
        scale_factor=scale,
        hn_residual=hn,
        residual_second_moment=second,
        degenerate=degenerate,
    )


def moment_identity_diag(alpha_hat: DifferentiableFunction, data) -> float:
    """Deviation of ``E_n[A alpha_hat(Z)]`` from 1.

    For treatment contrasts and derivatives the identity
    ``E[A alpha(Z)] = h(a) = 1`` holds at the true representer, so this
    is a calibration check requiring no ground truth.
    """
    y, a, x = _check_data(data)
    return float(np.mean(a * alpha_hat.value(a, x))) - 1.0


def direct(nuis: FittedNuisances, data) -> EstimateReport:
    """Plug-in estimate ``h_n(mu_hat)`` with a naive standard error."""
    y, a, x = _check_data(data)
    rows = moment_rows(nuis.moment, nuis.mu_hat, a, x)
    return EstimateReport(
        estimator="direct",
        psi_hat=float(np.mean(rows)),
        std_error=_se(rows),
        n=y.size,
        naive_se=True,
    )


def ipw(alpha_hat: DifferentiableFunction, data) -> EstimateReport:
    """Representer-weighted outcome mean ``E_n[Y alpha_hat(Z)]``; naive SE."""
    y, a, x = _check_data(data)
    vals = y * alpha_hat.value(a, x)
    return EstimateReport(
        estimator="ipw",
        psi_hat=float(np.mean(vals)),
        std_error=_se(vals),
        n=y.size,
        naive_se=True,
        moment_identity_error=moment_identity_diag(alpha_hat, data),
    )


def dr(nuis: FittedNuisances, alpha_hat: DifferentiableFunction, data) -> EstimateReport:
    """Doubly robust estimate: plug-in plus representer-weighted residual.

    The influence-curve summand is
    ``phi = m(mu_hat, W) + alpha_hat(Z)(Y - mu_hat(Z))`` and the standard
    error is its sample sd over sqrt(n).
    """
    y, a, x = _check_data(data)
    rows = moment_rows(nuis.moment, nuis.mu_hat, a, x)
    av = alpha_hat.value(a, x)
    resid = y - nuis.mu_hat.value(a, x)
    phi = rows + av * resid
    return EstimateReport(
        estimator="dr",
        psi_hat=float(np.mean(phi)),
        std_error=_se(phi),
        n=y.size,
        naive_se=False,
        moment_identity_error=moment_identity_diag(alpha_hat, data),
        scale_factor=1.0,
        mean_bias_correction=float(np.mean(av * resid)),
    )


def tmle_linear(nuis: FittedNuisances, alpha_hat: DifferentiableFunction, data) -> EstimateReport:
    """Targeted estimate along the linear submodel ``mu_hat + t alpha_hat``.

    The fluctuation ``t* = E_n[alpha_hat (Y - mu_hat)] / E_n[alpha_hat^2]``
    zeroes the empirical targeting score, making the result invariant to
    rescaling of the representer. The report's scale factor is
    ``h_n(alpha_hat) / E_n[alpha_hat^2]``, so the usual decomposition
    against the unscaled correction holds.
    """
    y, a, x = _check_data(data)
    av = alpha_hat.value(a, x)
    second = float(np.mean(av**2))
    if second <= 0.0:
        raise DegenerateRieszError("representer has zero second moment; no submodel direction")
    resid = y - nuis.mu_hat.value(a, x)
    corr = float(np.mean(av * resid))
    t_star = corr / second
    score = float(np.mean(av * (resid - t_star * av)))
    if abs(score) > 1e-10 * max(1.0, abs(corr), second):
        raise RuntimeError(f"targeting score {score!r} did not vanish at the fitted fluctuation")
    hn_alpha = empirical_moment(nuis.moment, alpha_hat, data)
    rows = moment_rows(nuis.moment, nuis.mu_hat, a, x)
    psi = float(np.mean(rows)) + t_star * hn_alpha
    mu_star = rows + t_star * moment_rows(nuis.moment, alpha_hat, a, x)
    phi = mu_star + av * (resid - t_star * av)
    return EstimateReport(
        estimator="tmle",
        psi_hat=psi,
        std_error=_se(phi),
        n=y.size,
        naive_se=False,
        moment_identity_error=moment_identity_diag(alpha_hat, data),
        scale_factor=hn_alpha / second,
        mean_bias_correction=corr,
    )


def perp_dr(nuis: FittedNuisances, data) -> EstimateReport:
    """Doubly robust estimate parameterized by the projection residual.

    Algebraically identical to ``dr`` with the reconstructed representer
    and to ``tmle_linear`` with the unscaled residual direction; the
    report keeps the scale factor and the unscaled correction separate.
    """
    y, a, x = _check_data(data)
    alpha_hat = rr_from_beta_perp(nuis, data)
    rows = moment_rows(nuis.moment, nuis.mu_hat, a, x)
    resid = y - nuis.mu_hat.value(a, x)
    g_vals = alpha_hat.value(a, x) / alpha_hat.scale_factor if alpha_hat.scale_factor else None
    if g_vals is None:
        beta_f, perp_f = nuis.beta.f, nuis.beta_perp_hat
        g_vals = beta_f.value(a, x) - perp_f.value(a, x)
    correction = float(np.mean(g_vals * resid))
    psi = float(np.mean(rows)) + alpha_hat.scale_factor * correction
    phi = rows + alpha_hat.value(a, x) * resid
    return EstimateReport(
        estimator="perp_dr",
        psi_hat=psi,
        std_error=_se(phi),
        n=y.size,
        naive_se=False,
        moment_identity_error=moment_identity_diag(alpha_hat, data),
        scale_factor=alpha_hat.scale_factor,
        mean_bias_correction=correction,
    )


def estimate_all(
    nuis: FittedNuisances,
    data,
    alpha_hat: DifferentiableFunction | None = None,
    estimators: tuple[str, ...] = ESTIMATOR_ORDER,
) -> dict[str, EstimateReport]:
    """Run the requested estimators with a shared representer.

    When no representer is supplied it is reconstructed from the fitted
    projection; ``perp_dr`` always uses the reconstruction and is skipped
    if no projection was fitted.
    """
    unknown = set(estimators) - set(ESTIMATOR_ORDER)
    if unknown:
        raise ValueError(f"unknown estimators {sorted(unknown)}; expected among {ESTIMATOR_ORDER}")
    shared = alpha_hat
    if shared is None and nuis.beta_perp_hat is not None:
        shared = rr_from_beta_perp(nuis, data)
    reports: dict[str, EstimateReport] = {}
    for name in ESTIMATOR_ORDER:
        if name not in estimators:
            continue
        if name == "direct":
            reports[name] = direct(nuis, data)
        elif name == "perp_dr":
            if nuis.beta_perp_hat is not None:
                reports[name] = perp_dr(nuis, data)
        else:
            if shared is None:
                raise ValueError(f"estimator {name!r} needs a representer or a fitted projection")
            if name == "ipw":
                reports[name] = ipw(shared, data)
            elif name == "dr":
                reports[name] = dr(nuis, shared, data)
            else:
                reports[name] = tmle_linear(nuis, shared, data)
    return reports
