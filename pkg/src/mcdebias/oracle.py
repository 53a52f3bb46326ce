"""Exact identities for average moment effects on finite discrete distributions.

Every distribution here has finite support, so inner products are weighted
sums and every object of interest has a closed form: the Riesz representer
of a linear functional, the projection of a function onto the zero-moment
subspace, the estimand itself, and the algebraic identities linking them.
The rest of the package is validated against this module, which keeps the
learned, sampled, and optimized quantities anchored to exact arithmetic.

Conventions: a support point is a row ``(a, x_1, ..., x_d)`` with treatment
first; ``probs`` are the point masses; ``reg`` holds the conditional mean
outcome at each point. A linear functional ``h(f) = sum_i ell_i f_i`` is
stored by its coefficient vector ``ell``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DegenerateFunctionalError",
    "FiniteDistribution",
    "LinearFunctional",
    "inner",
    "sq_norm",
    "riesz_exact",
    "project_orthocomplement",
    "reconstruct_rr",
    "exact_estimand",
    "verify_mixed_bias",
    "verify_mu_decomposition",
    "verify_sufficiency",
    "random_case",
    "discretized_gaussian",
    "IdentityCheck",
    "IdentityReport",
    "run_identity_suite",
]

_PROB_TOL = 1e-12


class DegenerateFunctionalError(ValueError):
    """Raised when a functional or direction has no usable representer."""


@dataclass(frozen=True)
class FiniteDistribution:
    """Discrete distribution over treatment-covariate points.

    Attributes:
        support: Array of shape ``(n, 1 + d)``; column 0 is the treatment.
        probs: Point masses, shape ``(n,)``, strictly positive, summing to 1.
        reg: Optional conditional mean outcome at each point, shape ``(n,)``.
        noise_var: Optional conditional outcome variance at each point.
    """

    support: np.ndarray
    probs: np.ndarray
    reg: np.ndarray | None = None
    noise_var: np.ndarray | None = None

    def __post_init__(self):
        support = np.atleast_2d(np.asarray(self.support, dtype=np.float64))
        probs = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "probs", probs)
        n = support.shape[0]
        if probs.shape != (n,):
            raise ValueError(f"probs has shape {probs.shape}, expected ({n},)")
        if np.any(probs <= 0.0):
            raise ValueError("all point masses must be strictly positive")
        if abs(probs.sum() - 1.0) > _PROB_TOL:
            raise ValueError(f"probs sum to {probs.sum()!r}, not 1")
        if len(np.unique(support, axis=0)) != n:
            raise ValueError("support points must be distinct")
        for name in ("reg", "noise_var"):
            val = getattr(self, name)
            if val is not None:
                arr = np.asarray(val, dtype=np.float64)
                if arr.shape != (n,):
                    raise ValueError(f"{name} has shape {arr.shape}, expected ({n},)")
                object.__setattr__(self, name, arr)

    @property
    def size(self) -> int:
        return self.support.shape[0]

    @property
    def a(self) -> np.ndarray:
        """Treatment values, shape ``(n,)``."""
        return self.support[:, 0]

    @property
    def x(self) -> np.ndarray:
        """Covariate values, shape ``(n, d)``."""
        return self.support[:, 1:]

    def require_reg(self) -> np.ndarray:
        if self.reg is None:
            raise ValueError("operation requires the conditional mean outcome (reg)")
        return self.reg

    def sample(self, n: int, rng: np.random.Generator):
        """Draw ``n`` observations; outcomes are reg plus Gaussian noise.

        Returns:
            Tuple ``(y, a, x)``. Noiseless if ``noise_var`` is unset.
        """
        reg = self.require_reg()
        idx = rng.choice(self.size, size=n, p=self.probs)
        y = reg[idx].copy()
        if self.noise_var is not None:
            y += rng.standard_normal(n) * np.sqrt(self.noise_var[idx])
        return y, self.a[idx].copy(), self.x[idx].copy()

    def to_json(self) -> str:
        payload = {
            "support": self.support.tolist(),
            "probs": self.probs.tolist(),
            "reg": None if self.reg is None else self.reg.tolist(),
            "noise_var": None if self.noise_var is None else self.noise_var.tolist(),
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "FiniteDistribution":
        payload = json.loads(text)
        return cls(
            support=np.asarray(payload["support"], dtype=np.float64),
            probs=np.asarray(payload["probs"], dtype=np.float64),
            reg=None if payload.get("reg") is None else np.asarray(payload["reg"], dtype=np.float64),
            noise_var=(
                None
                if payload.get("noise_var") is None
                else np.asarray(payload["noise_var"], dtype=np.float64)
            ),
        )


@dataclass(frozen=True)
class LinearFunctional:
    """Coefficients of ``h(f) = sum_i ell_i f_i`` on a fixed support."""

    ell: np.ndarray

    def __post_init__(self):
        ell = np.asarray(self.ell, dtype=np.float64)
        object.__setattr__(self, "ell", ell)
        if ell.ndim != 1:
            raise ValueError("functional coefficients must be one-dimensional")
        if not np.any(ell != 0.0):
            raise DegenerateFunctionalError("functional is identically zero")

    def __call__(self, f: np.ndarray) -> float:
        f = np.asarray(f, dtype=np.float64)
        if f.shape != self.ell.shape:
            raise ValueError(f"function values have shape {f.shape}, expected {self.ell.shape}")
        return float(self.ell @ f)


def _check_lengths(dist: FiniteDistribution, *vecs: np.ndarray) -> list[np.ndarray]:
    out = []
    for v in vecs:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (dist.size,):
            raise ValueError(f"vector has shape {v.shape}, expected ({dist.size},)")
        out.append(v)
    return out


def inner(dist: FiniteDistribution, f: np.ndarray, g: np.ndarray) -> float:
    """Weighted inner product ``E[f(Z) g(Z)]`` on the support."""
    f, g = _check_lengths(dist, f, g)
    return float(np.sum(dist.probs * f * g))


def sq_norm(dist: FiniteDistribution, f: np.ndarray) -> float:
    """Squared norm ``E[f(Z)^2]`` on the support."""
    return inner(dist, f, f)


def riesz_exact(dist: FiniteDistribution, functional: LinearFunctional) -> np.ndarray:
    """Exact Riesz representer of a linear functional.

    Solves ``h(f) = E[alpha(Z) f(Z)]`` for all ``f``, which on finite
    support is coordinate-wise: ``alpha_i = ell_i / w_i``.
    """
    (ell,) = _check_lengths(dist, functional.ell)
    return ell / dist.probs


def project_orthocomplement(
    dist: FiniteDistribution, functional: LinearFunctional, beta: np.ndarray
) -> np.ndarray:
    """Project ``beta`` onto the subspace ``{f : h(f) = 0}``.

    The orthogonal complement of that subspace is spanned by the
    representer, so the projection subtracts the representer component:
    ``beta_perp = beta - (h(beta) / |alpha|^2) alpha``.
    """
    (beta,) = _check_lengths(dist, beta)
    alpha = riesz_exact(dist, functional)
    denom = sq_norm(dist, alpha)
    if denom <= 0.0:
        raise DegenerateFunctionalError("representer has zero norm")
    return beta - (functional(beta) / denom) * alpha


def reconstruct_rr(
    dist: FiniteDistribution,
    beta: np.ndarray,
    beta_perp: np.ndarray,
    h_beta: float,
) -> np.ndarray:
    """Rebuild the representer from a centering function and its projection.

    Uses ``alpha = h(beta) (beta - beta_perp) / E[(beta - beta_perp)^2]``,
    which requires only the moment of ``beta`` and the residual direction,
    not the functional coefficients themselves.
    """
    beta, beta_perp = _check_lengths(dist, beta, beta_perp)
    g = beta - beta_perp
    denom = sq_norm(dist, g)
    if denom <= 0.0:
        raise DegenerateFunctionalError(
            "beta equals its projection; the residual direction is degenerate"
        )
    return (float(h_beta) / denom) * g


def exact_estimand(dist: FiniteDistribution, functional: LinearFunctional) -> float:
    """Exact estimand ``psi = h(reg)``, the functional applied to the outcome mean."""
    return functional(dist.require_reg())


def verify_mixed_bias(
    dist: FiniteDistribution,
    functional: LinearFunctional,
    mu_hat: np.ndarray,
    alpha_hat: np.ndarray,
) -> tuple[float, float]:
    """Evaluate both sides of the mixed bias identity.

    The population error of the one-step corrected estimate,
    ``h(mu_hat) + E[alpha_hat (mu - mu_hat)] - psi``, equals
    ``-E[(mu_hat - mu)(alpha_hat - alpha)]``: the error is a product of
    the two nuisance errors, vanishing if either one is exact.

    Returns:
        Tuple ``(lhs, rhs)`` of the two sides.
    """
    mu_hat, alpha_hat = _check_lengths(dist, mu_hat, alpha_hat)
    mu = dist.require_reg()
    alpha = riesz_exact(dist, functional)
    psi = exact_estimand(dist, functional)
    lhs = functional(mu_hat) + inner(dist, alpha_hat, mu - mu_hat) - psi
    rhs = -inner(dist, mu_hat - mu, alpha_hat - alpha)
    return lhs, rhs


def verify_mu_decomposition(
    dist: FiniteDistribution, functional: LinearFunctional, beta: np.ndarray
) -> float:
    """Residual of the outcome-mean decomposition along a centering function.

    Both ``mu - mu_perp`` and ``beta - beta_perp`` are multiples of the
    representer, so ``mu = mu_perp + (psi / h(beta)) (beta - beta_perp)``
    for any ``beta`` with nonzero moment. Returns the max abs residual.
    """
    (beta,) = _check_lengths(dist, beta)
    mu = dist.require_reg()
    h_beta = functional(beta)
    if h_beta == 0.0:
        raise DegenerateFunctionalError("centering function has zero moment")
    mu_perp = project_orthocomplement(dist, functional, mu)
    beta_perp = project_orthocomplement(dist, functional, beta)
    psi = exact_estimand(dist, functional)
    recon = mu_perp + (psi / h_beta) * (beta - beta_perp)
    return float(np.max(np.abs(mu - recon)))


def verify_sufficiency(
    dist: FiniteDistribution,
    functional: LinearFunctional,
    beta: np.ndarray,
    tol: float = 1e-9,
) -> tuple[float, float]:
    """Check that coarsening the outcome mean over the residual preserves psi.

    The representer is a function of ``g = beta - beta_perp`` alone, so
    replacing ``mu`` by its conditional mean given ``g`` (computed here by
    grouping support points whose ``g`` values coincide within ``tol``)
    leaves ``E[alpha mu]`` unchanged.

    Returns:
        Tuple ``(psi_from_grouped, psi_exact)``.
    """
    (beta,) = _check_lengths(dist, beta)
    mu = dist.require_reg()
    alpha = riesz_exact(dist, functional)
    beta_perp = project_orthocomplement(dist, functional, beta)
    g = beta - beta_perp
    order = np.argsort(g)
    eta = np.empty_like(mu)
    start = 0
    sorted_g = g[order]
    for i in range(1, dist.size + 1):
        if i == dist.size or sorted_g[i] - sorted_g[i - 1] > tol:
            block = order[start:i]
            w = dist.probs[block]
            eta[block] = np.sum(w * mu[block]) / np.sum(w)
            start = i
    psi_grouped = float(np.sum(dist.probs * alpha * eta))
    return psi_grouped, exact_estimand(dist, functional)


def random_case(
    rng: np.random.Generator,
    max_support: int = 50,
    d: int = 2,
) -> tuple[FiniteDistribution, LinearFunctional, np.ndarray]:
    """Draw a random distribution, functional, and centering function.

    The centering function is nudged along the representer so its moment
    is bounded away from zero, keeping reconstruction well conditioned.
    """
    n = int(rng.integers(2, max_support + 1))
    support = np.column_stack(
        [rng.integers(0, 2, size=n).astype(np.float64), rng.standard_normal((n, d))]
    )
    while len(np.unique(support, axis=0)) != n:
        support = np.column_stack(
            [rng.integers(0, 2, size=n).astype(np.float64), rng.standard_normal((n, d))]
        )
    raw = rng.uniform(0.1, 1.0, size=n)
    probs = raw / raw.sum()
    reg = rng.standard_normal(n)
    dist = FiniteDistribution(support=support, probs=probs, reg=reg)
    ell = rng.standard_normal(n)
    while not np.any(ell != 0.0):
        ell = rng.standard_normal(n)
    functional = LinearFunctional(ell=ell)
    alpha = riesz_exact(dist, functional)
    beta = rng.standard_normal(n)
    h_beta = functional(beta)
    if abs(h_beta) < 0.3:
        target = 0.5 if h_beta >= 0 else -0.5
        beta = beta + ((target - h_beta) / sq_norm(dist, alpha)) * alpha
    return dist, functional, beta


def discretized_gaussian(
    m_values,
    x_weights,
    sigma: float,
    half_width: float = 4.0,
    n_grid: int = 161,
    reg_fn=None,
) -> tuple[FiniteDistribution, LinearFunctional, np.ndarray]:
    """Discretize a conditional Gaussian treatment onto a symmetric grid.

    For each covariate level ``j`` with mass ``x_weights[j]``, the
    treatment is ``N(m_values[j], sigma^2)`` restricted to an evenly
    spaced grid of ``n_grid`` points spanning ``m +- half_width * sigma``
    and renormalized. The derivative functional is encoded through the
    conditional score: ``ell_i = -w_i * d/da log p(a_i | x_i)``, so the
    exact representer on the grid equals the continuous-case score form
    ``(a - m(x)) / sigma^2`` at every point.

    Returns:
        Tuple ``(dist, functional, score)`` where ``score`` holds
        ``d/da log p`` at each support point.
    """
    m_values = np.asarray(m_values, dtype=np.float64)
    x_weights = np.asarray(x_weights, dtype=np.float64)
    if m_values.shape != x_weights.shape or m_values.ndim != 1:
        raise ValueError("m_values and x_weights must be matching one-dimensional arrays")
    if np.any(x_weights <= 0) or abs(x_weights.sum() - 1.0) > 1e-9:
        raise ValueError("x_weights must be positive and sum to 1")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    offsets = np.linspace(-half_width * sigma, half_width * sigma, n_grid)
    pdf = np.exp(-0.5 * (offsets / sigma) ** 2)
    q = pdf / pdf.sum()
    rows, probs, score = [], [], []
    for j, (m, wx) in enumerate(zip(m_values, x_weights)):
        grid = m + offsets
        rows.append(np.column_stack([grid, np.full(n_grid, float(j))]))
        probs.append(wx * q)
        score.append(-(grid - m) / sigma**2)
    support = np.vstack(rows)
    probs = np.concatenate(probs)
    score = np.concatenate(score)
    reg = None
    if reg_fn is not None:
        reg = np.asarray(reg_fn(support[:, 0], support[:, 1:]), dtype=np.float64)
    dist = FiniteDistribution(support=support, probs=probs, reg=reg)
    functional = LinearFunctional(ell=-probs * score)
    return dist, functional, score


@dataclass(frozen=True)
class IdentityCheck:
    """Outcome of one identity checked across the random suite."""

    name: str
    max_residual: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_residual <= self.tolerance


@dataclass
class IdentityReport:
    """Residual table produced by the identity suite."""

    checks: list[IdentityCheck] = field(default_factory=list)
    cases: int = 0

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "cases": self.cases,
            "all_passed": self.all_passed,
            "checks": [
                {
                    "name": c.name,
                    "max_residual": c.max_residual,
                    "tolerance": c.tolerance,
                    "passed": c.passed,
                }
                for c in self.checks
            ],
        }

    def format_table(self) -> str:
        width = max(len(c.name) for c in self.checks)
        lines = [f"identity suite over {self.cases} random cases"]
        for c in self.checks:
            status = "ok" if c.passed else "FAIL"
            lines.append(
                f"  {c.name:<{width}}  max residual {c.max_residual:10.3e}"
                f"  tol {c.tolerance:.1e}  {status}"
            )
        return "\n".join(lines)


def _fixed_cases() -> list[tuple[FiniteDistribution, LinearFunctional, np.ndarray, np.ndarray]]:
    """Hand-solved cases: (dist, functional, beta, expected beta_perp)."""
    two = FiniteDistribution(
        support=np.array([[0.0], [1.0]]),
        probs=np.array([0.5, 0.5]),
        reg=np.array([0.0, 1.0]),
    )
    two_ell = LinearFunctional(ell=np.array([-1.0, 1.0]))
    four = FiniteDistribution(
        support=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]),
        probs=np.array([0.4, 0.1, 0.25, 0.25]),
        reg=np.array([1.0, 2.0, -1.0, 3.0]),
    )
    four_ell = LinearFunctional(ell=np.array([-0.5, 0.5, -0.5, 0.5]))
    return [
        (two, two_ell, np.array([0.0, 1.0]), np.array([0.5, 0.5])),
        (four, four_ell, np.array([0.0, 1.0, 0.0, 1.0]),
         np.array([10.0 / 41.0, 1.0 / 41.0, 16.0 / 41.0, 25.0 / 41.0])),
    ]


def run_identity_suite(
    n_random: int = 200,
    max_support: int = 50,
    seed: int = 0,
    inject_error: bool = False,
) -> IdentityReport:
    """Exercise every exact identity on fixed and random cases.

    Args:
        n_random: Number of random distributions to draw.
        max_support: Upper bound on support size per distribution.
        seed: Seed for the case generator.
        inject_error: Negate the reconstructed representer before
            comparison, forcing a failure; used to prove the suite can
            detect a broken identity.

    Returns:
        Report with the max residual of each identity across all cases.
    """
    rng = np.random.default_rng(seed)
    resid = {
        "representer_defining_property": 0.0,
        "projection_zero_moment": 0.0,
        "projection_orthogonality": 0.0,
        "reconstruction_elementwise": 0.0,
        "norm_identity": 0.0,
        "mixed_bias_identity": 0.0,
        "outcome_decomposition": 0.0,
        "sufficiency": 0.0,
        "fixed_case_projection": 0.0,
    }

    def visit(dist, functional, beta):
        alpha = riesz_exact(dist, functional)
        n = dist.size
        probe = rng.standard_normal((10, n))
        hs = probe @ functional.ell
        inner_alpha = (dist.probs * alpha) @ probe.T
        resid["representer_defining_property"] = max(
            resid["representer_defining_property"], float(np.max(np.abs(inner_alpha - hs)))
        )
        beta_perp = project_orthocomplement(dist, functional, beta)
        resid["projection_zero_moment"] = max(
            resid["projection_zero_moment"], abs(functional(beta_perp))
        )
        norm2 = sq_norm(dist, alpha)
        complement = probe - np.outer(hs / norm2, alpha)
        g = beta - beta_perp
        dots = complement @ (dist.probs * g)
        resid["projection_orthogonality"] = max(
            resid["projection_orthogonality"], float(np.max(np.abs(dots)))
        )
        recon = reconstruct_rr(dist, beta, beta_perp, functional(beta))
        if inject_error:
            recon = -recon
        resid["reconstruction_elementwise"] = max(
            resid["reconstruction_elementwise"], float(np.max(np.abs(recon - alpha)))
        )
        norm_gap = abs(
            np.sqrt(norm2) - abs(functional(beta)) / np.sqrt(sq_norm(dist, g))
        )
        resid["norm_identity"] = max(resid["norm_identity"], float(norm_gap))
        if dist.reg is not None:
            mu = dist.reg
            perturb_mu = mu + rng.standard_normal((100, n))
            perturb_alpha = alpha + rng.standard_normal((100, n))
            psi = exact_estimand(dist, functional)
            lhs = (
                perturb_mu @ functional.ell
                + np.sum(dist.probs * perturb_alpha * (mu - perturb_mu), axis=1)
                - psi
            )
            rhs = -np.sum(dist.probs * (perturb_mu - mu) * (perturb_alpha - alpha), axis=1)
            resid["mixed_bias_identity"] = max(
                resid["mixed_bias_identity"], float(np.max(np.abs(lhs - rhs)))
            )
            resid["outcome_decomposition"] = max(
                resid["outcome_decomposition"],
                verify_mu_decomposition(dist, functional, beta),
            )
            grouped, exact = verify_sufficiency(dist, functional, beta)
            resid["sufficiency"] = max(resid["sufficiency"], abs(grouped - exact))

    for dist, functional, beta, expected_perp in _fixed_cases():
        visit(dist, functional, beta)
        perp = project_orthocomplement(dist, functional, beta)
        resid["fixed_case_projection"] = max(
            resid["fixed_case_projection"], float(np.max(np.abs(perp - expected_perp)))
        )

    for _ in range(n_random):
        dist, functional, beta = random_case(rng, max_support=max_support)
        visit(dist, functional, beta)

    tolerances = {
        "representer_defining_property": 1e-10,
        "projection_zero_moment": 1e-11,
        "projection_orthogonality": 1e-10,
        "reconstruction_elementwise": 1e-9,
        "norm_identity": 1e-9,
        "mixed_bias_identity": 1e-10,
        "outcome_decomposition": 1e-10,
        "sufficiency": 1e-10,
        "fixed_case_projection": 1e-12,
    }
    report = IdentityReport(cases=n_random + len(_fixed_cases()))
    for name, value in resid.items():
        report.checks.append(
            IdentityCheck(name=name, max_residual=value, tolerance=tolerances[name])
        )
    return report
