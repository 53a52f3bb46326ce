"""Average moment functionals over treatment-covariate observations.

Four estimand families are supported, each identified by the row-level
moment ``m(f, W)`` it averages:

* ``ate``: treatment contrast ``f(1, x) - f(0, x)`` (binary treatment).
* ``ape``: policy-mixed value ``pi(x) f(1, x) + (1 - pi(x)) f(0, x)``.
* ``ade``: treatment derivative ``d/da f(a, x)`` (continuous treatment).
* ``ipe``: weighted derivative ``pi(x) * d/da f(a, x)``.

Each family ships a known centering function ``beta`` whose moment is a
known constant, the seed from which the Riesz representer is later
reconstructed, plus the classical closed-form representer used only for
verification against propensity or score ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .oracle import FiniteDistribution, LinearFunctional

__all__ = [
    "KINDS",
    "NonBinaryTreatmentError",
    "PositivityError",
    "MissingDerivativeError",
    "PolicyRangeError",
    "ZeroPolicyError",
    "Policy",
    "constant_policy",
    "threshold_policy",
    "table_policy",
    "policy_from_config",
    "MomentFunctional",
    "ate",
    "ape",
    "ade",
    "ipe",
    "moment_from_config",
    "DifferentiableFunction",
    "KnownBeta",
    "beta_default",
    "beta_zero_extended",
    "moment_rows",
    "moment_apply",
    "empirical_moment",
    "rr_closed_form",
    "induced_functional",
    "derivative_functional",
]

KINDS = ("ate", "ape", "ade", "ipe")


class NonBinaryTreatmentError(ValueError):
    """Treatment values outside {0, 1} where a binary contrast is required."""


class PositivityError(ValueError):
    """Propensity scores at or beyond the boundary of (0, 1)."""


class MissingDerivativeError(ValueError):
    """A derivative-based moment was applied to a function without one."""


class PolicyRangeError(ValueError):
    """Policy values outside the range admitted by the moment kind."""


class ZeroPolicyError(ValueError):
    """A weighted-derivative centering function was evaluated where the weight is zero."""


def _as_batch(a, x) -> tuple[np.ndarray, np.ndarray]:
    """Normalize to ``a`` of shape ``(n,)`` and ``x`` of shape ``(n, d)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if np.isscalar(a) or np.ndim(a) == 0:
        a = np.full(x.shape[0], float(a))
    else:
        a = np.asarray(a, dtype=np.float64)
    if a.shape != (x.shape[0],):
        raise ValueError(f"treatment has shape {a.shape}, expected ({x.shape[0]},)")
    return a, x


def require_binary(a: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Round near-binary treatments to exact {0, 1} or raise."""
    rounded = np.round(a)
    if np.any(np.abs(a - rounded) > tol) or not np.all((rounded == 0.0) | (rounded == 1.0)):
        bad = a[(np.abs(a - np.round(a)) > tol) | ((np.round(a) != 0.0) & (np.round(a) != 1.0))]
        raise NonBinaryTreatmentError(
            f"binary treatment required; found {bad.size} values outside {{0, 1}}"
            f" (first: {bad[:3].tolist()})"
        )
    return rounded


@dataclass(frozen=True)
class Policy:
    """Known treatment policy or derivative weight, as a function of x.

    ``config`` carries a serializable description when the policy came
    from configuration; hand-written callables leave it as None and
    cannot be stored in checkpoints.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    name: str = "policy"
    config: dict | None = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        out = np.asarray(self.fn(x), dtype=np.float64)
        if out.shape != (x.shape[0],):
            out = np.broadcast_to(out, (x.shape[0],)).astype(np.float64)
        if not np.all(np.isfinite(out)):
            raise ValueError(f"policy {self.name!r} produced non-finite values")
        return out


def constant_policy(value: float) -> Policy:
    value = float(value)
    return Policy(
        fn=lambda x: np.full(x.shape[0], value),
        name=f"constant({value})",
        config={"type": "constant", "value": value},
    )


def threshold_policy(column: int, cutoff: float, above: float = 1.0, below: float = 0.0) -> Policy:
    column, cutoff = int(column), float(cutoff)
    above, below = float(above), float(below)
    return Policy(
        fn=lambda x: np.where(x[:, column] > cutoff, above, below),
        name=f"threshold(x{column} > {cutoff})",
        config={
            "type": "threshold",
            "column": column,
            "cutoff": cutoff,
            "above": above,
            "below": below,
        },
    )


def table_policy(column: int, keys, values, default: float | None = None) -> Policy:
    """Policy by exact lookup of one covariate against a key table."""
    column = int(column)
    keys = [float(k) for k in keys]
    values = [float(v) for v in values]
    if len(keys) != len(values):
        raise ValueError("table policy needs one value per key")

    def fn(x):
        col = x[:, column]
        out = np.full(col.shape, np.nan if default is None else float(default))
        for k, v in zip(keys, values):
            out[col == k] = v
        if np.any(np.isnan(out)):
            missing = np.unique(col[np.isnan(out)])
            raise ValueError(f"table policy has no entry for covariate values {missing.tolist()}")
        return out

    return Policy(
        fn=fn,
        name=f"table(x{column})",
        config={"type": "table", "column": column, "keys": keys, "values": values,
                "default": default},
    )


def policy_from_config(cfg: dict) -> Policy:
    kind = cfg.get("type")
    if kind == "constant":
        return constant_policy(cfg["value"])
    if kind == "threshold":
        return threshold_policy(
            cfg["column"], cfg["cutoff"], cfg.get("above", 1.0), cfg.get("below", 0.0)
        )
    if kind == "table":
        return table_policy(cfg["column"], cfg["keys"], cfg["values"], cfg.get("default"))
    raise ValueError(
        f"unknown policy type {kind!r}; expected 'constant', 'threshold', or 'table'"
    )


@dataclass(frozen=True)
class MomentFunctional:
    """An average moment estimand, identified by kind and optional policy."""

    kind: str
    policy: Policy | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown moment kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in ("ape", "ipe") and self.policy is None:
            raise ValueError(f"moment kind {self.kind!r} requires a policy")
        if self.kind in ("ate", "ade") and self.policy is not None:
            raise ValueError(f"moment kind {self.kind!r} does not take a policy")

    @property
    def needs_derivative(self) -> bool:
        return self.kind in ("ade", "ipe")

    @property
    def binary_treatment(self) -> bool:
        return self.kind in ("ate", "ape")

    def policy_values(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the policy with the range check for this kind.

        Policy-mixed contrasts take deterministic binary policies; weighted
        derivatives take weights in [-1, 1].
        """
        pi = self.policy(x)
        if self.kind == "ape":
            rounded = np.round(pi)
            if np.any(np.abs(pi - rounded) > 1e-9) or not np.all(
                (rounded == 0.0) | (rounded == 1.0)
            ):
                raise PolicyRangeError(
                    f"policy for kind 'ape' must map into {{0, 1}};"
                    f" range [{pi.min():.4g}, {pi.max():.4g}]"
                )
            return rounded
        if np.any(pi < -1.0 - 1e-9) or np.any(pi > 1.0 + 1e-9):
            raise PolicyRangeError(
                f"policy for kind 'ipe' must map into [-1, 1];"
                f" range [{pi.min():.4g}, {pi.max():.4g}]"
            )
        return pi

    def to_config(self) -> dict:
        cfg: dict = {"kind": self.kind}
        if self.policy is not None:
            if self.policy.config is None:
                raise ValueError("policy has no serializable configuration")
            cfg["policy"] = self.policy.config
        return cfg


def ate() -> MomentFunctional:
    return MomentFunctional(kind="ate")


def ape(policy: Policy) -> MomentFunctional:
    return MomentFunctional(kind="ape", policy=policy)


def ade() -> MomentFunctional:
    return MomentFunctional(kind="ade")


def ipe(policy: Policy) -> MomentFunctional:
    return MomentFunctional(kind="ipe", policy=policy)


def moment_from_config(cfg: dict) -> MomentFunctional:
    policy = policy_from_config(cfg["policy"]) if "policy" in cfg and cfg["policy"] else None
    return MomentFunctional(kind=cfg["kind"], policy=policy)


@dataclass(frozen=True)
class DifferentiableFunction:
    """A function of (a, x) with an optional exact treatment derivative."""

    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    da: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None

    def value(self, a, x) -> np.ndarray:
        a, x = _as_batch(a, x)
        return np.asarray(self.fn(a, x), dtype=np.float64)

    def deriv(self, a, x) -> np.ndarray:
        if self.da is None:
            raise MissingDerivativeError("function has no treatment derivative")
        a, x = _as_batch(a, x)
        return np.asarray(self.da(a, x), dtype=np.float64)

    @property
    def has_derivative(self) -> bool:
        return self.da is not None


@dataclass(frozen=True)
class KnownBeta:
    """A centering function with a known (or data-independent) moment.

    ``h_beta`` is the population moment when it is a known constant; None
    means it varies with the data distribution and must be estimated by
    the empirical moment, as for the zero-extended weighted case.
    """

    f: DifferentiableFunction
    h_beta: float | None = None


def beta_default(m: MomentFunctional) -> KnownBeta:
    """The standard centering function for each moment kind, with moment 1.

    For ``ate`` and ``ade`` it is ``beta(a, x) = a``; for ``ape`` it is
    ``a + 1 - pi(x)``; for ``ipe`` it is ``a / pi(x)``, which requires a
    nowhere-zero weight. Weights that can vanish need the explicit
    zero-extension from :func:`beta_zero_extended`.
    """
    if m.kind in ("ate", "ade"):
        return KnownBeta(
            f=DifferentiableFunction(fn=lambda a, x: a, da=lambda a, x: np.ones_like(a)),
            h_beta=1.0,
        )
    if m.kind == "ape":
        pol = m.policy
        return KnownBeta(
            f=DifferentiableFunction(
                fn=lambda a, x: a + 1.0 - pol(x), da=lambda a, x: np.ones_like(a)
            ),
            h_beta=1.0,
        )
    pol = m.policy

    def _weights(x):
        w = pol(x)
        if np.any(w == 0.0):
            raise ZeroPolicyError(
                f"policy vanished at {int(np.sum(w == 0.0))} points; the default"
                " centering a / pi(x) is undefined there. Use beta_zero_extended"
                " for the zero-extension."
            )
        return w

    return KnownBeta(
        f=DifferentiableFunction(
            fn=lambda a, x: a / _weights(x), da=lambda a, x: 1.0 / _weights(x)
        ),
        h_beta=1.0,
    )


def beta_zero_extended(m: MomentFunctional) -> KnownBeta:
    """Zero-extended centering for weighted derivatives with vanishing weights.

    ``beta(a, x) = a / pi(x)`` where the weight is nonzero and 0 elsewhere.
    Its moment is the mass of the nonzero-weight region, which is not known
    a priori, so ``h_beta`` is left unset and must be estimated by the
    empirical moment.
    """
    if m.kind != "ipe":
        raise ValueError("zero-extension applies only to weighted-derivative moments")
    pol = m.policy

    def zero_extended(a, x):
        w = pol(x)
        out = np.zeros_like(a)
        nz = w != 0.0
        out[nz] = a[nz] / w[nz]
        return out

    def zero_extended_da(a, x):
        w = pol(x)
        out = np.zeros_like(a)
        nz = w != 0.0
        out[nz] = 1.0 / w[nz]
        return out

    return KnownBeta(
        f=DifferentiableFunction(fn=zero_extended, da=zero_extended_da), h_beta=None
    )


def moment_rows(m: MomentFunctional, f: DifferentiableFunction, a, x) -> np.ndarray:
    """Evaluate ``m(f, W)`` at each observation; the estimand averages these."""
    a, x = _as_batch(a, x)
    if m.binary_treatment:
        require_binary(a)
        f1 = f.value(np.ones_like(a), x)
        f0 = f.value(np.zeros_like(a), x)
        if m.kind == "ate":
            return f1 - f0
        pi = m.policy_values(x)
        return pi * (f1 - f0) + f0
    df = f.deriv(a, x)
    if m.kind == "ade":
        return df
    return m.policy_values(x) * df


def moment_apply(m: MomentFunctional, f: DifferentiableFunction, w) -> float:
    """Apply the moment to a single observation ``w = (y, a, x)``."""
    _, a, x = w
    rows = moment_rows(m, f, np.atleast_1d(np.asarray(a, dtype=np.float64)), np.atleast_2d(x))
    return float(rows[0])


def empirical_moment(m: MomentFunctional, f: DifferentiableFunction, data) -> float:
    """Sample average ``E_n[m(f, W)]`` over a dataset with ``.a`` and ``.x``."""
    a, x = np.asarray(data.a), np.asarray(data.x)
    if a.size == 0:
        raise ValueError("cannot average a moment over an empty dataset")
    return float(np.mean(moment_rows(m, f, a, x)))


def _check_propensity(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    bad = (p <= 0.0) | (p >= 1.0)
    if np.any(bad):
        raise PositivityError(
            f"{int(bad.sum())} propensity values outside (0, 1);"
            f" range [{p.min():.4g}, {p.max():.4g}]"
        )
    return p


def rr_closed_form(
    m: MomentFunctional,
    propensity: Callable[[np.ndarray], np.ndarray] | None = None,
    score: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
    score_da: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
) -> DifferentiableFunction:
    """Classical Riesz representer from known propensity or score.

    Binary kinds need ``propensity(x) = P(A=1 | X=x)``; derivative kinds
    need the conditional score ``score(a, x) = d/da log p(a | x)`` and
    optionally its treatment derivative, which makes the representer
    itself differentiable. Used for verification and oracle-nuisance
    baselines, never by the learned pipeline.
    """
    if m.binary_treatment:
        if propensity is None:
            raise ValueError(f"{m.kind} representer requires a propensity function")
        if m.kind == "ate":

            def fn(a, x):
                p = _check_propensity(propensity(x))
                return (a - p) / (p * (1.0 - p))

        else:
            mom = m

            def fn(a, x):
                p = _check_propensity(propensity(x))
                pi = mom.policy_values(x)
                return (pi * (a - p) + p * (1.0 - a)) / (p * (1.0 - p))

        return DifferentiableFunction(fn=lambda a, x: fn(*_as_batch(a, x)))
    if score is None:
        raise ValueError(f"{m.kind} representer requires a conditional score function")
    if m.kind == "ade":
        return DifferentiableFunction(
            fn=lambda a, x: -np.asarray(score(*_as_batch(a, x)), dtype=np.float64),
            da=(
                None
                if score_da is None
                else lambda a, x: -np.asarray(score_da(*_as_batch(a, x)), dtype=np.float64)
            ),
        )
    mom = m

    def weighted(eval_fn):
        def fn(a, x):
            a, x = _as_batch(a, x)
            return -mom.policy_values(x) * np.asarray(eval_fn(a, x), dtype=np.float64)

        return fn

    return DifferentiableFunction(
        fn=weighted(score), da=None if score_da is None else weighted(score_da)
    )


def induced_functional(m: MomentFunctional, dist: FiniteDistribution) -> LinearFunctional:
    """Coefficients of the estimand as a linear functional on a finite support.

    Only contrast kinds reduce to support reweighting; both intervention
    points ``(1, x)`` and ``(0, x)`` must be in the support for every
    covariate value. Derivative kinds go through ``derivative_functional``.
    """
    if not m.binary_treatment:
        raise ValueError("derivative moments need a conditional score; use derivative_functional")
    index = {dist.support[i].tobytes(): i for i in range(dist.size)}
    ell = np.zeros(dist.size)
    for i in range(dist.size):
        x_i = dist.x[i]
        j1 = index.get(np.concatenate([[1.0], x_i]).tobytes())
        j0 = index.get(np.concatenate([[0.0], x_i]).tobytes())
        if j1 is None or j0 is None:
            raise ValueError(
                "support is not closed under intervention: missing (1, x) or (0, x)"
                f" for covariates {x_i.tolist()}"
            )
        w = dist.probs[i]
        if m.kind == "ate":
            ell[j1] += w
            ell[j0] -= w
        else:
            pi = float(m.policy_values(x_i[None, :])[0])
            ell[j1] += w * pi
            ell[j0] += w * (1.0 - pi)
    return LinearFunctional(ell=ell)


def derivative_functional(
    m: MomentFunctional, dist: FiniteDistribution, score: np.ndarray
) -> LinearFunctional:
    """Derivative estimand as a linear functional, via integration by parts.

    Given the conditional score ``s_i = d/da log p(a_i | x_i)`` at each
    support point, ``E[pi(x) df/da] = -E[pi(x) s f]`` when the treatment
    density vanishes at the boundary, so the coefficients are
    ``ell_i = -w_i pi_i s_i``.
    """
    if m.binary_treatment:
        raise ValueError("contrast moments are induced directly; use induced_functional")
    score = np.asarray(score, dtype=np.float64)
    if score.shape != (dist.size,):
        raise ValueError(f"score has shape {score.shape}, expected ({dist.size},)")
    weight = np.ones(dist.size) if m.kind == "ade" else m.policy_values(dist.x)
    return LinearFunctional(ell=-dist.probs * weight * score)
