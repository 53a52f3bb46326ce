"""Debiased estimation of average moment effects via moment-constrained learning.

The package combines four layers:

* :mod:`mcdebias.oracle` computes every identity exactly on finite discrete
  distributions, which anchors all floating-point expectations in the tests.
* :mod:`mcdebias.moments` defines the supported average moment functionals
  (treatment contrasts, policy effects, treatment derivatives) and their
  known centering functions.
* :mod:`mcdebias.neural` and :mod:`mcdebias.learners` fit a multi-headed
  network whose constrained head converges to the projection of the
  centering function onto the zero-moment subspace, from which the Riesz
  representer is reconstructed without estimating densities.
* :mod:`mcdebias.estimators` turns fitted nuisances into point estimates
  with influence-curve standard errors, and :mod:`mcdebias.scenarios` plus
  :mod:`mcdebias.bench` provide ground-truth simulation and replication.
"""

from .oracle import (
    FiniteDistribution,
    LinearFunctional,
    exact_estimand,
    project_orthocomplement,
    reconstruct_rr,
    riesz_exact,
)
from .moments import MomentFunctional, ate, ape, ade, ipe
from .estimators import FittedNuisances, estimate_all

__all__ = [
    "FiniteDistribution",
    "LinearFunctional",
    "riesz_exact",
    "project_orthocomplement",
    "reconstruct_rr",
    "exact_estimand",
    "MomentFunctional",
    "ate",
    "ape",
    "ade",
    "ipe",
    "FittedNuisances",
    "estimate_all",
]

__version__ = "0.1.0"
