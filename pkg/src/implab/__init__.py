"""Invariant matching prediction for linear models across environments.

Submodules
----------
scm
    Linear structural causal models, interventions, sampling and moments.
estimators
    Least squares, local-linear smoothing and the invariance test.
discrete
    Matching predictors for discrete environments.
continuous
    Matching predictors for a continuous environment variable.
baselines
    Pooled least squares and anchor regression.
experiments, report, cli
    Simulation studies, their reports and the ``imp-lab`` command.
"""

from .baselines import LinearModel, anchor_cv, anchor_regression, pooled_ols
from .continuous import ContCandidate, ContImpModel, fit_imp_continuous
from .discrete import DiscreteImpModel, ImpCandidate, SelectionConfig, fit_imp_discrete
from .panel import ContinuousData, PanelDataset, PanelSchema
from .scm import LinearScm

__all__ = [
    "ContCandidate",
    "ContImpModel",
    "ContinuousData",
    "DiscreteImpModel",
    "ImpCandidate",
    "LinearModel",
    "LinearScm",
    "PanelDataset",
    "PanelSchema",
    "SelectionConfig",
    "anchor_cv",
    "anchor_regression",
    "fit_imp_continuous",
    "fit_imp_discrete",
    "pooled_ols",
]
