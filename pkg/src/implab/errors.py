"""Exception types raised across the package."""

import numpy as np


class RankDeficiencyError(np.linalg.LinAlgError):
    """A design or covariance block is numerically singular.

    Attributes
    ----------
    condition : float
        Condition number estimate of the offending matrix (``inf`` when
        exactly singular).
    label : str or None
        Human readable name of the offending predictor set.
    """

    def __init__(self, message, condition=np.inf, label=None):
        super().__init__(message)
        self.condition = float(condition)
        self.label = label


class BandwidthError(ValueError):
    """A kernel neighbourhood holds too few points for a local fit."""

    def __init__(self, message, points=()):
        super().__init__(message)
        self.points = tuple(points)


class InterventionError(ValueError):
    """An intervention edit does not fit the model it is applied to."""


class GenerationError(RuntimeError):
    """Random model generation failed within its attempt budget."""


class NoImpFoundError(RuntimeError):
    """No candidate passed the invariant matching cutoff."""
