"""Comparison methods: pooled least squares and anchor regression."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._random import make_rng
from .estimators import ols_fit
from .panel import PanelDataset

ANCHOR_GRID = tuple(round(0.05 * i, 2) for i in range(11))


@dataclass(frozen=True, eq=False)
class LinearModel:
    """``y = intercept + X @ coefficients``, tagged with the method that produced it."""

    coefficients: np.ndarray
    intercept: float
    method: str
    gamma: float | None = None

    def __post_init__(self):
        if not (np.all(np.isfinite(self.coefficients)) and np.isfinite(self.intercept)):
            raise ValueError("model has non-finite entries")

    def predict(self, X):
        return np.atleast_2d(np.asarray(X, dtype=float)) @ self.coefficients + self.intercept

    def to_dict(self):
        out = {"method": self.method, "coefficients": self.coefficients.tolist(), "intercept": self.intercept}
        if self.gamma is not None:
            out["gamma"] = self.gamma
        return out

    @classmethod
    def from_dict(cls, doc):
        return cls(np.asarray(doc["coefficients"], dtype=float), float(doc["intercept"]), doc["method"],
                   doc.get("gamma"))


def pooled_ols(panel: PanelDataset) -> LinearModel:
    """Least squares of ``y`` on ``[1, X]`` over all environments together."""
    fit = ols_fit(panel.X, panel.y, label="pooled X")
    return LinearModel(fit.coefficients, fit.intercept, "ols")


def _env_means(values, codes, counts):
    sums = np.zeros((counts.shape[0],) + values.shape[1:])
    np.add.at(sums, codes, values)
    return (sums / counts.reshape((-1,) + (1,) * (values.ndim - 1)))[codes]


def anchor_regression(panel: PanelDataset, gamma: float) -> LinearModel:
    """Anchor regression with environment indicators as anchors.

    After centring, ``X`` and ``y`` are multiplied by
    ``I + (sqrt(gamma) - 1) Pi_A``, where ``Pi_A`` replaces each row by its
    environment mean, and regressed by least squares.  ``gamma = 1`` is
    pooled least squares; ``gamma = 0`` uses only within-environment
    variation.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    mx, my = panel.X.mean(axis=0), panel.y.mean()
    Xc, yc = panel.X - mx, panel.y - my
    codes = panel.codes()
    counts = np.bincount(codes).astype(float)
    shrink = np.sqrt(gamma) - 1.0
    Xt = Xc + shrink * _env_means(Xc, codes, counts)
    yt = yc + shrink * _env_means(yc, codes, counts)
    fit = ols_fit(Xt, yt, with_intercept=False, label="anchor-transformed X")
    coef = fit.coefficients
    return LinearModel(coef, float(my - coef @ mx), "anchor", float(gamma))


def stratified_folds(codes, folds, seed):
    """Fold index per row; rows of every environment are spread over all folds."""
    rng = make_rng(seed, 0xF01D)
    out = np.empty(codes.shape[0], dtype=int)
    for e in np.unique(codes):
        idx = np.flatnonzero(codes == e)
        out[rng.permutation(idx)] = np.arange(idx.shape[0]) % folds
    return out


def anchor_cv(panel: PanelDataset, grid=ANCHOR_GRID, folds=5, seed=0) -> LinearModel:
    """Anchor regression with ``gamma`` chosen by environment-stratified cross-validation.

    The ``gamma`` with the smallest mean held-out MSE wins; exact ties go
    to the smaller value.  The returned model is refitted on all data.
    """
    grid = sorted(float(g) for g in grid)
    if not grid:
        raise ValueError("grid is empty")
    codes = panel.codes()
    fold = stratified_folds(codes, folds, seed)
    cv = np.zeros(len(grid))
    for f in range(folds):
        test = fold == f
        train = PanelDataset(panel.X[~test], panel.y[~test], panel.env[~test], panel.feature_names)
        for i, g in enumerate(grid):
            model = anchor_regression(train, g)
            cv[i] += np.mean((model.predict(panel.X[test]) - panel.y[test]) ** 2) / folds
    best = grid[int(np.argmin(cv))]
    return anchor_regression(panel, best)
