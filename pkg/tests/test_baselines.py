"""Pooled least squares and anchor regression."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implab.baselines import ANCHOR_GRID, LinearModel, anchor_cv, anchor_regression, pooled_ols, stratified_folds
from implab.panel import PanelDataset


def random_panel(seed, E=4, n=60, d=3):
    rng = np.random.default_rng(seed)
    env = np.repeat(np.arange(E), n)
    shifts = rng.normal(0, 2, (E, d))
    X = rng.standard_normal((E * n, d)) + shifts[env]
    y = X @ rng.standard_normal(d) + rng.normal(0, 1, E)[env] + rng.standard_normal(E * n)
    return PanelDataset(X, y, env)


def anchor_closed_form(panel, gamma):
    """Anchor regression with explicit projection onto one-hot environment indicators."""
    codes = panel.codes()
    A = np.eye(codes.max() + 1)[codes]
    Pi = A @ np.linalg.pinv(A)
    n = panel.n
    Xc = panel.X - panel.X.mean(axis=0)
    yc = panel.y - panel.y.mean()
    Wm = np.eye(n) + (np.sqrt(gamma) - 1) * Pi
    coef = np.linalg.lstsq(Wm @ Xc, Wm @ yc, rcond=None)[0]
    return coef, panel.y.mean() - coef @ panel.X.mean(axis=0)


class TestAnchor:
    def test_gamma_one_is_ols(self):
        for seed in range(10):
            panel = random_panel(seed)
            a, o = anchor_regression(panel, 1.0), pooled_ols(panel)
            np.testing.assert_allclose(a.coefficients, o.coefficients, atol=1e-10)
            assert a.intercept == pytest.approx(o.intercept, abs=1e-10)

    @pytest.mark.parametrize("gamma", [0.0, 0.3, 4.0])
    def test_matches_projection_form(self, gamma):
        panel = random_panel(1, n=30)
        coef, intercept = anchor_closed_form(panel, gamma)
        model = anchor_regression(panel, gamma)
        np.testing.assert_allclose(model.coefficients, coef, atol=1e-10)
        assert model.intercept == pytest.approx(intercept, abs=1e-10)

    def test_negative_gamma(self):
        with pytest.raises(ValueError):
            anchor_regression(random_panel(0), -0.1)

    def test_grid(self):
        assert ANCHOR_GRID[0] == 0.0 and ANCHOR_GRID[-1] == 0.5 and len(ANCHOR_GRID) == 11

    def test_cv_picks_from_grid_and_is_reproducible(self):
        panel = random_panel(3)
        a, b = anchor_cv(panel, seed=1), anchor_cv(panel, seed=1)
        assert a.gamma in ANCHOR_GRID
        np.testing.assert_array_equal(a.coefficients, b.coefficients)

    def test_cv_tie_goes_to_smaller_gamma(self):
        # a single environment makes every gamma equivalent
        rng = np.random.default_rng(0)
        X = rng.standard_normal((50, 2))
        panel = PanelDataset(X, X @ [1.0, 2.0] + rng.standard_normal(50), np.zeros(50))
        assert anchor_cv(panel, grid=(0.5, 0.2, 0.3)).gamma == 0.2

    def test_folds_stratified(self):
        codes = np.repeat([0, 1, 2], [10, 11, 12])
        folds = stratified_folds(codes, 5, seed=0)
        for e in range(3):
            counts = np.bincount(folds[codes == e], minlength=5)
            assert counts.max() - counts.min() <= 1

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.0, 10.0))
    def test_anchor_objective_is_minimised(self, seed, gamma):
        panel = random_panel(seed, n=25)
        model = anchor_regression(panel, gamma)
        codes = panel.codes()
        A = np.eye(codes.max() + 1)[codes]
        Pi = A @ np.linalg.pinv(A)

        def loss(coef):
            r = panel.y - panel.y.mean() - (panel.X - panel.X.mean(axis=0)) @ coef
            return np.sum(((np.eye(panel.n) - Pi) @ r) ** 2) + gamma * np.sum((Pi @ r) ** 2)

        base = loss(model.coefficients)
        rng = np.random.default_rng(seed)
        for _ in range(5):
            assert loss(model.coefficients + 1e-3 * rng.standard_normal(panel.d)) >= base - 1e-9


class TestLinearModel:
    def test_round_trip(self):
        m = LinearModel(np.array([1.0, 2.0]), 0.5, "anchor", 0.25)
        assert LinearModel.from_dict(m.to_dict()).gamma == 0.25
        np.testing.assert_array_equal(m.predict([[1.0, 1.0]]), [3.5])

    def test_non_finite(self):
        with pytest.raises(ValueError):
            LinearModel(np.array([np.nan]), 0.0, "ols")
