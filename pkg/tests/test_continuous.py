"""Continuous-environment matching with varying-coefficient fits."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implab.continuous import (MIN_SAMPLES, ContCandidate, ContPredictor, bootstrap_cutoffs_cont,
                               enumerate_candidates_cont, fit_candidate_continuous, fit_imp_continuous,
                               predict_continuous, score_candidates_cont)
from implab.discrete import INVARIANCE, SelectionConfig
from implab.errors import BandwidthError, NoImpFoundError
from implab.panel import ContinuousData

from conftest import toy_continuous

TRUE = ContCandidate(P=(0,), k=2, S=(0, 1, 2), R=(0, 1))


def brute_force_count(d, include_empty_p=False):
    count = 0
    nodes = range(d)
    for k in nodes:
        for s in range(d + 1):
            for S in itertools.combinations(nodes, s):
                for r in range(d + 1):
                    for R in itertools.combinations(nodes, r):
                        if k in R or not set(R) <= set(S):
                            continue
                        for p in range(len(R) + 1):
                            for P in itertools.combinations(R, p):
                                if P or include_empty_p:
                                    count += 1
    return count


@pytest.fixture(scope="module")
def toy():
    return toy_continuous(1500, seed=0)


class TestEnumeration:
    @pytest.mark.parametrize("d", [2, 3, 4])
    def test_count(self, d):
        assert len(list(enumerate_candidates_cont(d))) == brute_force_count(d)
        assert len(list(enumerate_candidates_cont(d, include_empty_p=True))) == brute_force_count(d, True)

    def test_known_counts(self):
        assert len(list(enumerate_candidates_cont(3))) == 42
        assert len(list(enumerate_candidates_cont(4))) == 296

    def test_ordered(self):
        cands = list(enumerate_candidates_cont(3))
        assert cands == sorted(cands)
        assert len(list(enumerate_candidates_cont(3, max_candidates=4))) == 4

    @pytest.mark.parametrize("bad", [
        dict(P=(2,), k=2, S=(0, 1, 2), R=(0, 1)),
        dict(P=(1,), k=2, S=(0, 1, 2), R=(0,)),
        dict(P=(0,), k=2, S=(0, 1), R=(0, 2)),
    ])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            ContCandidate(**bad)


class TestFit:
    def test_true_matching_parameter(self, toy):
        fit = fit_candidate_continuous(toy, TRUE)
        assert fit.feasible
        # varying parts: M = 0.5 (a(U) - 1) X0 and M_V = (1 + a(U)) X0,
        # so M = [1, X0, M_V] (0, -1, 0.5)
        np.testing.assert_allclose(fit.w_hat, [0.0, -1.0, 0.5], atol=0.1)
        np.testing.assert_allclose(fit.beta_hat, [0.5, 0.5], atol=0.1)
        np.testing.assert_allclose(fit.beta_V_hat, [1.0], atol=0.1)
        assert not fit.low_heterogeneity

    def test_prediction_on_shifted_environment(self, toy):
        fit = fit_candidate_continuous(toy, TRUE)
        test = toy_continuous(2000, seed=5, amplitude=3.0, u_range=(0.0, 1.0))
        mse = np.mean((fit.predict(test.U, test.X) - test.y) ** 2)
        # Var(Y | X) = 1/2 for every coefficient value
        assert mse == pytest.approx(0.5, abs=0.1)

    def test_predictor_round_trip(self, toy):
        fit = fit_candidate_continuous(toy, TRUE)
        p = ContPredictor.from_dict(fit.predictor().to_dict())
        test = toy_continuous(200, seed=1)
        np.testing.assert_allclose(p.predict(test.U, test.X), fit.predict(test.U, test.X))

    def test_true_candidate_small_T(self, toy):
        scores = score_candidates_cont(toy)
        i = scores.candidates.index(TRUE)
        f = scores.feasible
        pre = f & (scores.s_pred <= np.median(scores.s_pred[f]))
        assert pre[i]
        assert scores.T[i] <= np.sort(scores.T[pre])[2]

    def test_constant_coefficient_flagged(self):
        data = toy_continuous(600, seed=3, amplitude=0.0)
        assert fit_candidate_continuous(data, TRUE).low_heterogeneity

    def test_too_few_samples(self):
        data = toy_continuous(MIN_SAMPLES - 1, seed=0)
        with pytest.raises(ValueError):
            fit_candidate_continuous(data, TRUE)

    def test_bad_bandwidth(self, toy):
        with pytest.raises(BandwidthError):
            fit_candidate_continuous(toy, TRUE, h=0.0)

    def test_tiny_bandwidth_infeasible(self, toy):
        fit = fit_candidate_continuous(toy, TRUE, h=1e-5)
        assert not fit.feasible and fit.reason

    def test_prediction_needs_samples(self, toy):
        fit = fit_candidate_continuous(toy, TRUE)
        with pytest.raises(ValueError):
            predict_continuous(fit, toy.U[:10], toy.X[:10])

    @settings(max_examples=8, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-5, 5))
    def test_response_shift_leaves_T_unchanged(self, seed, c):
        data = toy_continuous(200, seed)
        moved = ContinuousData(data.U, data.X, data.y + c, data.feature_names)
        a = fit_candidate_continuous(data, TRUE, h=0.3)
        b = fit_candidate_continuous(moved, TRUE, h=0.3)
        assert b.T_c == pytest.approx(a.T_c, rel=1e-5, abs=1e-9)
        assert b.s_pred == pytest.approx(a.s_pred, rel=1e-6)


class TestSearch:
    def test_end_to_end(self, toy):
        model = fit_imp_continuous(toy, SelectionConfig(n_bootstrap=3))
        assert model.found
        test = toy_continuous(800, seed=9, amplitude=3.0)
        mse = np.mean((model.predict(test.U, test.X) - test.y) ** 2)
        assert mse < 1.0
        rows = model.score_rows()
        assert {"P", "k", "R", "S", "T_c", "s_pred"} <= set(rows[0])

    def test_bootstrap_reproducible(self, toy):
        cands = list(enumerate_candidates_cont(3))[:6]
        cfg = SelectionConfig(n_bootstrap=2, seed=4)
        assert bootstrap_cutoffs_cont(toy, cands, cfg) == bootstrap_cutoffs_cont(toy, cands, cfg)

    def test_invariance_score_rejected(self, toy):
        with pytest.raises(ValueError):
            fit_imp_continuous(toy, SelectionConfig(score_kind=INVARIANCE))

    def test_nothing_found(self, toy):
        model = fit_imp_continuous(toy, SelectionConfig(c_imp=-1.0, c_pred=1.0), [TRUE])
        assert not model.found
        with pytest.raises(NoImpFoundError):
            model.predict(toy.U, toy.X)
