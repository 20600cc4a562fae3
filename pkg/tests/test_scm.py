"""Structural model: moments, interventions, sampling, graphs and serialization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implab import scm as S
from implab.errors import GenerationError, InterventionError, RankDeficiencyError

from conftest import brute_force_covariance, toy_env


class TestToyModel:
    def test_variance_of_child(self):
        # Y = X0 + X1 + N_Y has variance 3 and Cov(Y, X0) = 1, so
        # Var(X2) = Var(Y) + Var(X0) + 1 + 2 Cov(Y, X0) = 7.
        _, cov = S.population_moments(S.toy_scm(1.0))
        assert cov[2, 2] == pytest.approx(7.0)
        assert cov[3, 3] == pytest.approx(3.0)

    @pytest.mark.parametrize("a", [1.0, 2.0, -0.7])
    def test_conditional_mean_of_y(self, a):
        coef, intercept = S.population_lmmse(S.toy_scm(a), None, S.Y, [0, 1, 2])
        np.testing.assert_allclose(coef, [0.5 * (a - 1), 0.5, 0.5], atol=1e-12)
        assert intercept == pytest.approx(0.0)

    @pytest.mark.parametrize("a", [1.0, 2.0])
    def test_prediction_module(self, a):
        coef, _ = S.population_lmmse(S.toy_scm(a), None, 2, [0, 1])
        np.testing.assert_allclose(coef, [1 + a, 1.0], atol=1e-12)

    @pytest.mark.parametrize("a", [1.0, 2.0, 3.5])
    def test_non_matching_module(self, a):
        c = (a + 1) / ((a + 1) ** 2 + 2)
        coef, _ = S.population_lmmse(S.toy_scm(a), None, 0, [1, 2])
        np.testing.assert_allclose(coef, [-c, c], atol=1e-12)

    def test_edit_equals_direct_parameter(self):
        via_edit = S.population_moments(S.toy_scm(1.0), toy_env(2.0))
        direct = S.population_moments(S.toy_scm(2.0))
        np.testing.assert_allclose(via_edit[1], direct[1], atol=1e-12)

    def test_graph_sets(self):
        g = S.graph_sets(S.toy_scm(1.0))
        assert g.pa_y == frozenset({0, 1})
        assert g.ch_y == frozenset({2})
        assert g.mb_y == frozenset({0, 1, 2})
        assert g.assumption_1() and g.assumption_2()
        assert g.descendants[S.Y] == frozenset({2})

    def test_intervened_child_breaks_assumption_2(self):
        g = S.graph_sets(S.toy_scm(1.0), intervened=[2])
        assert g.x_int_y == frozenset({2})
        assert not g.assumption_2()

    def test_topological_order(self):
        order = S.topological_order(S.toy_scm(1.0))
        assert order.index(3) < order.index(2)
        assert order.index(0) < order.index(3)


class TestInterventions:
    def test_shift_moves_mean(self):
        env = S.InterventionSpec("e", (S.Edit(0, S.SHIFT, 2.0),))
        mean, _ = S.population_moments(S.toy_scm(1.0), env)
        np.testing.assert_allclose(mean, [2.0, 0.0, 4.0, 2.0])

    def test_noise_variance_is_set(self):
        env = S.InterventionSpec("e", (S.Edit(S.Y, S.NOISE_VARIANCE, 4.0),))
        _, cov = S.population_moments(S.toy_scm(1.0), env)
        assert cov[3, 3] == pytest.approx(6.0)

    def test_missing_edge_rejected(self):
        env = S.InterventionSpec("e", (S.Edit(1, S.COEFFICIENT, 1.0, source=0),))
        with pytest.raises(InterventionError):
            S.apply_interventions(S.toy_scm(1.0), env)

    def test_unknown_node_rejected(self):
        env = S.InterventionSpec("e", (S.Edit(7, S.SHIFT, 1.0),))
        with pytest.raises(InterventionError):
            S.apply_interventions(S.toy_scm(1.0), env)

    def test_non_positive_variance_rejected(self):
        env = S.InterventionSpec("e", (S.Edit(0, S.NOISE_VARIANCE, 0.0),))
        with pytest.raises(InterventionError):
            S.apply_interventions(S.toy_scm(1.0), env)

    def test_unknown_kind_rejected(self):
        with pytest.raises(InterventionError):
            S.Edit(0, "scale", 1.0)

    def test_callable_payload_follows_u(self):
        edits = (S.Edit(S.Y, S.COEFFICIENT, S.Sine(2.0, 1.0), source=0),)
        U = np.array([0.0, 0.25, 0.5])
        mean, cov = S.population_moments_batch(S.toy_scm(1.0), edits, U)
        for u, c in zip(U, cov):
            single = S.population_moments(S.toy_scm(1.0 + 2.0 * np.sin(2 * np.pi * u)))[1]
            np.testing.assert_allclose(c, single, atol=1e-12)

    def test_callable_needs_numeric_env(self):
        env = S.InterventionSpec("label", (S.Edit(0, S.SHIFT, S.Sine(1.0, 1.0)),))
        with pytest.raises(InterventionError):
            S.apply_interventions(S.toy_scm(1.0), env)


class TestValidation:
    def test_cycle_detected(self):
        model = S.LinearScm(gamma=[1.0], B=[[0.0]], beta=[1.0])
        report = S.validate_scm(model)
        assert not report.ok
        assert any("cycle" in v for v in report.violations)

    def test_cyclic_moments_raise_or_flag(self):
        model = S.LinearScm(gamma=[1.0], B=[[0.0]], beta=[1.0])
        with pytest.raises(RankDeficiencyError):
            S.population_moments(model)

    def test_bad_variance_flagged(self):
        model = S.LinearScm(gamma=[1.0], B=[[0.0]], beta=[0.0], noise_x_var=[-1.0])
        assert not S.validate_scm(model).ok

    def test_toy_valid(self):
        assert S.validate_scm(S.toy_scm(1.0)).ok

    def test_rank_deficient_predictors(self):
        model = S.LinearScm(gamma=[0.0, 0.0], B=[[0, 0], [1.0, 0]], beta=[1.0, 0.0], noise_x_var=[1.0, 1e-14])
        with pytest.raises(RankDeficiencyError):
            S.population_lmmse(model, None, S.Y, [0, 1])


class TestSampling:
    def test_deterministic(self):
        a = S.sample(S.toy_scm(1.0), None, 50, seed=3)
        b = S.sample(S.toy_scm(1.0), None, 50, seed=3)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, S.sample(S.toy_scm(1.0), None, 50, seed=4))

    def test_structural_equations_hold_without_noise_in_y(self):
        rows = S.sample(S.toy_scm(2.0), None, 200, seed=1)
        X, y = rows[:, :3], rows[:, 3]
        # X2 - Y - X0 is the noise of X2, independent of X0 and X1
        resid = X[:, 2] - y - X[:, 0]
        assert abs(np.corrcoef(resid, X[:, 0])[0, 1]) < 0.25

    def test_sample_moments_match_population(self):
        model = S.random_scm(S.RandomScmConfig(n_variables=6), seed=2)
        rows = S.sample(model, None, 200_000, seed=5)
        _, cov = S.population_moments(model)
        np.testing.assert_allclose(np.cov(rows.T), cov, rtol=0.05, atol=0.05 * np.max(np.diag(cov)))

    def test_continuous_sampling_shape(self):
        edits = (S.Edit(S.Y, S.COEFFICIENT, S.Sine(1.0, 1.0), source=0),)
        rows = S.sample_continuous(S.toy_scm(1.0), edits, np.linspace(0, 1, 30), seed=0)
        assert rows.shape == (30, 4)

    def test_n_must_be_positive(self):
        with pytest.raises(ValueError):
            S.sample(S.toy_scm(1.0), None, 0)


class TestConditional:
    def test_matches_lmmse(self):
        mean, cov = S.population_moments(S.toy_scm(2.0), S.InterventionSpec("e", (S.Edit(0, S.SHIFT, 1.0),)))
        X = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
        pred, var = S.conditional_y_given_x(mean, cov, X)
        coef, intercept = S.population_lmmse(S.toy_scm(2.0), S.InterventionSpec("e", (S.Edit(0, S.SHIFT, 1.0),)),
                                             S.Y, [0, 1, 2])
        np.testing.assert_allclose(pred, X @ coef + intercept)
        # Var(Y | X) in the toy model is 1/2 whatever a is
        np.testing.assert_allclose(var, 0.5)

    def test_batched_matches_single(self):
        edits = (S.Edit(S.Y, S.COEFFICIENT, S.Sine(1.0, 1.0), source=0),)
        U = np.array([0.1, 0.7])
        mean, cov = S.population_moments_batch(S.toy_scm(1.0), edits, U)
        X = np.array([[1.0, 0.5, -1.0], [0.2, 0.1, 0.3]])
        pred, var = S.conditional_y_given_x(mean, cov, X)
        for i in range(2):
            p1, v1 = S.conditional_y_given_x(mean[i], cov[i], X[i])
            assert pred[i] == pytest.approx(p1[0])
            assert var[i] == pytest.approx(v1[0])

    def test_badly_scaled_covariance(self):
        # rescaling X by s leaves Var(Y | X) unchanged and divides the coefficients by s
        mean, cov = S.population_moments(S.toy_scm(2.0), None)
        s = np.array([1e-4, 1.0, 1e4, 1.0])
        scaled_mean, scaled_cov = mean * s, cov * np.outer(s, s)
        eig = np.linalg.eigvalsh(scaled_cov[:3, :3])
        assert eig[-1] / eig[0] > 1e12
        X = np.array([[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]])
        pred, var = S.conditional_y_given_x(mean, cov, X)
        pred_s, var_s = S.conditional_y_given_x(scaled_mean, scaled_cov, X * s[:3])
        np.testing.assert_allclose(var_s, var, rtol=1e-8)
        np.testing.assert_allclose(pred_s, pred, rtol=1e-8)

    def test_singular_covariance_raises(self):
        cov = np.ones((3, 3))
        with pytest.raises(RankDeficiencyError):
            S.conditional_y_given_x(np.zeros(3), cov, np.zeros((1, 2)))


class TestRandomScm:
    def test_structure(self):
        for seed in range(10):
            model = S.random_scm(S.RandomScmConfig(n_variables=9), seed=seed)
            assert model.d == 8
            assert S.validate_scm(model).ok
            g = S.graph_sets(model)
            assert g.pa_y and g.ch_y
            A = model.joint_matrix()
            nz = np.abs(A[A != 0])
            assert np.all((nz >= 0.5) & (nz <= 1.5))

    def test_reproducible(self):
        a = S.random_scm(seed=4)
        b = S.random_scm(seed=4)
        np.testing.assert_array_equal(a.joint_matrix(), b.joint_matrix())

    def test_impossible_config(self):
        with pytest.raises(GenerationError):
            S.random_scm(S.RandomScmConfig(n_variables=4, edge_prob=0.0, max_attempts=5), seed=0)


class TestSerialization:
    def test_round_trip_with_specs(self):
        model = S.random_scm(seed=1)
        specs = [
            S.InterventionSpec("e1", (S.Edit(0, S.SHIFT, 1.5), S.Edit(S.Y, S.NOISE_VARIANCE, 2.0))),
            S.InterventionSpec(0.3, (S.Edit(1, S.SHIFT, S.Sine(2.0, 0.5)),)),
        ]
        back, back_specs = S.scm_from_json(S.scm_to_json(model, specs))
        np.testing.assert_array_equal(back.joint_matrix(), model.joint_matrix())
        assert back_specs == specs


@st.composite
def small_scms(draw):
    seed = draw(st.integers(0, 10_000))
    n = draw(st.integers(3, 7))
    p = draw(st.floats(0.2, 0.9))
    model = S.random_scm(S.RandomScmConfig(n_variables=n, edge_prob=p), seed=seed)
    var = draw(st.lists(st.floats(0.2, 3.0), min_size=model.d + 1, max_size=model.d + 1))
    return model.replace(noise_x_var=np.array(var[:-1]), noise_y_var=var[-1])


class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(small_scms())
    def test_covariance_solves_structural_equation(self, model):
        _, cov = S.population_moments(model)
        np.testing.assert_allclose(cov, brute_force_covariance(model), rtol=1e-9, atol=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(small_scms())
    def test_lmmse_residual_uncorrelated(self, model):
        d = model.d
        coef, _ = S.population_lmmse(model, None, S.Y, list(range(d)))
        _, cov = S.population_moments(model)
        # Cov(Y - coef'X, X) = 0
        np.testing.assert_allclose(cov[d, :d] - coef @ cov[:d, :d], 0.0, atol=1e-8 * (1 + np.abs(cov).max()))

    @settings(max_examples=40, deadline=None)
    @given(small_scms(), st.floats(-3, 3))
    def test_shift_does_not_change_covariance(self, model, delta):
        env = S.InterventionSpec("e", (S.Edit(0, S.SHIFT, delta),))
        np.testing.assert_allclose(S.population_moments(model, env)[1], S.population_moments(model)[1])

    @settings(max_examples=40, deadline=None)
    @given(small_scms())
    def test_serialization_round_trip(self, model):
        back, _ = S.scm_from_dict(S.scm_to_dict(model))
        np.testing.assert_array_equal(back.joint_matrix(), model.joint_matrix())
        np.testing.assert_array_equal(back.noise_var(), model.noise_var())
