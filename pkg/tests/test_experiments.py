"""Experiment recipes, the runner and report files."""

import json

import numpy as np
import pytest

from implab import scm as S
from implab.experiments import (ExperimentConfig, make_scenario, run_experiment, run_replicate, sample_discrete)
from implab.report import EvalReport, emit_report

SMALL = dict(replicates=2, n_variables=5, n_intervened_x=2, n_per_env=120, n_bootstrap=3, n_train_envs=3, n_test_envs=2)


class TestConfig:
    def test_defaults_by_kind(self):
        assert ExperimentConfig("discrete_x").n_variables == 9
        assert ExperimentConfig("discrete_x").n_bootstrap == 50
        c = ExperimentConfig("continuous_xy")
        assert c.methods == ("imp", "ols") and c.n_variables == 5
        assert ExperimentConfig("robustness_sweep").test_range == (-5.0, 5.0)

    def test_round_trip(self):
        c = ExperimentConfig("discrete_y", **SMALL)
        assert ExperimentConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c

    @pytest.mark.parametrize("bad", [
        {"kind": "nope"},
        {"kind": "discrete_x", "methods": ["magic"]},
        {"kind": "discrete_x", "train_range": [2, 1]},
        {"kind": "discrete_x", "replicates": 0},
        {"kind": "discrete_x", "colour": "red"},
        {"kind": "csv_panel"},
        {"kind": "continuous_xy", "methods": ["anchor"]},
        {"kind": "discrete_xy", "n_variables": 5, "n_intervened_x": 4},
    ])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict(bad)


class TestScenarios:
    def test_discrete_x_shifts_only_intervened(self):
        cfg = ExperimentConfig("discrete_x", **SMALL)
        sc = make_scenario(cfg, 0)
        for spec in sc.train_specs + sc.test_specs:
            assert {e.target for e in spec.edits} == set(sc.intervened)
            assert all(e.kind == S.SHIFT for e in spec.edits)

    def test_discrete_y_perturbs_parents_of_response(self):
        cfg = ExperimentConfig("discrete_y", **SMALL)
        sc = make_scenario(cfg, 1)
        parents = set(S.graph_sets(sc.scm).pa_y)
        for spec in sc.test_specs:
            coef = [e for e in spec.edits if e.kind == S.COEFFICIENT]
            assert coef and {e.source for e in coef} <= parents
            assert all(-10 <= e.payload <= 10 for e in spec.edits)

    def test_discrete_xy_keeps_a_clean_child(self):
        cfg = ExperimentConfig("discrete_xy", **SMALL)
        for rep in range(5):
            sc = make_scenario(cfg, rep)
            assert S.graph_sets(sc.scm, sc.intervened).assumption_2()

    def test_robustness_protected_child_untouched_at_zero(self):
        cfg = ExperimentConfig("robustness_sweep", **SMALL)
        sc = make_scenario(cfg, 0, 0.0)
        assert sc.protected_child in S.graph_sets(sc.scm).ch_y
        for spec in sc.train_specs:
            assert all(e.target != sc.protected_child for e in spec.edits)
        hit = make_scenario(cfg, 0, 0.5)
        assert any(e.target == sc.protected_child for e in hit.train_specs[0].edits)

    def test_robustness_strengths_share_model(self):
        cfg = ExperimentConfig("robustness_sweep", **SMALL)
        a, b = make_scenario(cfg, 0, 0.0), make_scenario(cfg, 0, 1.0)
        np.testing.assert_array_equal(a.scm.joint_matrix(), b.scm.joint_matrix())

    def test_continuous_edits_are_sines(self):
        sc = make_scenario(ExperimentConfig("continuous_xy", **SMALL), 0)
        assert all(isinstance(e.payload, S.Sine) for e in sc.train_edits)
        assert all(e.payload.amplitude == 5.0 for e in sc.test_edits)

    def test_oracle_matches_population(self):
        cfg = ExperimentConfig("discrete_y", **SMALL)
        sc = make_scenario(cfg, 0)
        _, tests = sample_discrete(cfg, sc, 0)
        t = tests[0]
        assert np.mean((t.oracle - t.y) ** 2) == pytest.approx(t.sigma2, rel=0.3)


class TestRunner:
    @pytest.mark.parametrize("kind", ["discrete_x", "discrete_y", "discrete_xy"])
    def test_discrete_rows(self, kind):
        cfg = ExperimentConfig(kind, **SMALL)
        report = run_experiment(cfg)
        assert report.methods() == ["anchor", "imp", "imp_inv", "ols"]
        assert len(report.rows) == 4 * 2 * 2
        assert all(np.isfinite(r["mean_rss"]) for r in report.rows)

    def test_robustness_rows(self):
        cfg = ExperimentConfig("robustness_sweep", lambdas=(0.0, 1.0), **SMALL)
        report = run_experiment(cfg)
        assert report.lambdas("imp") == [0.0, 1.0]
        assert len(report.replicate_means("imp", 1.0)) == 2

    def test_continuous_rows(self):
        cfg = ExperimentConfig("continuous_xy", replicates=1, n_per_env=300, n_bootstrap=1, max_candidates=20)
        report = run_experiment(cfg)
        assert report.methods() == ["imp", "ols"]

    def test_replicates_independent_of_order(self):
        cfg = ExperimentConfig("discrete_x", **SMALL)
        report = run_experiment(cfg)
        rows, _, _ = run_replicate(cfg, 1)
        assert [r for r in report.rows if r["replicate"] == 1] == rows

    def test_parallel_matches_serial(self):
        cfg = ExperimentConfig("discrete_x", **SMALL)
        par = ExperimentConfig.from_dict({**cfg.to_dict(), "workers": 2})
        assert run_experiment(cfg).rows == run_experiment(par).rows

    def test_csv_panel(self, tmp_path):
        from implab.panel import PanelDataset, PanelSchema, write_panel_csv
        rng = np.random.default_rng(0)
        schema = PanelSchema("y", ("a", "b"), env_col="g")
        def panel(labels):
            env = np.repeat(labels, 40)
            X = rng.standard_normal((env.size, 2))
            return PanelDataset(X, X @ [1.0, -1.0] + rng.standard_normal(env.size), env, ("a", "b"))
        write_panel_csv(panel(["p", "q", "r"]), tmp_path / "train.csv", schema)
        write_panel_csv(panel(["s", "t"]), tmp_path / "test.csv", schema)
        cfg = ExperimentConfig("csv_panel", train_csv=str(tmp_path / "train.csv"),
                               test_csv=str(tmp_path / "test.csv"), schema=schema.to_dict(), n_bootstrap=2)
        report = run_experiment(cfg)
        assert {r["test_env"] for r in report.rows} == {"s", "t"}


class TestReport:
    def make(self):
        rows = [
            {"method": "imp", "replicate": r, "lambda": None, "test_env": e, "mean_rss": float(r + i),
             "oracle_rss": np.nan, "sigma2": np.nan, "n_selected": 1, "fallback": 0}
            for r in range(4) for i, e in enumerate(["a", "b"])
        ]
        return EvalReport(rows=rows, config={"kind": "test"})

    def test_replicate_means(self):
        np.testing.assert_allclose(self.make().replicate_means("imp"), [0.5, 1.5, 2.5, 3.5])

    def test_summary(self):
        s = self.make().summary()["imp"][0]
        assert s["median"] == pytest.approx(2.0)
        assert s["iqr"] == pytest.approx(np.subtract(*np.quantile([0.5, 1.5, 2.5, 3.5], [0.75, 0.25])))

    def test_files_byte_stable(self, tmp_path):
        a = emit_report(self.make(), tmp_path / "a")
        b = emit_report(self.make(), tmp_path / "b")
        for p, q in zip(a, b):
            assert p.read_bytes() == q.read_bytes()
        assert json.loads((tmp_path / "a" / "summary.json").read_text())["methods"]["imp"][0]["n_replicates"] == 4
        assert ",," in (tmp_path / "a" / "report.csv").read_text()
