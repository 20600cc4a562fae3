"""Command line interface ``imp-lab``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import scm as scm_mod
from .baselines import LinearModel, pooled_ols
from .continuous import DEFAULT_BANDWIDTH, ContPredictor, enumerate_candidates_cont, fit_imp_continuous
from .discrete import (INVARIANCE, RESIDUAL, MatchPredictor, SelectionConfig, enumerate_candidates, fit_imp_discrete,
                       predict_discrete)
from .errors import RankDeficiencyError
from .experiments import ExperimentConfig, make_scenario, run_experiment, sample_continuous_envs, sample_discrete
from .panel import ContinuousData, PanelDataset, PanelSchema, load_panel_csv, write_panel_csv
from .report import _cell, dump_json, emit_report

log = logging.getLogger("implab")


def _read_json(path):
    return json.loads(Path(path).read_text())


def _write_rows(path, fields, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for r in rows:
            writer.writerow([_cell(r.get(f)) for f in fields])


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args):
    doc = _read_json(args.config)
    lam = float(doc.pop("lambda", 0.0))
    doc["seed"] = args.seed
    config = ExperimentConfig.from_dict(doc)
    if config.kind == "csv_panel":
        raise SystemExit("simulate needs a simulation kind, not csv_panel")
    scenario = make_scenario(config, 0, lam)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = scenario.scm.d
    features = [f"X{j}" for j in range(d)]
    if config.kind == "continuous_xy":
        schema = PanelSchema(y_col="Y", feature_cols=features, u_col="U")
        train, tests = sample_continuous_envs(config, scenario, 0)
        test = tests[0]
        write_panel_csv(train, out / "train.csv", schema)
        write_panel_csv(ContinuousData(test.U, test.X, test.y, features), out / "test.csv", schema)
        specs = []
    else:
        schema = PanelSchema(y_col="Y", feature_cols=features, env_col="env")
        train, tests = sample_discrete(config, scenario, 0)
        write_panel_csv(train, out / "train.csv", schema)
        test = PanelDataset(
            np.concatenate([t.X for t in tests]),
            np.concatenate([t.y for t in tests]),
            np.concatenate([[t.label] * t.y.shape[0] for t in tests]),
            features,
        )
        write_panel_csv(test, out / "test.csv", schema)
        specs = list(scenario.train_specs) + list(scenario.test_specs)
    dump_json(schema.to_dict(), out / "schema.json")
    doc = scm_mod.scm_to_dict(scenario.scm, specs)
    if config.kind == "continuous_xy":
        doc["continuous_edits"] = {
            "train": scm_mod.spec_to_dict(scm_mod.InterventionSpec("train", scenario.train_edits))["edits"],
            "test": scm_mod.spec_to_dict(scm_mod.InterventionSpec("test", scenario.test_edits))["edits"],
        }
    dump_json(doc, out / "scm.json")
    print(f"wrote {out / 'train.csv'}, {out / 'test.csv'}, {out / 'schema.json'}, {out / 'scm.json'}")
    return 0


# ---------------------------------------------------------------------------
# fit / predict


def cmd_fit(args):
    schema = PanelSchema.from_json(args.schema)
    if schema.mode != args.mode:
        raise SystemExit(f"schema describes {schema.mode} environments but --mode is {args.mode}")
    data, report = load_panel_csv(args.train, schema)
    if report.rows_dropped:
        log.warning("dropped %d of %d rows with missing values", report.rows_dropped, report.rows_read)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = SelectionConfig(score_kind=args.score, n_bootstrap=args.n_bootstrap, quantile=args.quantile,
                             seed=args.seed)
    if args.mode == "discrete":
        fallback = pooled_ols(data)
    else:
        fallback = pooled_ols(PanelDataset(data.X, data.y, np.zeros(data.n, dtype=int), data.feature_names))
    doc = {
        "mode": args.mode,
        "schema": schema.to_dict(),
        "score_kind": args.score,
        "fallback": fallback.to_dict(),
    }
    if args.mode == "discrete":
        min_s = args.min_s_size
        if args.max_s_size is None and min_s == 0 and data.d > 8:
            log.warning("d=%d: restricting the search to S = all predictors (use --max-s-size to change)", data.d)
            min_s = data.d
        cands = tuple(enumerate_candidates(data.d, max_s_size=args.max_s_size, min_s_size=min_s,
                                           max_candidates=args.max_candidates))
        model = fit_imp_discrete(data, config, cands)
    else:
        if args.score != RESIDUAL:
            raise SystemExit("continuous mode supports only the residual score")
        cands = tuple(enumerate_candidates_cont(data.d, max_s_size=args.max_s_size,
                                                max_candidates=args.max_candidates))
        model = fit_imp_continuous(data, config, cands, args.bandwidth)
    doc["found"] = model.found
    doc["n_candidates"] = len(cands)
    doc["cutoffs"] = {"c_imp": model.selection.c_imp, "c_pred": model.selection.c_pred}
    doc["predictors"] = [p.to_dict() for p in model.predictors]
    dump_json(doc, out / "model.json")
    rows = model.score_rows()
    fields = list(rows[0]) if rows else []
    _write_rows(out / "scores.csv", fields, rows)
    status = f"{len(model.predictors)} candidate(s) selected" if model.found else "no IMP found; OLS fallback"
    print(f"{status}; wrote {out / 'model.json'} and {out / 'scores.csv'}")
    return 0


def _predict_frame(model_doc, data):
    fallback = LinearModel.from_dict(model_doc["fallback"])
    if model_doc["mode"] == "discrete":
        preds = [MatchPredictor.from_dict(p) for p in model_doc["predictors"]]
        out = np.empty(data.n)
        for lab in data.environments:
            mask = data.env == lab
            out[mask] = fallback.predict(data.X[mask])
            if preds:
                try:
                    out[mask] = predict_discrete(preds, data.X[mask])
                except RankDeficiencyError as exc:
                    log.warning("environment %s: %s; using pooled least squares", lab, exc)
        return out
    preds = [ContPredictor.from_dict(p) for p in model_doc["predictors"]]
    if not preds:
        return fallback.predict(data.X)
    return np.mean([p.predict(data.U, data.X) for p in preds], axis=0)


def cmd_predict(args):
    model_doc = _read_json(args.model)
    schema = PanelSchema.from_dict(model_doc["schema"])
    data, report = load_panel_csv(args.test, schema, require_y=False, min_environments=1)
    if report.rows_dropped:
        log.warning("dropped %d of %d rows with missing values", report.rows_dropped, report.rows_read)
    pred = _predict_frame(model_doc, data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    has_y = not np.all(np.isnan(data.y))
    if isinstance(data, PanelDataset):
        env = [str(v) for v in data.env.tolist()]
        env_field = schema.env_col
    else:
        env = data.U.tolist()
        env_field = schema.u_col
    rows = [{"row": i, env_field: env[i], "prediction": pred[i], schema.y_col: data.y[i] if has_y else None}
            for i in range(data.n)]
    fields = ["row", env_field, "prediction"] + ([schema.y_col] if has_y else [])
    _write_rows(out / "predictions.csv", fields, rows)
    written = [out / "predictions.csv"]
    if has_y:
        rss_rows = []
        if isinstance(data, PanelDataset):
            for lab in data.environments:
                m = data.env == lab
                rss_rows.append({"test_env": str(lab), "n": int(m.sum()),
                                 "mean_rss": float(np.mean((pred[m] - data.y[m]) ** 2))})
        else:
            rss_rows.append({"test_env": "test", "n": data.n, "mean_rss": float(np.mean((pred - data.y) ** 2))})
        _write_rows(out / "rss.csv", ["test_env", "n", "mean_rss"], rss_rows)
        written.append(out / "rss.csv")
    print("wrote " + ", ".join(map(str, written)))
    return 0


# ---------------------------------------------------------------------------
# experiment


def cmd_experiment(args):
    doc = _read_json(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    config = ExperimentConfig.from_dict(doc)
    report = run_experiment(config)
    paths = emit_report(report, args.out)
    summary = report.summary()
    for method, entries in summary.items():
        for e in entries:
            lam = "" if e["lambda"] is None else f" lambda={e['lambda']}"
            print(f"{method}{lam}: median mean RSS {e['median']:.4g} (IQR {e['iqr']:.4g}, n={e['n_replicates']})")
    print("wrote " + ", ".join(map(str, paths)))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="imp-lab", description="Invariant matching prediction across environments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a model and train/test CSVs")
    p.add_argument("--config", required=True, help="experiment config JSON (simulation kinds)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="simulation", help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit an IMP model on a panel CSV")
    p.add_argument("--train", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--mode", choices=("discrete", "continuous"), required=True)
    p.add_argument("--out", default=".", help="output directory for model.json and scores.csv")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--score", choices=(RESIDUAL, INVARIANCE), default=RESIDUAL)
    p.add_argument("--n-bootstrap", type=int, default=50)
    p.add_argument("--quantile", type=float, default=0.9)
    p.add_argument("--max-s-size", type=int)
    p.add_argument("--min-s-size", type=int, default=0)
    p.add_argument("--max-candidates", type=int)
    p.add_argument("--bandwidth", type=float, default=DEFAULT_BANDWIDTH)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict a test CSV with a fitted model")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", default=".", help="output directory for predictions.csv and rss.csv")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("experiment", help="run a configured simulation study")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
