"""Evaluation reports and their files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ROW_FIELDS = ("method", "replicate", "lambda", "test_env", "mean_rss", "oracle_rss", "sigma2",
              "n_selected", "fallback")
LOG_FIELDS = ("method", "replicate", "lambda", "found", "n_selected", "candidates")
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


def _clean(value):
    """JSON/CSV-ready scalar: NaN becomes ``None``, numpy scalars become Python ones."""
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return None if math.isnan(value) else value
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def _cell(value):
    value = _clean(value)
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class EvalReport:
    """Per ``(method, replicate, lambda, test_env)`` rows plus selection logs.

    ``lambda`` is ``None`` outside robustness sweeps.  ``mean_rss`` is the
    average squared residual over one test environment; ``oracle_rss`` is
    the same for ``E[Y | X]`` and ``sigma2`` the population ``Var(Y | X)``,
    both blank when the generating model is unknown.
    """

    rows: list = field(default_factory=list)
    logs: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def methods(self):
        return sorted({r["method"] for r in self.rows})

    def replicate_means(self, method, lam=None):
        """Mean RSS across test environments, one value per replicate (replicate order)."""
        by_rep = {}
        for r in self.rows:
            if r["method"] == method and r["lambda"] == lam:
                by_rep.setdefault(r["replicate"], []).append(r["mean_rss"])
        return np.array([np.mean(by_rep[k]) for k in sorted(by_rep)])

    def lambdas(self, method):
        vals = {r["lambda"] for r in self.rows if r["method"] == method}
        return sorted(vals, key=lambda v: (v is not None, v if v is not None else 0.0))

    def summary(self):
        """Median, quartiles and IQR of the per-replicate mean RSS for each method and lambda."""
        out = {}
        for m in self.methods():
            entries = []
            for lam in self.lambdas(m):
                v = self.replicate_means(m, lam)
                q25, q50, q75 = np.quantile(v, [0.25, 0.5, 0.75])
                entries.append({
                    "lambda": lam,
                    "n_replicates": int(v.size),
                    "median": float(q50),
                    "q25": float(q25),
                    "q75": float(q75),
                    "iqr": float(q75 - q25),
                    "mean": float(v.mean()),
                })
            out[m] = entries
        return out

    def quantile_rows(self):
        rows = []
        for m in self.methods():
            for lam in self.lambdas(m):
                v = self.replicate_means(m, lam)
                qs = np.quantile(v, QUANTILES)
                row = {"method": m, "lambda": lam, "n": int(v.size)}
                row.update({f"q{int(round(q * 100)):02d}": float(x) for q, x in zip(QUANTILES, qs)})
                rows.append(row)
        return rows


def _write_csv(path, fields, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for r in rows:
            writer.writerow([_cell(r.get(f)) for f in fields])


def _json_ready(obj):
    if isinstance(obj, dict):
        return {str(k): _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_ready(obj.tolist())
    return _clean(obj)


def dump_json(obj, path):
    """Write ``obj`` as sorted, indented JSON with NaN mapped to null."""
    Path(path).write_text(json.dumps(_json_ready(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")


def emit_report(report: EvalReport, out_dir, formats=("csv", "json", "quantiles")):
    """Write the report files into ``out_dir`` and return their paths.

    ``csv`` gives ``report.csv`` (long format) and ``selections.csv``;
    ``json`` gives ``summary.json``; ``quantiles`` gives
    ``quantiles.csv`` for external plotting.  Output is byte-identical for
    equal reports.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        _write_csv(out / "report.csv", ROW_FIELDS, report.rows)
        _write_csv(out / "selections.csv", LOG_FIELDS, report.logs)
        written += [out / "report.csv", out / "selections.csv"]
    if "json" in formats:
        dump_json({"config": report.config, "methods": report.summary(), "skipped": report.skipped},
                  out / "summary.json")
        written.append(out / "summary.json")
    if "quantiles" in formats:
        fields = ("method", "lambda", "n") + tuple(f"q{int(round(q * 100)):02d}" for q in QUANTILES)
        _write_csv(out / "quantiles.csv", fields, report.quantile_rows())
        written.append(out / "quantiles.csv")
    return written
