"""Multi-environment datasets and their CSV form."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Observations ``(X, y)`` from discretely labelled environments.

    Rows are kept in the order given; ``env`` holds one label per row.
    ``environments`` lists the distinct labels in order of first
    appearance.
    """

    X: np.ndarray
    y: np.ndarray
    env: np.ndarray
    feature_names: tuple = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        X = np.asarray(self.X, dtype=float).reshape(y.shape[0], -1)
        env = np.asarray(self.env)
        if env.shape != y.shape:
            raise ValueError("env must hold one label per row")
        names = tuple(self.feature_names) or tuple(f"X{j}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise ValueError("feature_names does not match the number of columns")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "env", env)
        object.__setattr__(self, "feature_names", names)

    @classmethod
    def from_groups(cls, groups, labels=None, feature_names=()):
        """Build from a list of ``(X_e, y_e)`` pairs."""
        labels = list(range(len(groups))) if labels is None else list(labels)
        X = np.concatenate([np.asarray(g[0], dtype=float) for g in groups])
        y = np.concatenate([np.asarray(g[1], dtype=float).ravel() for g in groups])
        env = np.concatenate([np.full(len(np.asarray(g[1]).ravel()), lab) for g, lab in zip(groups, labels)])
        return cls(X, y, env, feature_names)

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    @property
    def environments(self):
        _, first = np.unique(self.env, return_index=True)
        return tuple(self.env[np.sort(first)].tolist())

    def codes(self):
        """Integer environment index per row, following :attr:`environments`."""
        lookup = {lab: i for i, lab in enumerate(self.environments)}
        return np.array([lookup[v] for v in self.env.tolist()], dtype=int)

    def groups(self):
        """List of ``(label, X_e, y_e)`` in environment order."""
        out = []
        for lab in self.environments:
            mask = self.env == lab
            out.append((lab, self.X[mask], self.y[mask]))
        return out

    def subset(self, labels):
        mask = np.isin(self.env, list(labels))
        return PanelDataset(self.X[mask], self.y[mask], self.env[mask], self.feature_names)


@dataclass(frozen=True, eq=False)
class ContinuousData:
    """Observations ``(U, X, y)`` indexed by a real environment variable ``U``."""

    U: np.ndarray
    X: np.ndarray
    y: np.ndarray
    feature_names: tuple = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        U = np.asarray(self.U, dtype=float).ravel()
        X = np.asarray(self.X, dtype=float).reshape(y.shape[0], -1)
        if U.shape != y.shape:
            raise ValueError("U must hold one value per row")
        names = tuple(self.feature_names) or tuple(f"X{j}" for j in range(X.shape[1]))
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    def take(self, idx):
        return ContinuousData(self.U[idx], self.X[idx], self.y[idx], self.feature_names)


@dataclass(frozen=True)
class PanelSchema:
    """Column roles of a panel CSV.

    Exactly one of ``env_col`` (discrete, read as strings) and ``u_col``
    (continuous, numeric) is set.  ``y_col`` may be absent from test files.
    """

    y_col: str
    feature_cols: tuple
    env_col: str | None = None
    u_col: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "feature_cols", tuple(self.feature_cols))
        if (self.env_col is None) == (self.u_col is None):
            raise ValueError("set exactly one of env_col and u_col")

    @property
    def mode(self):
        return "discrete" if self.env_col is not None else "continuous"

    @classmethod
    def from_dict(cls, doc):
        return cls(
            y_col=doc["y_col"],
            feature_cols=tuple(doc["feature_cols"]),
            env_col=doc.get("env_col"),
            u_col=doc.get("u_col"),
        )

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        out = {"y_col": self.y_col, "feature_cols": list(self.feature_cols)}
        if self.env_col is not None:
            out["env_col"] = self.env_col
        else:
            out["u_col"] = self.u_col
        return out


@dataclass(frozen=True)
class LoadReport:
    rows_read: int
    rows_dropped: int


class PanelFormatError(ValueError):
    """A panel CSV does not match its schema."""


def read_panel_frame(path, schema: PanelSchema, require_y=True):
    """Read and validate a panel CSV; returns ``(frame, LoadReport)`` with NaN rows removed."""
    dtype = {schema.env_col: str} if schema.env_col is not None else None
    frame = pd.read_csv(path, dtype=dtype, keep_default_na=True, float_precision="round_trip")
    needed = list(schema.feature_cols) + [schema.env_col or schema.u_col]
    if require_y or schema.y_col in frame.columns:
        needed.append(schema.y_col)
    missing = [c for c in needed if c not in frame.columns]
    if missing:
        raise PanelFormatError(f"missing columns: {', '.join(missing)}")
    numeric = [c for c in needed if c != schema.env_col]
    for c in numeric:
        if not pd.api.types.is_numeric_dtype(frame[c]):
            bad = pd.to_numeric(frame[c], errors="coerce").isna() & frame[c].notna()
            raise PanelFormatError(
                f"column {c!r} has non-numeric cells, first at row {int(np.flatnonzero(bad.to_numpy())[0]) + 1}"
            )
    frame = frame[needed]
    # an unknown response does not stop a row from being predicted
    checked = needed if require_y else [c for c in needed if c != schema.y_col]
    keep = frame[checked].notna().all(axis=1)
    report = LoadReport(rows_read=len(frame), rows_dropped=int((~keep).sum()))
    return frame[keep].reset_index(drop=True), report


def load_panel_csv(path, schema: PanelSchema, require_y=True, min_environments=2):
    """Load a panel CSV into a :class:`PanelDataset` or :class:`ContinuousData`.

    Rows with missing values are dropped and counted in the returned
    :class:`LoadReport`.  Without a response column (``require_y=False``)
    the response is filled with NaN.

    Raises
    ------
    PanelFormatError
        Missing columns, non-numeric cells, or too few environments in
        discrete mode.
    """
    frame, report = read_panel_frame(path, schema, require_y)
    X = frame[list(schema.feature_cols)].to_numpy(dtype=float)
    y = frame[schema.y_col].to_numpy(dtype=float) if schema.y_col in frame else np.full(len(frame), np.nan)
    if schema.mode == "continuous":
        data = ContinuousData(frame[schema.u_col].to_numpy(dtype=float), X, y, schema.feature_cols)
        return data, report
    env = frame[schema.env_col].to_numpy(dtype=str).astype(object)
    panel = PanelDataset(X, y, env, schema.feature_cols)
    if len(panel.environments) < min_environments:
        raise PanelFormatError(
            f"discrete mode needs at least {min_environments} environments, found {len(panel.environments)}"
        )
    return panel, report


def panel_frame(data, schema: PanelSchema):
    cols = {}
    if isinstance(data, PanelDataset):
        cols[schema.env_col] = [str(v) for v in data.env.tolist()]
    else:
        cols[schema.u_col] = data.U
    for j, c in enumerate(schema.feature_cols):
        cols[c] = data.X[:, j]
    cols[schema.y_col] = data.y
    return pd.DataFrame(cols)


def write_panel_csv(data, path, schema: PanelSchema):
    """Write a dataset in the layout :func:`load_panel_csv` reads (floats at full precision)."""
    panel_frame(data, schema).to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
