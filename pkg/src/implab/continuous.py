"""Invariant matching search for a continuous environment variable ``U``.

A candidate ``(P, k, R, S)`` fits two semiparametric varying-coefficient
models by profile least squares,

    Y   = alpha(U)^T W + beta^T Z + N,        W = [1, X_P], Z = X_{S \\ P}
    X_k = alpha_V(U)^T W + beta_V^T Z_V + N_V,              Z_V = X_{R \\ P}

and matches their varying parts ``M = alpha(U)^T W`` and
``M_V = alpha_V(U)^T W`` through ``M = [W, M_V] w`` with ``w`` invariant in
``U``.  At test time ``M_V`` is re-estimated from the test features alone
and ``Y`` is predicted by ``[W, M_V] w + Z beta``.

The constant column in ``W`` lets a shift that varies with ``U`` enter as a
varying intercept.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ._random import make_rng
from .discrete import RESIDUAL, Cutoffs, SelectionConfig, Selection, _preselect, _subsets, select_imps
from .errors import BandwidthError, NoImpFoundError, RankDeficiencyError
from .estimators import LocalLinearSmoother, ols_fit
from .panel import ContinuousData

log = logging.getLogger(__name__)

DEFAULT_BANDWIDTH = 0.1
MIN_SAMPLES = 50
MAX_CONDITION = 1e7
# fits where less than max(this, p / (n h)) of M_V varies beyond a
# fixed-coefficient function of W are flagged as weakly heterogeneous;
# p / (n h) is roughly the share that smoothing noise alone produces
LOW_HETEROGENEITY_SHARE = 0.01


@dataclass(frozen=True, order=True)
class ContCandidate:
    """Tuple ``(P, k, R, S)`` with ``P`` the predictors whose coefficients vary."""

    P: tuple
    k: int
    S: tuple
    R: tuple

    def __post_init__(self):
        for name in ("P", "S", "R"):
            object.__setattr__(self, name, tuple(sorted(int(j) for j in getattr(self, name))))
        P, S, R = set(self.P), set(self.S), set(self.R)
        if self.k in P or not P <= R or not R <= S - {self.k}:
            raise ValueError(f"illegal candidate {self.label()}")

    def label(self):
        return f"P={list(self.P)} k={self.k} R={list(self.R)} S={list(self.S)}"


def enumerate_candidates_cont(d, max_s_size=None, max_candidates=None, include_empty_p=False):
    """Candidates with ``P <= S``, ``k not in P`` and ``P <= R <= S \\ {k}``, ordered by ``(P, k, S, R)``.

    ``P`` empty is skipped unless ``include_empty_p``: without varying
    coefficients there is nothing to match.
    """
    if d < 2:
        raise ValueError("d must be at least 2")
    out = []
    for S in _subsets(range(d), 0, max_s_size):
        for k in range(d):
            pool = [j for j in S if j != k]
            for P in _subsets(pool, 0 if include_empty_p else 1):
                rest = [j for j in pool if j not in P]
                for extra in _subsets(rest):
                    out.append(ContCandidate(P=P, k=k, S=S, R=tuple(sorted(P + extra))))
    out.sort()
    if max_candidates is not None:
        out = out[:max_candidates]
    return iter(out)


def _varying_design(X, P):
    return np.column_stack([np.ones(X.shape[0]), X[:, list(P)]])


@dataclass(frozen=True, eq=False)
class ContImpFit:
    """Fit of one continuous candidate.

    ``residual = M_hat - [W, M_V_hat] w_hat`` and ``T_c = |residual|^2 / n``.
    ``w_hat`` has one entry per column of ``W = [1, X_P]`` followed by the
    coefficient of ``M_V``.
    """

    candidate: ContCandidate
    feasible: bool
    reason: str = ""
    h: float = DEFAULT_BANDWIDTH
    w_hat: np.ndarray | None = None
    beta_hat: np.ndarray | None = None
    beta_V_hat: np.ndarray | None = None
    M_hat: np.ndarray | None = None
    M_V_hat: np.ndarray | None = None
    residual: np.ndarray | None = None
    T_c: float = np.nan
    s_pred: float = np.nan
    fitted: np.ndarray | None = None
    condition: float = np.inf
    heterogeneity: float = np.nan
    low_heterogeneity: bool = False
    regularized: bool = False

    @property
    def lam(self):
        return float(self.w_hat[-1])

    def predict(self, U, X, h=None):
        """Predict ``Y`` on test data ``(U, X)``; ``M_V`` is estimated from the test data only."""
        if not self.feasible:
            raise RankDeficiencyError(f"candidate {self.candidate.label()} is infeasible")
        return predict_continuous(self, U, X, h=h)

    def predictor(self):
        return ContPredictor(self.candidate, self.w_hat, self.beta_hat, self.h)


@dataclass(frozen=True, eq=False)
class ContPredictor:
    """The parts of a fit needed for prediction (what a saved model holds)."""

    candidate: ContCandidate
    w_hat: np.ndarray
    beta_hat: np.ndarray
    h: float

    def predict(self, U, X, h=None):
        return predict_continuous(self, U, X, h=h)

    def to_dict(self):
        c = self.candidate
        return {"P": list(c.P), "k": c.k, "R": list(c.R), "S": list(c.S), "h": self.h,
                "w_hat": self.w_hat.tolist(), "beta_hat": self.beta_hat.tolist()}

    @classmethod
    def from_dict(cls, doc):
        cand = ContCandidate(P=tuple(doc["P"]), k=doc["k"], S=tuple(doc["S"]), R=tuple(doc["R"]))
        return cls(cand, np.asarray(doc["w_hat"], dtype=float), np.asarray(doc["beta_hat"], dtype=float),
                   float(doc["h"]))


class _SmootherCache:
    """Smoothers for ``W = [1, X_P]`` keyed by ``P``, with ``A @ [X, Y]`` precomputed."""

    def __init__(self, U, X, y, h):
        self.U, self.X, self.y, self.h = U, X, y, h
        self.XY = np.column_stack([X, y])
        self._store = {}

    def get(self, P):
        if P not in self._store:
            try:
                sm = LocalLinearSmoother(self.U, _varying_design(self.X, P), self.h)
                self._store[P] = (sm, sm.A @ self.XY)
            except (BandwidthError, np.linalg.LinAlgError) as exc:
                self._store[P] = exc
        entry = self._store[P]
        if isinstance(entry, Exception):
            raise entry
        return entry


def _profile(AXY, XY, target, zcols):
    """Profile least squares from precomputed smoothed columns: ``(beta, M)``."""
    if zcols:
        Zt = XY[:, zcols] - AXY[:, zcols]
        Yt = XY[:, target] - AXY[:, target]
        beta = ols_fit(Zt, Yt, with_intercept=False, rcond=1.0 / MAX_CONDITION, label="Z").coefficients
    else:
        beta = np.zeros(0)
    M = AXY[:, target] - AXY[:, zcols] @ beta
    return beta, M


def _fit_with_cache(cache, cand, max_condition=MAX_CONDITION):
    X, y, h = cache.X, cache.y, cache.h
    n, d = X.shape
    P = cand.P
    Z = [j for j in cand.S if j not in P]
    ZV = [j for j in cand.R if j not in P]
    try:
        sm, AXY = cache.get(P)
        XY = cache.XY
        beta, M = _profile(AXY, XY, d, Z)
        beta_V, M_V = _profile(AXY, XY, cand.k, ZV)
        design = np.column_stack([_varying_design(X, P), M_V])
        match = ols_fit(design, M, with_intercept=False, rcond=1.0 / max_condition, label="matching design")
    except (RankDeficiencyError, BandwidthError, np.linalg.LinAlgError) as exc:
        return ContImpFit(cand, False, str(exc), h=h)
    fitted = design @ match.coefficients + X[:, Z] @ beta
    # share of M_V that a fixed-coefficient fit on W leaves unexplained
    W = design[:, :-1]
    fixed = np.linalg.lstsq(W, M_V, rcond=None)[0]
    spread = M_V @ M_V
    het = float(np.sum((M_V - W @ fixed) ** 2) / spread) if spread > 0 else 0.0
    resid_y = y - fitted
    return ContImpFit(
        candidate=cand,
        feasible=True,
        h=h,
        w_hat=match.coefficients,
        beta_hat=beta,
        beta_V_hat=beta_V,
        M_hat=M,
        M_V_hat=M_V,
        residual=match.residuals,
        T_c=float(match.residuals @ match.residuals / n),
        s_pred=float(resid_y @ resid_y / n),
        fitted=fitted,
        condition=match.condition,
        heterogeneity=het,
        low_heterogeneity=het < max(LOW_HETEROGENEITY_SHARE, W.shape[1] / (n * h)),
        regularized=sm.regularized,
    )


def fit_candidate_continuous(data: ContinuousData, cand: ContCandidate, h=DEFAULT_BANDWIDTH) -> ContImpFit:
    """Fit both SVC models of a candidate and its matching parameter ``w``.

    Kernel and rank failures mark the candidate infeasible.
    """
    if data.n < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples, got {data.n}")
    if not h > 0:
        raise BandwidthError(f"bandwidth must be positive, got {h}")
    return _fit_with_cache(_SmootherCache(data.U, data.X, data.y, h), cand)


def predict_continuous(fit, U, X, h=None) -> np.ndarray:
    """``[W, M_V] w + Z beta`` on test data, with ``M_V`` from an SVC fit on the test features.

    Raises
    ------
    BandwidthError
        The test ``U`` values are too sparse for the bandwidth.
    """
    U = np.asarray(U, dtype=float).ravel()
    X = np.asarray(X, dtype=float).reshape(U.shape[0], -1)
    if U.shape[0] < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} test samples, got {U.shape[0]}")
    cand = fit.candidate
    h = fit.h if h is None else h
    W = _varying_design(X, cand.P)
    ZV = [j for j in cand.R if j not in cand.P]
    Z = [j for j in cand.S if j not in cand.P]
    sm = LocalLinearSmoother(U, W, h)
    AX = sm.A @ X
    _, M_V = _profile(AX, X, cand.k, ZV)
    return np.column_stack([W, M_V]) @ fit.w_hat + X[:, Z] @ fit.beta_hat


# ---------------------------------------------------------------------------
# search and selection


@dataclass(frozen=True, eq=False)
class ContScores:
    """Score table over continuous candidates (``T`` holds ``T_c``)."""

    candidates: tuple
    fits: tuple
    feasible: np.ndarray
    T: np.ndarray
    s_pred: np.ndarray
    p_inv: np.ndarray

    def __len__(self):
        return len(self.candidates)


def _score_with_cache(cache, candidates):
    fits = tuple(_fit_with_cache(cache, c) for c in candidates)
    feasible = np.array([f.feasible for f in fits], dtype=bool)
    T = np.array([f.T_c for f in fits])
    s_pred = np.array([f.s_pred for f in fits])
    return fits, feasible, T, s_pred


def score_candidates_cont(data: ContinuousData, candidates=None, h=DEFAULT_BANDWIDTH) -> ContScores:
    if candidates is None:
        candidates = tuple(enumerate_candidates_cont(data.d))
    candidates = tuple(candidates)
    fits, feasible, T, s_pred = _score_with_cache(_SmootherCache(data.U, data.X, data.y, h), candidates)
    skipped = int((~feasible).sum())
    if skipped:
        log.info("%d of %d continuous candidates infeasible", skipped, len(candidates))
    return ContScores(candidates, fits, feasible, T, s_pred, np.full(len(candidates), np.nan))


def bootstrap_cutoffs_cont(data: ContinuousData, candidates, config: SelectionConfig, h=DEFAULT_BANDWIDTH) -> Cutoffs:
    """Bootstrap cutoffs from i.i.d. row resamples; same summaries as the discrete case."""
    rng = make_rng(config.seed, 0xC0B7)
    min_T, min_s = [], []
    for _ in range(config.n_bootstrap):
        idx = rng.integers(0, data.n, data.n)
        cache = _SmootherCache(data.U[idx], data.X[idx], data.y[idx], h)
        _, feasible, T, s_pred = _score_with_cache(cache, candidates)
        if not feasible.any():
            continue
        keep = _preselect(feasible, s_pred, config.preselect_median)
        min_T.append(float(T[keep].min()))
        min_s.append(float(s_pred[feasible].min()))
    if not min_T:
        raise RankDeficiencyError("no candidate was feasible in any bootstrap round")
    return Cutoffs(float(np.quantile(min_T, config.quantile)), float(np.quantile(min_s, config.quantile)),
                   tuple(min_T), tuple(min_s))


@dataclass(frozen=True, eq=False)
class ContImpModel:
    scores: ContScores
    cutoffs: Cutoffs | None
    selection: Selection
    predictors: tuple

    @property
    def found(self):
        return self.selection.found

    def predict(self, U, X):
        """Average prediction of the selected candidates on test data ``(U, X)``."""
        if not self.predictors:
            raise NoImpFoundError("no invariant matching candidate was found")
        return np.mean([p.predict(U, X) for p in self.predictors], axis=0)

    def score_rows(self):
        """Rows of the score table: P, k, R, S, feasible, T_c, s_pred, selected flags."""
        sel = self.selection
        rows = []
        for i, c in enumerate(self.scores.candidates):
            rows.append({
                "P": " ".join(map(str, c.P)),
                "k": c.k,
                "R": " ".join(map(str, c.R)),
                "S": " ".join(map(str, c.S)),
                "feasible": int(self.scores.feasible[i]),
                "T_c": self.scores.T[i],
                "s_pred": self.scores.s_pred[i],
                "selected_I": int(sel.selected_I[i]),
                "selected_Ipred": int(sel.selected_Ipred[i]),
            })
        return rows


def fit_imp_continuous(data: ContinuousData, config: SelectionConfig = SelectionConfig(),
                       candidates=None, h=DEFAULT_BANDWIDTH) -> ContImpModel:
    """Enumerate, fit, calibrate cutoffs by bootstrap and select (residual score only)."""
    if config.score_kind != RESIDUAL:
        raise ValueError("only the residual score applies to continuous environments")
    if candidates is None:
        candidates = tuple(enumerate_candidates_cont(data.d))
    candidates = tuple(candidates)
    scores = score_candidates_cont(data, candidates, h)
    cutoffs = None
    if config.c_imp is None or config.c_pred is None:
        cutoffs = bootstrap_cutoffs_cont(data, candidates, config, h)
    selection = select_imps(scores, config, cutoffs)
    if not selection.found:
        log.warning("no invariant matching candidate passed the cutoff")
    preds = tuple(scores.fits[i].predictor() for i in np.flatnonzero(selection.selected_Ipred))
    return ContImpModel(scores, cutoffs, selection, preds)


def select_and_predict_cont(data: ContinuousData, test: ContinuousData, config: SelectionConfig = SelectionConfig(),
                            candidates=None, h=DEFAULT_BANDWIDTH):
    """Fit on ``data`` and predict on ``test``; returns ``(predictions, model)``."""
    model = fit_imp_continuous(data, config, candidates, h)
    return model.predict(test.U, test.X), model
