"""Invariant matching search for discretely labelled environments.

A candidate ``(k, R, S)`` matches the per-environment regressions

    L1 = E_l[Y | X_S]            (Y on [1, X_S] within each environment)
    L2 = E_l[X_k | X_R]          (X_k on [1, X_R] within each environment)

through a relation ``L1 = lambda L2 + eta^T X_S + b`` that holds with the
same ``(b, eta, lambda)`` in every training environment.  The matching
parameter is estimated by pooled least squares; candidates whose pooled
residual is small (or whose prediction residuals look invariant across
environments) are kept, and predictions average the matched regressions,
with ``L2`` recomputed on the test features.

Scores for the full candidate set are computed from per-environment Gram
matrices of ``[1, X, Y]`` (:func:`score_candidates`), so their cost does not
grow with the sample size.  :func:`fit_candidate_discrete` is the direct,
sample-level computation of the same quantities for one candidate.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from ._random import make_rng
from .errors import NoImpFoundError, RankDeficiencyError
from .estimators import invariance_pvalue_from_moments, ols_fit, residual_invariance_pvalue
from .panel import PanelDataset

log = logging.getLogger(__name__)

# a fit is infeasible when its column-equilibrated design condition exceeds this
MAX_CONDITION = 1e7
_MIN_EIG_RATIO = 1.0 / MAX_CONDITION**2

RESIDUAL = "residual"
INVARIANCE = "invariance"


@dataclass(frozen=True, order=True)
class ImpCandidate:
    """Tuple ``(k, R, S)``: match ``E[Y | X_S]`` with ``E[X_k | X_R]``."""

    k: int
    S: tuple
    R: tuple

    def __post_init__(self):
        object.__setattr__(self, "S", tuple(sorted(int(j) for j in self.S)))
        object.__setattr__(self, "R", tuple(sorted(int(j) for j in self.R)))
        if self.k in self.R:
            raise ValueError("k must not be in R")

    def label(self):
        return f"k={self.k} R={list(self.R)} S={list(self.S)}"


def _subsets(items, min_size=0, max_size=None):
    items = list(items)
    max_size = len(items) if max_size is None else min(max_size, len(items))
    out = []
    for size in range(min_size, max_size + 1):
        out.extend(itertools.combinations(items, size))
    return sorted(out)


def enumerate_candidates(d, max_s_size=None, max_candidates=None, min_s_size=0, r_within_s=True):
    """Yield candidates in lexicographic order of ``(k, S, R)``.

    Parameters
    ----------
    d : int
        Number of predictors (``d >= 2``).
    max_s_size, min_s_size : int, optional
        Bounds on ``|S|``.
    max_candidates : int, optional
        Stop after this many candidates.
    r_within_s : bool
        Draw ``R`` from ``S \\ {k}`` (default) instead of ``{0..d-1} \\ {k}``.

    Unlimited, the count is the sum over ``k`` and ``S`` of
    ``2^|S \\ {k}|``.
    """
    if d < 2:
        raise ValueError("d must be at least 2")
    emitted = 0
    s_sets = _subsets(range(d), min_s_size, max_s_size)
    for k in range(d):
        for S in s_sets:
            pool = [j for j in (S if r_within_s else range(d)) if j != k]
            for R in _subsets(pool):
                if max_candidates is not None and emitted >= max_candidates:
                    return
                yield ImpCandidate(k=k, S=S, R=R)
                emitted += 1


# ---------------------------------------------------------------------------
# direct single-candidate fit


@dataclass(frozen=True, eq=False)
class MatchPredictor:
    """Linear predictor ``b + eta^T X + lambda L2`` with ``L2 = E_l[X_k | X_R]`` from the data at hand."""

    candidate: ImpCandidate
    intercept: float
    eta: np.ndarray
    lam: float

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        c = self.candidate
        L2 = ols_fit(X[:, list(c.R)], X[:, c.k], rcond=1.0 / MAX_CONDITION, label=f"R={list(c.R)}")
        return self.intercept + X @ self.eta + self.lam * (X[:, c.k] - L2.residuals)

    def to_dict(self):
        c = self.candidate
        return {"k": c.k, "R": list(c.R), "S": list(c.S), "intercept": self.intercept,
                "eta": self.eta.tolist(), "lambda": self.lam}

    @classmethod
    def from_dict(cls, doc):
        cand = ImpCandidate(k=doc["k"], S=tuple(doc["S"]), R=tuple(doc["R"]))
        return cls(cand, float(doc["intercept"]), np.asarray(doc["eta"], dtype=float), float(doc["lambda"]))


@dataclass(frozen=True, eq=False)
class DiscreteImpFit:
    """Sample-level fit of one candidate.

    ``eta`` and ``predictor.eta`` are zero outside ``S``.  ``residual`` is
    ``L1 - lambda L2 - X_S eta - b`` and ``T = |residual|^2 / n``.
    """

    candidate: ImpCandidate
    feasible: bool
    reason: str = ""
    intercept: float = np.nan
    eta: np.ndarray | None = None
    lam: float = np.nan
    L1: np.ndarray | None = None
    L2: np.ndarray | None = None
    residual: np.ndarray | None = None
    T: float = np.nan
    p_inv: float = np.nan
    s_pred: float = np.nan
    predictor: MatchPredictor | None = None
    condition: float = np.inf


def _centered(panel):
    mx, my = panel.X.mean(axis=0), panel.y.mean()
    return panel.X - mx, panel.y - my, mx, my


def matching_design(panel: PanelDataset, cand: ImpCandidate):
    """Pooled design ``[X_S, L2]`` (pooled-mean centred, intercept not included)."""
    Xc, yc, _, _ = _centered(panel)
    codes = panel.codes()
    L2 = np.empty(panel.n)
    for e in range(codes.max() + 1):
        m = codes == e
        fit = ols_fit(Xc[m][:, list(cand.R)], Xc[m, cand.k], rcond=0.0)
        L2[m] = Xc[m, cand.k] - fit.residuals
    return np.column_stack([Xc[:, list(cand.S)], L2])


def fit_candidate_discrete(panel: PanelDataset, cand: ImpCandidate) -> DiscreteImpFit:
    """Fit one candidate directly from the samples.

    Per-environment least squares gives ``L1`` and ``L2``; pooled least
    squares of ``L1`` on ``[1, X_S, L2]`` gives the matching parameter and
    the residual score ``T``; pooled least squares of ``Y`` on the same
    design gives the predictor, its in-sample MSE ``s_pred`` and the
    invariance p-value of its residuals.  A numerically rank-deficient fit
    marks the candidate infeasible.
    """
    Xc, yc, mx, my = _centered(panel)
    codes = panel.codes()
    S, R, k = list(cand.S), list(cand.R), cand.k
    rcond = 1.0 / MAX_CONDITION
    if codes.max() < 1:
        return DiscreteImpFit(cand, False, "fewer than two environments")
    L1, L2 = np.empty(panel.n), np.empty(panel.n)
    try:
        for e in range(codes.max() + 1):
            m = codes == e
            if m.sum() <= max(len(S), len(R)) + 2:
                return DiscreteImpFit(cand, False, f"environment {e} has too few rows")
            f1 = ols_fit(Xc[m][:, S], yc[m], rcond=rcond, label=f"S={S}")
            f2 = ols_fit(Xc[m][:, R], Xc[m, k], rcond=rcond, label=f"R={R}")
            L1[m] = yc[m] - f1.residuals
            L2[m] = Xc[m, k] - f2.residuals
        design = np.column_stack([Xc[:, S], L2])
        match = ols_fit(design, L1, rcond=rcond, label="matching design")
        pred = ols_fit(design, yc, rcond=rcond, label="matching design")
    except RankDeficiencyError as exc:
        return DiscreteImpFit(cand, False, str(exc), condition=exc.condition)

    n = panel.n
    d = panel.d
    eta = np.zeros(d)
    eta[S] = match.coefficients[:-1]
    lam = float(match.coefficients[-1])
    b = float(my + match.intercept - eta @ mx - lam * mx[k])
    eta_f = np.zeros(d)
    eta_f[S] = pred.coefficients[:-1]
    lam_f = float(pred.coefficients[-1])
    b_f = float(my + pred.intercept - eta_f @ mx - lam_f * mx[k])
    return DiscreteImpFit(
        candidate=cand,
        feasible=True,
        intercept=b,
        eta=eta,
        lam=lam,
        L1=L1 + my,
        L2=L2 + mx[k],
        residual=match.residuals,
        T=float(match.residuals @ match.residuals / n),
        p_inv=residual_invariance_pvalue(pred.residuals, codes),
        s_pred=float(pred.residuals @ pred.residuals / n),
        predictor=MatchPredictor(cand, b_f, eta_f, lam_f),
        condition=match.condition,
    )


def prediction_score(fit: DiscreteImpFit, panel: PanelDataset) -> float:
    """Pooled in-sample MSE of the candidate's predictor on ``panel``."""
    if not fit.feasible:
        return np.inf
    codes = panel.codes()
    c = fit.candidate
    p = fit.predictor
    # L2 is the within-environment regression, as during fitting
    L2 = np.empty(panel.n)
    for e in range(codes.max() + 1):
        m = codes == e
        f2 = ols_fit(panel.X[m][:, list(c.R)], panel.X[m, c.k], rcond=0.0)
        L2[m] = panel.X[m, c.k] - f2.residuals
    resid = panel.y - (p.intercept + panel.X @ p.eta + p.lam * L2)
    return float(resid @ resid / panel.n)


# ---------------------------------------------------------------------------
# Gram-based scoring of many candidates


class _GramSet:
    """Per-environment Gram matrices of ``[1, X, Y]`` and all-subset regressions.

    Column ``0`` is the constant, ``1..d`` the predictors, ``d+1`` the
    response.  ``P[e, m]`` holds, in column ``j``, the coefficients (in the
    full column space) of regressing column ``j`` on ``[1, X_m]`` within
    environment ``e``, for every subset bitmask ``m``.
    """

    def __init__(self, G, counts, need_masks):
        self.G = G
        self.counts = np.asarray(counts, dtype=float)
        E, D, _ = G.shape
        d = D - 2
        n_masks = 1 << d
        self.P = np.zeros((E, n_masks, D, D))
        self.ok = np.zeros((E, n_masks), dtype=bool)
        for m in need_masks:
            cols = [0] + [j + 1 for j in range(d) if m >> j & 1]
            sub = G[:, cols][:, :, cols]
            diag = np.sqrt(np.einsum("eii->ei", sub))
            with np.errstate(divide="ignore", invalid="ignore"):
                scaled = sub / diag[:, :, None] / diag[:, None, :]
            scaled = np.nan_to_num(scaled)
            eig = np.linalg.eigvalsh(scaled)
            ok = (eig[:, 0] >= _MIN_EIG_RATIO * eig[:, -1]) & (self.counts > len(cols) + 1)
            self.ok[:, m] = ok
            safe = np.where(ok[:, None, None], sub, np.eye(len(cols)))
            self.P[:, m][:, cols, :] = np.linalg.solve(safe, G[:, cols, :])
        # Q[e, m] = G_e P[e, m] and V[e, m, j] = P[e, m][:, j]^T G_e P[e, m][:, j]
        self.Q = np.einsum("eij,emjk->emik", G, self.P)
        self.V = np.einsum("emij,emij->emj", self.P, self.Q)
        # pooled regressions on [1, X_m]: inverse Gram (zero-padded), feasibility,
        # and the explained sum of squares of Y
        Gsum = G.sum(axis=0)
        self.pooled_inv = np.zeros((n_masks, D, D))
        self.pooled_ok = np.zeros(n_masks, dtype=bool)
        for m in need_masks:
            cols = [0] + [j + 1 for j in range(d) if m >> j & 1]
            sub = Gsum[np.ix_(cols, cols)]
            diag = np.sqrt(np.diag(sub))
            if np.all(diag > 0):
                eig = np.linalg.eigvalsh(sub / np.outer(diag, diag))
                if eig[0] >= _MIN_EIG_RATIO * eig[-1]:
                    self.pooled_ok[m] = True
                    self.pooled_inv[np.ix_([m], cols, cols)] = np.linalg.inv(sub)
        self.pooled_ess = np.einsum("i,mij,j->m", Gsum[:, -1], self.pooled_inv, Gsum[:, -1])


@dataclass(frozen=True)
class _CandidateIndex:
    """Candidates as index arrays, grouped by ``|S|``."""

    candidates: tuple
    d: int
    groups: tuple  # (positions, S1 columns, S mask, R mask, k)
    masks: frozenset

    @classmethod
    def build(cls, candidates, d):
        by_size = {}
        for i, c in enumerate(candidates):
            by_size.setdefault(len(c.S), []).append(i)
        groups, masks = [], set()
        for s, pos in sorted(by_size.items()):
            pos = np.asarray(pos)
            S1 = np.array([[0] + [j + 1 for j in candidates[i].S] for i in pos], dtype=int).reshape(len(pos), s + 1)
            mS = np.array([sum(1 << j for j in candidates[i].S) for i in pos], dtype=int)
            mR = np.array([sum(1 << j for j in candidates[i].R) for i in pos], dtype=int)
            k = np.array([candidates[i].k for i in pos], dtype=int)
            groups.append((pos, S1, mS, mR, k))
            masks.update(mS.tolist())
            masks.update(mR.tolist())
        return cls(tuple(candidates), d, tuple(groups), frozenset(masks))


@dataclass(frozen=True, eq=False)
class CandidateScores:
    """Scores of a candidate list on one panel.

    ``theta`` rows are ``(b, eta_0..eta_{d-1}, lambda)`` of the matching
    relation and ``phi`` rows the same layout for the predictor of ``Y``;
    both are in the original (uncentred) units.  Infeasible rows hold NaN.
    """

    candidates: tuple
    feasible: np.ndarray
    T: np.ndarray
    s_pred: np.ndarray
    p_inv: np.ndarray
    theta: np.ndarray
    phi: np.ndarray

    def __len__(self):
        return len(self.candidates)

    def predictor(self, i) -> MatchPredictor:
        row = self.phi[i]
        return MatchPredictor(self.candidates[i], float(row[0]), row[1:-1].copy(), float(row[-1]))

    def index_of(self, cand):
        return self.candidates.index(cand)


def _panel_grams(X, y, codes, weights=None):
    E = codes.max() + 1
    Z = np.column_stack([np.ones(len(y)), X, y])
    D = Z.shape[1]
    G = np.empty((E, D, D))
    counts = np.empty(E)
    for e in range(E):
        m = codes == e
        Ze = Z[m]
        if weights is None:
            G[e] = Ze.T @ Ze
            counts[e] = m.sum()
        else:
            w = weights[m]
            G[e] = (Ze * w[:, None]).T @ Ze
            counts[e] = w.sum()
    return G, counts


def _score_from_grams(gs: _GramSet, index: _CandidateIndex, fast=False):
    """Scores of all indexed candidates.

    The default path solves the full matching systems, evaluates residual
    sums of squares as per-environment quadratic forms (no cancellation when
    ``T`` is tiny) and computes ``p_inv`` and coefficients.  ``fast=True``
    (the bootstrap path) returns only ``T`` and ``s_pred``, by block
    elimination around the pooled ``[1, X_S]`` Gram.
    """
    G, counts = gs.G, gs.counts
    E, D, _ = G.shape
    d = D - 2
    y = D - 1
    n = counts.sum()
    Gsum = G.sum(axis=0)
    c_total = len(index.candidates)
    feasible = np.zeros(c_total, dtype=bool)
    T = np.full(c_total, np.nan)
    s_pred = np.full(c_total, np.nan)
    p_inv = np.full(c_total, np.nan)
    theta = np.full((c_total, d + 2), np.nan)
    phi = np.full((c_total, d + 2), np.nan)

    for pos, S1, mS, mR, k in index.groups:
        c, s1 = S1.shape
        ok = gs.ok[:, mS].all(axis=0) & gs.ok[:, mR].all(axis=0)
        # mixed advanced indices put the candidate axis first
        u1 = gs.P[:, mS, :, y].transpose(1, 0, 2)    # L1 coefficients, (E, c, D)
        q = gs.Q[:, mR, :, k + 1].transpose(1, 0, 2)  # G_e times L2 coefficients
        qsum = q.sum(axis=0)
        # products of the L2 column with itself, L1 and Y
        l2l2 = gs.V[:, mR, k + 1].sum(axis=0)
        l2l1 = np.einsum("eci,eci->c", q, u1)
        l2y = qsum[:, y]

        if fast:
            Ainv = gs.pooled_inv[mS]
            a = np.einsum("cij,cj->ci", Ainv, qsum)
            schur = l2l2 - np.einsum("ci,ci->c", qsum, a)
            with np.errstate(divide="ignore", invalid="ignore"):
                ok &= gs.pooled_ok[mS] & (l2l2 > 0) & (schur >= _MIN_EIG_RATIO * l2l2)
                ag = a @ Gsum[:, y]
                ess = gs.pooled_ess[mS]
                rss_match = gs.V[:, mS, y].sum(axis=0) - ess - (l2l1 - ag) ** 2 / schur
                rss_pred = Gsum[y, y] - ess - (l2y - ag) ** 2 / schur
            feasible[pos] = ok
            T[pos] = np.where(ok, np.maximum(rss_match, 0.0) / n, np.nan)
            s_pred[pos] = np.where(ok, np.maximum(rss_pred, 0.0) / n, np.nan)
            continue

        # pooled Gram of [1, X_S, L2] and its products with L1 and Y
        qS = np.take_along_axis(qsum, S1, axis=1)
        DD = np.empty((c, s1 + 1, s1 + 1))
        DD[:, :s1, :s1] = Gsum[S1[:, :, None], S1[:, None, :]]
        DD[:, :s1, s1] = qS
        DD[:, s1, :s1] = qS
        DD[:, s1, s1] = l2l2
        DL1 = np.column_stack([Gsum[S1, y], l2l1])
        DY = np.column_stack([Gsum[S1, y], l2y])
        diag = np.sqrt(np.einsum("cii->ci", DD))
        with np.errstate(divide="ignore", invalid="ignore"):
            scaled = np.nan_to_num(DD / diag[:, :, None] / diag[:, None, :])
        eig = np.linalg.eigvalsh(scaled)
        ok &= eig[:, 0] >= _MIN_EIG_RATIO * eig[:, -1]
        DD[~ok] = np.eye(s1 + 1)
        th = np.linalg.solve(DD, DL1[..., None])[..., 0]
        ph = np.linalg.solve(DD, DY[..., None])[..., 0]

        # residual vectors in the column space of [1, X, Y], per environment
        u2 = gs.P[:, mR, :, k + 1].transpose(1, 0, 2)

        def embed(coef, base):
            out = np.broadcast_to(base, (E, c, D)).copy()
            emb = np.zeros((c, D))
            np.put_along_axis(emb, S1, coef[:, :s1], axis=1)
            out -= emb[None]
            out -= coef[None, :, s1, None] * u2
            return out

        w = embed(th, u1)
        rss_match = np.einsum("eci,ecj,eij->c", w, w, G, optimize=True)
        ey = np.zeros(D)
        ey[y] = 1.0
        v = embed(ph, ey)
        Gv = np.einsum("eij,ecj->eci", G, v)
        sumsq = np.maximum(np.einsum("eci,eci->ce", v, Gv), 0.0)
        sums = Gv[:, :, 0].T                      # column 0 of [1, X, Y] is the constant
        feasible[pos] = ok
        T[pos] = np.where(ok, np.maximum(rss_match, 0.0) / n, np.nan)
        s_pred[pos] = np.where(ok, sumsq.sum(axis=1) / n, np.nan)
        p_inv[pos] = np.where(ok, invariance_pvalue_from_moments(counts, sums, sumsq), np.nan)
        for dest, src in ((theta, th), (phi, ph)):
            full = np.zeros((c, d + 2))
            full[:, 0] = src[:, 0]
            rows = np.repeat(np.arange(c), s1 - 1)
            full[rows, S1[:, 1:].ravel()] = src[:, 1:s1].ravel()
            full[:, -1] = src[:, s1]
            full[~ok] = np.nan
            dest[pos] = full
    return feasible, T, s_pred, p_inv, theta, phi


def score_candidates(panel: PanelDataset, candidates=None) -> CandidateScores:
    """Score every candidate on ``panel`` (all candidates if ``None``).

    Returns the residual score ``T``, prediction score ``s_pred``,
    invariance p-value ``p_inv`` and fitted coefficients per candidate;
    the values agree with :func:`fit_candidate_discrete`.
    """
    if candidates is None:
        candidates = tuple(enumerate_candidates(panel.d))
    candidates = tuple(candidates)
    if len(panel.environments) < 2:
        raise ValueError("scoring needs at least two environments")
    index = _CandidateIndex.build(candidates, panel.d)
    Xc, yc, mx, my = _centered(panel)
    G, counts = _panel_grams(Xc, yc, panel.codes())
    gs = _GramSet(G, counts, index.masks)
    feasible, T, s_pred, p_inv, theta, phi = _score_from_grams(gs, index)
    for coef in (theta, phi):
        # undo the centring: b_raw = my + b - eta . mx - lambda mx_k
        ks = np.array([c.k for c in candidates])
        coef[:, 0] = my + coef[:, 0] - np.einsum("cj,j->c", coef[:, 1:-1], mx) - coef[:, -1] * mx[ks]
    skipped = int((~feasible).sum())
    if skipped:
        log.info("%d of %d candidates infeasible (rank deficient)", skipped, len(candidates))
    return CandidateScores(candidates, feasible, T, s_pred, p_inv, theta, phi)


# ---------------------------------------------------------------------------
# selection


@dataclass(frozen=True)
class SelectionConfig:
    """Cutoff settings.

    ``score_kind`` is ``"residual"`` (keep ``T < c_imp``) or
    ``"invariance"`` (keep ``p_inv > significance``).  Cutoffs left as
    ``None`` are estimated by :func:`bootstrap_cutoffs`.
    """

    score_kind: str = RESIDUAL
    c_imp: float | None = None
    c_pred: float | None = None
    n_bootstrap: int = 50
    quantile: float = 0.9
    preselect_median: bool = True
    significance: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.score_kind not in (RESIDUAL, INVARIANCE):
            raise ValueError(f"unknown score_kind {self.score_kind!r}")
        if not 0 < self.quantile < 1:
            raise ValueError("quantile must lie in (0, 1)")
        if self.n_bootstrap < 1:
            raise ValueError("n_bootstrap must be at least 1")


@dataclass(frozen=True)
class Cutoffs:
    c_imp: float
    c_pred: float
    round_min_T: tuple = ()
    round_min_s_pred: tuple = ()


def _preselect(feasible, s_pred, enabled=True):
    keep = feasible.copy()
    if enabled and keep.any():
        keep &= s_pred <= np.median(s_pred[feasible])
    return keep


def bootstrap_cutoffs(panel: PanelDataset, candidates=None, config: SelectionConfig = SelectionConfig()) -> Cutoffs:
    """Bootstrap cutoffs ``(c_imp, c_pred)``.

    Each round draws ``min_e n_e`` rows with replacement from every
    environment, rescores all candidates and records the smallest ``T``
    among candidates passing the median pre-selection of that round and
    the smallest ``s_pred`` overall.  The cutoffs are the configured
    quantile of these per-round minima.
    """
    if candidates is None:
        candidates = tuple(enumerate_candidates(panel.d))
    index = _CandidateIndex.build(tuple(candidates), panel.d)
    Xc, yc, _, _ = _centered(panel)
    codes = panel.codes()
    E = codes.max() + 1
    members = [np.flatnonzero(codes == e) for e in range(E)]
    m = min(len(ix) for ix in members)
    rng = make_rng(config.seed, 0xB007)
    Z = np.column_stack([np.ones(panel.n), Xc, yc])
    min_T, min_s = [], []
    for _ in range(config.n_bootstrap):
        G = np.empty((E,) + (Z.shape[1],) * 2)
        for e, ix in enumerate(members):
            w = np.bincount(rng.integers(0, len(ix), m), minlength=len(ix)).astype(float)
            Ze = Z[ix]
            G[e] = (Ze * w[:, None]).T @ Ze
        gs = _GramSet(G, np.full(E, float(m)), index.masks)
        feasible, T, s_pred, _, _, _ = _score_from_grams(gs, index, fast=True)
        if not feasible.any():
            continue
        keep = _preselect(feasible, s_pred, config.preselect_median)
        min_T.append(float(T[keep].min()))
        min_s.append(float(s_pred[feasible].min()))
    if not min_T:
        raise RankDeficiencyError("no candidate was feasible in any bootstrap round")
    return Cutoffs(
        c_imp=float(np.quantile(min_T, config.quantile)),
        c_pred=float(np.quantile(min_s, config.quantile)),
        round_min_T=tuple(min_T),
        round_min_s_pred=tuple(min_s),
    )


@dataclass(frozen=True, eq=False)
class Selection:
    """Boolean masks over the score table.

    ``found`` is False when no candidate passed the IMP cutoff; then
    ``selected_I`` and ``selected_Ipred`` are empty.
    """

    preselected: np.ndarray
    selected_I: np.ndarray
    selected_Ipred: np.ndarray
    c_imp: float
    c_pred: float
    score_kind: str
    found: bool
    fallback_used: bool = False


def select_imps(scores: CandidateScores, config: SelectionConfig, cutoffs: Cutoffs | None = None) -> Selection:
    """Median pre-selection, IMP cutoff, then prediction cutoff.

    With ``score_kind="invariance"`` the IMP cutoff is ``p_inv >
    significance``.  When no member of the IMP set passes the prediction
    cutoff, the member with the smallest ``s_pred`` is used.
    """
    feasible = scores.feasible
    if not feasible.any():
        raise RankDeficiencyError("no feasible candidate to select from")
    c_imp = config.c_imp if config.c_imp is not None else (cutoffs.c_imp if cutoffs else None)
    c_pred = config.c_pred if config.c_pred is not None else (cutoffs.c_pred if cutoffs else None)
    if config.score_kind == INVARIANCE:
        c_imp = config.significance if config.c_imp is None else config.c_imp
    if c_imp is None or c_pred is None:
        raise ValueError("cutoffs are missing; pass them in the config or via bootstrap_cutoffs")
    pre = _preselect(feasible, scores.s_pred, config.preselect_median)
    if config.score_kind == INVARIANCE:
        in_I = pre & (np.nan_to_num(scores.p_inv, nan=-1.0) > c_imp)
    else:
        in_I = pre & (np.nan_to_num(scores.T, nan=np.inf) < c_imp)
    s = np.nan_to_num(scores.s_pred, nan=np.inf)
    in_pred = in_I & (s < c_pred)
    fallback = False
    if in_I.any() and not in_pred.any():
        best = np.flatnonzero(in_I)[np.argmin(s[in_I])]
        in_pred = np.zeros_like(in_I)
        in_pred[best] = True
        fallback = True
    return Selection(pre, in_I, in_pred, float(c_imp), float(c_pred), config.score_kind,
                     bool(in_I.any()), fallback)


def predict_discrete(predictors, X_test) -> np.ndarray:
    """Average of the matched predictors on one test environment.

    ``L2`` for each predictor is refitted on ``X_test``.  Predictors whose
    test regression is rank deficient are dropped with a warning.

    Raises
    ------
    RankDeficiencyError
        Every predictor was dropped.
    """
    X_test = np.atleast_2d(np.asarray(X_test, dtype=float))
    if X_test.shape[0] == 0:
        raise ValueError("X_test is empty")
    preds = []
    for p in predictors:
        try:
            preds.append(p.predict(X_test))
        except RankDeficiencyError as exc:
            warnings.warn(f"dropping {p.candidate.label()}: {exc}", RuntimeWarning, stacklevel=2)
    if not preds:
        raise RankDeficiencyError("no predictor could be evaluated on the test sample")
    return np.mean(preds, axis=0)


# ---------------------------------------------------------------------------
# end-to-end fit


@dataclass(frozen=True, eq=False)
class DiscreteImpModel:
    """Fitted discrete IMP model: the score table, cutoffs, selection and predictors."""

    scores: CandidateScores
    cutoffs: Cutoffs | None
    selection: Selection
    predictors: tuple

    @property
    def found(self):
        return self.selection.found

    def predict(self, X_test):
        if not self.predictors:
            raise NoImpFoundError("no invariant matching candidate was found")
        return predict_discrete(self.predictors, X_test)

    def score_rows(self):
        """Rows of the score table: k, R, S, feasible, T, p_inv, s_pred, selected flags."""
        sel = self.selection
        rows = []
        for i, c in enumerate(self.scores.candidates):
            rows.append({
                "k": c.k,
                "R": " ".join(map(str, c.R)),
                "S": " ".join(map(str, c.S)),
                "feasible": int(self.scores.feasible[i]),
                "T": self.scores.T[i],
                "p_inv": self.scores.p_inv[i],
                "s_pred": self.scores.s_pred[i],
                "selected_I": int(sel.selected_I[i]),
                "selected_Ipred": int(sel.selected_Ipred[i]),
            })
        return rows


def build_model(scores, selection, cutoffs=None) -> DiscreteImpModel:
    preds = tuple(scores.predictor(i) for i in np.flatnonzero(selection.selected_Ipred))
    return DiscreteImpModel(scores, cutoffs, selection, preds)


def fit_imp_discrete(panel: PanelDataset, config: SelectionConfig = SelectionConfig(), candidates=None) -> DiscreteImpModel:
    """Score, calibrate cutoffs, select and assemble the averaged predictor."""
    if candidates is None:
        candidates = tuple(enumerate_candidates(panel.d))
    candidates = tuple(candidates)
    scores = score_candidates(panel, candidates)
    cutoffs = None
    need_boot = config.c_pred is None or (config.score_kind == RESIDUAL and config.c_imp is None)
    if need_boot:
        cutoffs = bootstrap_cutoffs(panel, candidates, config)
    selection = select_imps(scores, config, cutoffs)
    if not selection.found:
        log.warning("no invariant matching candidate passed the cutoff")
    return build_model(scores, selection, cutoffs)
