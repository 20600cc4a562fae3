"""Statistical kernels shared by the discrete and continuous methods.

Ordinary least squares with a conditioning gate, a residual invariance test
across environments, the Epanechnikov kernel and profile least squares for
semiparametric varying-coefficient (SVC) models

    Y = alpha(U)^T W + beta^T Z + N.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse, stats

from .errors import BandwidthError, RankDeficiencyError

# design condition above which a least-squares fit is refused
OLS_RCOND = 1e-10
# local Gram condition above which a ridge is added
LOCAL_COND_MAX = 1e12
LOCAL_RIDGE = 1e-10
# number of (point, neighbour) pairs processed per vectorized block
_PAIR_BLOCK = 200_000


@dataclass(frozen=True, eq=False)
class OlsFit:
    """Result of :func:`ols_fit`.

    ``condition`` is the 2-norm condition number of the column-equilibrated
    design (intercept column included).
    """

    coefficients: np.ndarray
    intercept: float
    residuals: np.ndarray
    condition: float

    def predict(self, design):
        design = np.asarray(design, dtype=float).reshape(-1, self.coefficients.shape[0])
        return design @ self.coefficients + self.intercept


def design_condition(design):
    """Condition number of ``design`` after scaling every column to unit norm."""
    design = np.asarray(design, dtype=float)
    if design.shape[1] == 0:
        return 1.0
    norms = np.linalg.norm(design, axis=0)
    if np.any(norms == 0):
        return np.inf
    s = np.linalg.svd(design / norms, compute_uv=False)
    return np.inf if s[-1] == 0 else float(s[0] / s[-1])


def ols_fit(design, response, with_intercept=True, rcond=OLS_RCOND, label=None) -> OlsFit:
    """Least-squares regression of ``response`` on the columns of ``design``.

    Parameters
    ----------
    design : array_like, shape (n, p)
    response : array_like, shape (n,)
    with_intercept : bool
        Append a constant-one column.
    rcond : float
        Fits whose equilibrated design condition exceeds ``1 / rcond`` are
        refused; ``rcond <= 0`` only refuses exactly singular designs.

    Raises
    ------
    RankDeficiencyError
        Too few rows or a numerically rank-deficient design.
    """
    y = np.asarray(response, dtype=float).ravel()
    X = np.asarray(design, dtype=float).reshape(y.shape[0], -1)
    full = np.column_stack([np.ones(len(y)), X]) if with_intercept else X
    n, cols = full.shape
    if n <= cols:
        raise RankDeficiencyError(f"{n} rows for {cols} columns", label=label)
    if cols == 0:
        return OlsFit(np.zeros(0), 0.0, y.copy(), 1.0)
    cond = design_condition(full)
    limit = 1.0 / rcond if rcond > 0 else np.inf
    if not cond <= limit:
        raise RankDeficiencyError(
            f"design condition {cond:.3g} exceeds {limit:.3g}", condition=cond, label=label
        )
    norms = np.linalg.norm(full, axis=0)
    coef = np.linalg.lstsq(full / norms, y, rcond=None)[0] / norms
    resid = y - full @ coef
    if with_intercept:
        return OlsFit(coef[1:], float(coef[0]), resid, cond)
    return OlsFit(coef, 0.0, resid, cond)


# ---------------------------------------------------------------------------
# residual invariance test


def _welch_pvalue(n1, m1, v1, n2, m2, v2):
    se2 = v1 / n1 + v2 / n2
    diff = m1 - m2
    with np.errstate(divide="ignore", invalid="ignore"):
        t = diff / np.sqrt(se2)
        df = se2**2 / ((v1 / n1) ** 2 / (n1 - 1) + (v2 / n2) ** 2 / (n2 - 1))
        p = 2.0 * stats.t.sf(np.abs(t), df)
    degenerate = se2 <= 0
    p = np.where(degenerate, np.where(diff == 0, 1.0, 0.0), p)
    return np.nan_to_num(p, nan=1.0)


def _variance_ratio_pvalue(n1, v1, n2, v2):
    with np.errstate(divide="ignore", invalid="ignore"):
        F = v1 / v2
        cdf = stats.f.cdf(F, n1 - 1, n2 - 1)
        p = 2.0 * np.minimum(cdf, 1.0 - cdf)
    both_zero = (v1 <= 0) & (v2 <= 0)
    one_zero = (v1 <= 0) ^ (v2 <= 0)
    p = np.where(both_zero, 1.0, np.where(one_zero, 0.0, p))
    return np.nan_to_num(p, nan=1.0)


def invariance_pvalue_from_moments(counts, sums, sumsqs):
    """Vectorized residual invariance p-values from per-environment moments.

    Parameters
    ----------
    counts : array_like, shape (E,)
        Residuals per environment.
    sums, sumsqs : array_like, shape (..., E)
        Per-environment sums and sums of squares of the residuals; leading
        axes index independent residual vectors.

    Returns
    -------
    ndarray, shape (...)
        ``min(1, 2 E min_e min(p_t(e), p_F(e)))`` where ``p_t`` is a Welch
        t-test and ``p_F`` a two-sided variance-ratio F-test of environment
        ``e`` against all others.
    """
    n1 = np.asarray(counts, dtype=float)
    sums = np.asarray(sums, dtype=float)
    sumsqs = np.asarray(sumsqs, dtype=float)
    E = n1.shape[0]
    if E < 2:
        raise ValueError("the invariance test needs at least two environments")
    if np.any(n1 < 3):
        raise ValueError("every environment needs at least 3 residuals")
    n2 = n1.sum() - n1
    s2 = sums.sum(axis=-1, keepdims=True) - sums
    q2 = sumsqs.sum(axis=-1, keepdims=True) - sumsqs
    m1, m2 = sums / n1, s2 / n2
    v1 = np.maximum(sumsqs - n1 * m1**2, 0.0) / (n1 - 1)
    v2 = np.maximum(q2 - n2 * m2**2, 0.0) / (n2 - 1)
    pt = _welch_pvalue(n1, m1, v1, n2, m2, v2)
    pf = _variance_ratio_pvalue(n1, v1, n2, v2)
    pmin = np.minimum(pt.min(axis=-1), pf.min(axis=-1))
    return np.minimum(1.0, 2.0 * E * pmin)


def residual_invariance_pvalue(residuals, env_labels) -> float:
    """p-value for the hypothesis that residuals are identically distributed across environments.

    Each environment is compared with the union of the others by a Welch
    t-test of the means and a two-sided F-test of the variances; the
    ``2 |E|`` p-values are combined with a Bonferroni correction.

    Raises
    ------
    ValueError
        Fewer than two environments, or an environment with < 3 residuals.
    """
    r = np.asarray(residuals, dtype=float).ravel()
    labels = np.asarray(env_labels)
    if labels.shape[0] != r.shape[0]:
        raise ValueError("residuals and env_labels differ in length")
    _, codes = np.unique(labels, return_inverse=True)
    counts = np.bincount(codes)
    # centre for numerical stability of the moment formulas
    r = r - r.mean()
    sums = np.bincount(codes, weights=r)
    sumsqs = np.bincount(codes, weights=r * r)
    return float(invariance_pvalue_from_moments(counts, sums, sumsqs))


# ---------------------------------------------------------------------------
# kernel smoothing


def epanechnikov(u):
    """Epanechnikov kernel ``0.75 max(1 - u^2, 0)``."""
    u = np.asarray(u, dtype=float)
    out = 0.75 * np.maximum(1.0 - u * u, 0.0)
    return float(out) if out.ndim == 0 else out


class LocalLinearSmoother:
    """Local-linear smoother for varying coefficients in ``W``.

    For every sample point ``u = U_i`` the local design is
    ``[W, ((U - u) / h) W]`` with weights ``K((U - u) / h) / h``.  The
    smoother matrix ``A`` has rows ``[W_i^T 0] G_i^{-1} W~^T K`` with local
    Gram ``G_i``, so ``A @ r`` is the fitted varying part of the response
    ``r``.  ``A`` is stored sparse: a row is non-zero only on points within
    ``h`` of ``U_i``.

    Parameters
    ----------
    U : array_like, shape (n,)
    W : array_like, shape (n, p)
    h : float
    rhs : array_like, shape (n, c), optional
        Columns whose local coefficient estimates ``a_hat(U_i)`` are
        computed alongside ``A`` (available as ``local_coefficients``,
        shape ``(n, p, c)``).

    Raises
    ------
    BandwidthError
        A neighbourhood holds fewer than ``2 p`` points, or a local Gram is
        zero.
    """

    def __init__(self, U, W, h, rhs=None):
        U = np.asarray(U, dtype=float).ravel()
        n = U.shape[0]
        W = np.asarray(W, dtype=float).reshape(n, -1)
        if not h > 0:
            raise BandwidthError(f"bandwidth must be positive, got {h}")
        p = W.shape[1]
        if p == 0:
            raise ValueError("W needs at least one column")
        R = None if rhs is None else np.asarray(rhs, dtype=float).reshape(n, -1)
        self.h = float(h)
        self.n, self.p = n, p

        order = np.argsort(U, kind="stable")
        Us, Ws = U[order], W[order]
        Rs = None if R is None else R[order]
        lo = np.searchsorted(Us, Us - h, side="right")
        hi = np.searchsorted(Us, Us + h, side="left")
        counts = hi - lo
        short = np.flatnonzero(counts < 2 * p)
        if short.size:
            pts = U[order[short]]
            raise BandwidthError(
                f"{short.size} point(s) have fewer than {2 * p} neighbours within h={h}, "
                f"first at U={pts[0]:.6g}",
                points=pts[:10],
            )

        G = np.empty((n, 2 * p, 2 * p))
        S = None if Rs is None else np.empty((n, 2 * p, Rs.shape[1]))
        rows, cols, vals = [], [], []
        start = 0
        pairs = np.cumsum(counts)
        while start < n:
            stop = int(np.searchsorted(pairs, pairs[start] - counts[start] + _PAIR_BLOCK, side="right"))
            stop = max(stop, start + 1)
            self._block(Us, Ws, Rs, lo, counts, start, stop, G, S, rows, cols, vals, prep=True)
            start = stop

        ridge = self._regularize(G)
        self.regularized = bool(ridge.any())
        Ginv = np.linalg.inv(G)
        e = np.concatenate([Ws, np.zeros_like(Ws)], axis=1)
        self._c = np.einsum("nij,nj->ni", Ginv, e)

        start = 0
        while start < n:
            stop = int(np.searchsorted(pairs, pairs[start] - counts[start] + _PAIR_BLOCK, side="right"))
            stop = max(stop, start + 1)
            self._block(Us, Ws, Rs, lo, counts, start, stop, G, S, rows, cols, vals, prep=False)
            start = stop
        ii = order[np.concatenate(rows)]
        jj = order[np.concatenate(cols)]
        self.A = sparse.csr_matrix((np.concatenate(vals), (ii, jj)), shape=(n, n))
        self.local_coefficients = None
        if S is not None:
            coef = np.einsum("nij,njc->nic", Ginv[:, :p, :], S)
            self.local_coefficients = np.empty_like(coef)
            self.local_coefficients[order] = coef

    def _block(self, Us, Ws, Rs, lo, counts, start, stop, G, S, rows, cols, vals, prep):
        h = self.h
        cnt = counts[start:stop]
        ii = np.repeat(np.arange(start, stop), cnt)
        offsets = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        jj = np.repeat(lo[start:stop], cnt) + offsets
        t = (Us[jj] - Us[ii]) / h
        k = epanechnikov(t) / h
        Wj = Ws[jj]
        Wt = np.concatenate([Wj, t[:, None] * Wj], axis=1)
        bounds = np.concatenate([[0], np.cumsum(cnt)[:-1]])
        if prep:
            kW = k[:, None] * Wt
            G[start:stop] = np.add.reduceat(kW[:, :, None] * Wt[:, None, :], bounds, axis=0)
            if S is not None:
                S[start:stop] = np.add.reduceat(kW[:, :, None] * Rs[jj][:, None, :], bounds, axis=0)
        else:
            rows.append(ii)
            cols.append(jj)
            vals.append(k * np.einsum("ni,ni->n", Wt, self._c[ii]))

    def _regularize(self, G):
        two_p = G.shape[-1]
        eig = np.linalg.eigvalsh(G)
        trace = np.trace(G, axis1=1, axis2=2)
        if np.any(trace <= 0):
            raise BandwidthError("a local Gram matrix is zero; W vanishes near some point")
        with np.errstate(divide="ignore"):
            cond = np.where(eig[:, 0] > 0, eig[:, -1] / np.abs(eig[:, 0]), np.inf)
        bad = cond > LOCAL_COND_MAX
        ridge = np.where(bad, LOCAL_RIDGE * trace / self.p, 0.0)
        G += ridge[:, None, None] * np.eye(two_p)
        return bad


@dataclass(frozen=True, eq=False)
class SvcFit:
    """Profile least-squares fit of ``Y = alpha(U)^T W + beta^T Z + N``.

    Attributes
    ----------
    A : scipy.sparse.csr_matrix, shape (n, n)
        Smoother matrix.
    beta_hat : ndarray, shape (q,)
    M_hat : ndarray, shape (n,)
        ``A @ (Y - Z beta_hat)``, the varying part at the sample points.
    h : float
    alpha_hat : ndarray, shape (n, p)
        Local estimates of ``alpha(U_i)``.
    regularized : bool
        Whether any local Gram needed a ridge.
    """

    A: sparse.csr_matrix
    beta_hat: np.ndarray
    M_hat: np.ndarray
    h: float
    alpha_hat: np.ndarray
    regularized: bool = False


def profile_beta(smoother, Z, Y):
    """Invariant coefficients ``{Z~^T Z~}^{-1} Z~^T Y~`` with ``~ = (I - A)``."""
    q = Z.shape[1]
    if q == 0:
        return np.zeros(0)
    Zt = Z - smoother.A @ Z
    Yt = Y - smoother.A @ Y
    fit = ols_fit(Zt, Yt, with_intercept=False, label="Z")
    return fit.coefficients


def svc_profile_fit(U, W, Z, Y, h, smoother=None) -> SvcFit:
    """Profile least-squares estimate of an SVC model.

    Parameters
    ----------
    U : array_like, shape (n,)
    W : array_like, shape (n, p)
        Covariates with varying coefficients.
    Z : array_like, shape (n, q)
        Covariates with invariant coefficients; ``q`` may be zero.
    Y : array_like, shape (n,)
    h : float
        Bandwidth in the units of ``U``.
    smoother : LocalLinearSmoother, optional
        Reuse a smoother built for the same ``(U, W, h)``.
    """
    Y = np.asarray(Y, dtype=float).ravel()
    n = Y.shape[0]
    Z = np.asarray(Z, dtype=float).reshape(n, -1)
    if smoother is None:
        smoother = LocalLinearSmoother(U, W, h, rhs=np.column_stack([Y, Z]))
    beta = profile_beta(smoother, Z, Y)
    partial = Y - Z @ beta
    M = smoother.A @ partial
    if smoother.local_coefficients is not None:
        lc = smoother.local_coefficients
        alpha = lc[:, :, 0] - lc[:, :, 1:] @ beta
    else:
        alpha = LocalLinearSmoother(U, W, h, rhs=partial[:, None]).local_coefficients[:, :, 0]
    return SvcFit(A=smoother.A, beta_hat=beta, M_hat=M, h=smoother.h, alpha_hat=alpha,
                  regularized=smoother.regularized)


def svc_predict_m(U, W, Z, Y, h) -> np.ndarray:
    """Varying part ``M_hat`` of an SVC model fitted on the given data alone."""
    return svc_profile_fit(U, W, Z, Y, h).M_hat
