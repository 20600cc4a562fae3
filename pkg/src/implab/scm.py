"""Linear Gaussian structural causal models over predictors ``X`` and a response ``Y``.

The model for one environment is::

    X = gamma * Y + B @ X + eps_X
    Y = (beta + alpha) @ X + eps_Y

``beta`` holds the coefficients of ``Y`` that stay fixed across
environments and ``alpha`` the environment-specific part; parents with a
non-zero ``alpha`` form the set ``PE``.  Predictor nodes are indexed
``0, ..., d-1`` and the response is addressed with the constant :data:`Y`.
Joint vectors are ordered ``(X_0, ..., X_{d-1}, Y)``.

Environments are described by :class:`InterventionSpec` objects whose edits
are applied on top of a base model.  Edit payloads may be callables of a
continuous environment variable ``u`` (see :class:`Sine`), in which case
parameters are evaluated per sample at sampling time.
"""

from __future__ import annotations

import graphlib
import json
import numbers
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from ._random import make_rng
from .errors import GenerationError, InterventionError, RankDeficiencyError

Y = "Y"

SHIFT = "shift"
COEFFICIENT = "coefficient"
NOISE_VARIANCE = "noise_variance"
_KINDS = (SHIFT, COEFFICIENT, NOISE_VARIANCE)

# relative eigenvalue tolerance for covariance blocks
RCOND = 1e-10


@dataclass(frozen=True)
class Sine:
    """Perturbation ``amplitude * sin(2 pi frequency u)`` of a continuous environment."""

    amplitude: float
    frequency: float

    def __call__(self, u):
        return self.amplitude * np.sin(2.0 * np.pi * self.frequency * np.asarray(u, dtype=float))


@dataclass(frozen=True)
class Edit:
    """One parameter change.

    ``kind`` is ``"shift"`` (noise mean += payload), ``"coefficient"``
    (edge weight += payload) or ``"noise_variance"`` (noise variance set to
    payload).  Coefficient edits name the edge by ``source -> target``; with
    ``source=None`` the payload is a ``d``-vector added to all predictor
    parents of ``target`` at once.
    """

    target: int | str
    kind: str
    payload: object
    source: int | str | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise InterventionError(f"unknown edit kind {self.kind!r}")


@dataclass(frozen=True)
class InterventionSpec:
    """The edits that define one environment, labelled by ``env``.

    ``env`` is a discrete label or, for continuous environments, the value
    ``u`` at which callable payloads are evaluated.
    """

    env: object
    edits: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "edits", tuple(self.edits))


def _frozen_array(values, shape, name):
    arr = np.array(values, dtype=float)
    if arr.shape != shape:
        raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LinearScm:
    """Parameters of one acyclic linear SCM (one environment)."""

    gamma: np.ndarray
    B: np.ndarray
    beta: np.ndarray
    alpha: np.ndarray | None = None
    noise_x_mean: np.ndarray | None = None
    noise_x_var: np.ndarray | None = None
    noise_y_mean: float = 0.0
    noise_y_var: float = 1.0

    def __post_init__(self):
        d = np.asarray(self.gamma).shape[0]
        set_ = lambda name, value: object.__setattr__(self, name, value)  # noqa: E731
        set_("gamma", _frozen_array(self.gamma, (d,), "gamma"))
        set_("B", _frozen_array(self.B, (d, d), "B"))
        set_("beta", _frozen_array(self.beta, (d,), "beta"))
        set_("alpha", _frozen_array(np.zeros(d) if self.alpha is None else self.alpha, (d,), "alpha"))
        set_("noise_x_mean", _frozen_array(
            np.zeros(d) if self.noise_x_mean is None else self.noise_x_mean, (d,), "noise_x_mean"))
        set_("noise_x_var", _frozen_array(
            np.ones(d) if self.noise_x_var is None else self.noise_x_var, (d,), "noise_x_var"))
        set_("noise_y_mean", float(self.noise_y_mean))
        set_("noise_y_var", float(self.noise_y_var))

    @property
    def d(self):
        return self.gamma.shape[0]

    def coefficients_y(self):
        """Coefficients of ``Y`` on ``X`` in this environment (``beta + alpha``)."""
        return self.beta + self.alpha

    def joint_matrix(self):
        """Coefficient matrix ``A`` of the stacked system ``V = A V + eps``."""
        d = self.d
        A = np.zeros((d + 1, d + 1))
        A[:d, :d] = self.B
        A[:d, d] = self.gamma
        A[d, :d] = self.coefficients_y()
        return A

    def noise_mean(self):
        return np.append(self.noise_x_mean, self.noise_y_mean)

    def noise_var(self):
        return np.append(self.noise_x_var, self.noise_y_var)

    def replace(self, **changes):
        return replace(self, **changes)


def _node_index(d, node):
    if isinstance(node, str):
        if node != Y:
            raise InterventionError(f"unknown node {node!r}")
        return d
    if isinstance(node, numbers.Integral) and 0 <= node < d:
        return int(node)
    raise InterventionError(f"node {node!r} does not exist (d={d})")


# ---------------------------------------------------------------------------
# validation and graph structure


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: tuple = ()


def _adjacency(scm):
    """Boolean adjacency of the joint graph, ``adj[i, j]`` meaning ``j -> i``."""
    return scm.joint_matrix() != 0


def validate_scm(scm: LinearScm) -> ValidationReport:
    """Check acyclicity and positivity of all noise variances."""
    violations = []
    adj = _adjacency(scm)
    deps = {i: set(np.flatnonzero(adj[i]).tolist()) for i in range(scm.d + 1)}
    try:
        tuple(graphlib.TopologicalSorter(deps).static_order())
    except graphlib.CycleError as exc:
        cycle = [_label(scm.d, i) for i in exc.args[1]]
        violations.append("cycle: " + " -> ".join(cycle))
    for j, v in enumerate(scm.noise_x_var):
        if not (np.isfinite(v) and v > 0):
            violations.append(f"noise variance of X{j} is {v}, must be > 0")
    if not (np.isfinite(scm.noise_y_var) and scm.noise_y_var > 0):
        violations.append(f"noise variance of Y is {scm.noise_y_var}, must be > 0")
    for name in ("gamma", "B", "beta", "alpha", "noise_x_mean"):
        if not np.all(np.isfinite(getattr(scm, name))):
            violations.append(f"{name} has non-finite entries")
    return ValidationReport(ok=not violations, violations=tuple(violations))


def _label(d, i):
    return Y if i == d else f"X{i}"


@dataclass(frozen=True)
class GraphView:
    """Parent/child/descendant sets of an SCM plus intervention-derived sets.

    Node keys are predictor indices and :data:`Y`.  ``x_int[j]`` holds the
    intervened children of ``X_j`` and all their descendants; ``x_int_y``
    is the same set for the response.
    """

    d: int
    parents: dict
    children: dict
    descendants: dict
    intervened: frozenset
    pe: frozenset
    x_int: dict
    x_int_y: frozenset

    @property
    def pa_y(self):
        return self.parents[Y]

    @property
    def ch_y(self):
        return self.children[Y]

    @property
    def mb_y(self):
        spouses = set()
        for c in self.ch_y:
            spouses |= self.parents[c]
        return frozenset((set(self.pa_y) | set(self.ch_y) | spouses) - {Y})

    def assumption_1(self):
        """``Y`` has at least one child."""
        return bool(self.ch_y)

    def assumption_2(self):
        """``Y`` has a child that is neither intervened nor below an intervened child."""
        return bool(self.ch_y - self.x_int_y)


def graph_sets(scm: LinearScm, intervened: Iterable[int] = (), varying: Iterable[int] | None = None) -> GraphView:
    """Graph sets of ``scm`` given the intervened predictors.

    ``varying`` defaults to the predictors with a non-zero ``alpha``.
    """
    d = scm.d
    adj = _adjacency(scm)
    keys = list(range(d)) + [Y]
    parents = {keys[i]: frozenset(keys[j] for j in np.flatnonzero(adj[i])) for i in range(d + 1)}
    children = {keys[j]: frozenset(keys[i] for i in np.flatnonzero(adj[:, j])) for j in range(d + 1)}

    descendants = {}
    for node in keys:
        seen, stack = set(), list(children[node])
        while stack:
            c = stack.pop()
            if c not in seen:
                seen.add(c)
                stack.extend(children[c])
        descendants[node] = frozenset(seen - {node})

    intervened = frozenset(int(j) for j in intervened)
    for j in intervened:
        _node_index(d, j)

    def closure(node):
        out = set()
        for c in children[node]:
            if c != Y and c in intervened:
                out.add(c)
                out |= {x for x in descendants[c] if x != Y}
        return frozenset(out)

    if varying is None:
        pe = frozenset(int(j) for j in np.flatnonzero(scm.alpha))
    else:
        pe = frozenset(int(j) for j in varying)
    return GraphView(
        d=d,
        parents=parents,
        children=children,
        descendants=descendants,
        intervened=intervened,
        pe=pe,
        x_int={j: closure(j) for j in range(d)},
        x_int_y=closure(Y),
    )


def topological_order(scm):
    """Joint indices (``d`` stands for ``Y``) in a causal order."""
    adj = _adjacency(scm)
    deps = {i: set(np.flatnonzero(adj[i]).tolist()) for i in range(scm.d + 1)}
    return list(graphlib.TopologicalSorter(deps).static_order())


# ---------------------------------------------------------------------------
# interventions


def _payload_value(payload, u):
    if callable(payload):
        if u is None:
            raise InterventionError("callable payload needs a continuous environment value")
        return payload(u)
    return np.asarray(payload, dtype=float)


class _Batch:
    """Per-sample parameter arrays with a leading batch axis."""

    def __init__(self, scm, n):
        self.scm = scm
        self.gamma = np.tile(scm.gamma, (n, 1))
        self.B = np.tile(scm.B, (n, 1, 1))
        self.alpha = np.tile(scm.alpha, (n, 1))
        self.x_mean = np.tile(scm.noise_x_mean, (n, 1))
        self.x_var = np.tile(scm.noise_x_var, (n, 1))
        self.y_mean = np.full(n, scm.noise_y_mean)
        self.y_var = np.full(n, scm.noise_y_var)

    def apply(self, edit, u):
        d = self.scm.d
        t = _node_index(d, edit.target)
        v = _payload_value(edit.payload, u)
        if edit.kind == SHIFT:
            if t == d:
                self.y_mean = self.y_mean + v
            else:
                self.x_mean[:, t] += v
        elif edit.kind == NOISE_VARIANCE:
            if np.any(~(np.asarray(v) > 0)):
                raise InterventionError(f"noise variance edit on {edit.target!r} must be positive")
            if t == d:
                self.y_var = np.broadcast_to(v, self.y_var.shape).astype(float)
            else:
                self.x_var[:, t] = v
        else:
            self._coefficient(t, edit, v)

    def _coefficient(self, t, edit, v):
        d = self.scm.d
        base = self.scm.joint_matrix()
        if edit.source is None:
            vec = np.asarray(v, dtype=float)
            if vec.shape[-1:] != (d,):
                raise InterventionError("row coefficient edit needs a d-vector payload")
            bad = np.flatnonzero((np.atleast_2d(vec) != 0).any(axis=0) & (base[t, :d] == 0))
            if bad.size:
                raise InterventionError(f"no edge X{bad[0]} -> {_label(d, t)} to edit")
            if t == d:
                self.alpha += vec
            else:
                self.B[:, t, :] += vec
            return
        s = _node_index(d, edit.source)
        if s == t or base[t, s] == 0:
            raise InterventionError(f"no edge {_label(d, s)} -> {_label(d, t)} to edit")
        if t == d:
            self.alpha[:, s] += v
        elif s == d:
            self.gamma[:, t] += v
        else:
            self.B[:, t, s] += v

    def joint(self):
        n, d = self.gamma.shape
        A = np.zeros((n, d + 1, d + 1))
        A[:, :d, :d] = self.B
        A[:, :d, d] = self.gamma
        A[:, d, :d] = self.scm.beta + self.alpha
        mean = np.concatenate([self.x_mean, self.y_mean[:, None]], axis=1)
        var = np.concatenate([self.x_var, self.y_var[:, None]], axis=1)
        return A, mean, var


def _as_specs(env):
    if env is None:
        return ()
    if isinstance(env, InterventionSpec):
        return (env,)
    return tuple(env)


def _env_value(spec):
    env = spec.env
    if isinstance(env, numbers.Real) and not isinstance(env, bool):
        return float(env)
    return None


def apply_interventions(scm: LinearScm, specs) -> LinearScm:
    """Return a new model with the edits of ``specs`` applied in order.

    Callable payloads are evaluated at each spec's ``env`` value.
    """
    batch = _Batch(scm, 1)
    for spec in _as_specs(specs):
        for edit in spec.edits:
            batch.apply(edit, _env_value(spec))
    return LinearScm(
        gamma=batch.gamma[0],
        B=batch.B[0],
        beta=scm.beta,
        alpha=batch.alpha[0],
        noise_x_mean=batch.x_mean[0],
        noise_x_var=batch.x_var[0],
        noise_y_mean=batch.y_mean[0],
        noise_y_var=batch.y_var[0],
    )


def _edits_of(edits):
    if isinstance(edits, InterventionSpec):
        return edits.edits
    return tuple(edits)


def _batched_joint(scm, edits, U):
    U = np.asarray(U, dtype=float)
    batch = _Batch(scm, U.shape[0])
    for edit in _edits_of(edits):
        batch.apply(edit, U)
    return batch.joint()


def _reduced_form(A):
    eye = np.eye(A.shape[-1])
    try:
        M = np.linalg.solve(eye - A, np.broadcast_to(eye, A.shape))
    except np.linalg.LinAlgError:
        M = np.full(A.shape, np.nan)
    if not np.all(np.isfinite(M)):
        raise RankDeficiencyError("I - A is singular; the model is not acyclic")
    return M


# ---------------------------------------------------------------------------
# population quantities


def population_moments(scm: LinearScm, env=None):
    """Exact mean and covariance of ``(X, Y)`` in the environment ``env``."""
    scm = apply_interventions(scm, env)
    M = _reduced_form(scm.joint_matrix())
    mean = M @ scm.noise_mean()
    cov = (M * scm.noise_var()) @ M.T
    return mean, 0.5 * (cov + cov.T)


def population_moments_batch(scm: LinearScm, edits, U):
    """Per-sample means ``(n, d+1)`` and covariances ``(n, d+1, d+1)`` at environments ``U``."""
    A, mu, var = _batched_joint(scm, edits, U)
    M = _reduced_form(A)
    mean = np.einsum("nij,nj->ni", M, mu)
    cov = np.einsum("nij,nj,nkj->nik", M, var, M)
    return mean, cov


def _lmmse_from_moments(mean, cov, t, idx, label):
    idx = list(idx)
    if not idx:
        return np.zeros(0), float(mean[t])
    block = cov[np.ix_(idx, idx)]
    eig = np.linalg.eigvalsh(block)
    if eig[0] <= RCOND * eig[-1]:
        raise RankDeficiencyError(
            f"covariance of predictors {label} is rank deficient",
            condition=np.inf if eig[0] <= 0 else eig[-1] / eig[0],
            label=label,
        )
    coef = np.linalg.solve(block, cov[idx, t])
    intercept = float(mean[t] - coef @ mean[idx])
    return coef, intercept


def population_lmmse(scm: LinearScm, env, target, predictors):
    """Coefficients and intercept of the best linear predictor of ``target``.

    Parameters
    ----------
    scm : LinearScm
    env : InterventionSpec, sequence of specs or None
    target : int or ``"Y"``
    predictors : sequence of int or ``"Y"``

    Returns
    -------
    coefficients : ndarray, shape (len(predictors),)
    intercept : float
    """
    mean, cov = population_moments(scm, env)
    d = scm.d
    t = _node_index(d, target)
    idx = [_node_index(d, p) for p in predictors]
    return _lmmse_from_moments(mean, cov, t, idx, label=str(list(predictors)))


def conditional_y_given_x(mean, cov, X):
    """``E[Y | X]`` and ``Var(Y | X)`` for Gaussian moments, row by row.

    ``mean``/``cov`` are either single moments or per-row batches as returned
    by :func:`population_moments_batch`.  Both come from a Cholesky factor
    ``L`` of the joint covariance (``Y`` last): ``Var(Y | X) = L_yy^2`` and
    the regression coefficients solve ``L_xx^T b = L_yx``.  This stays
    accurate for badly scaled but positive definite covariances.

    Raises
    ------
    RankDeficiencyError
        The joint covariance is not positive definite.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    single = mean.ndim == 1
    mean, cov = np.atleast_2d(mean), cov.reshape((-1,) + cov.shape[-2:])
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError("joint covariance of (X, Y) is not positive definite", label="X") from exc
    Lxx = L[:, :-1, :-1]
    Lyx = L[:, -1, :-1]
    coef = np.linalg.solve(np.swapaxes(Lxx, -1, -2), Lyx[..., None])[..., 0]
    var = L[:, -1, -1] ** 2
    if single:
        pred = mean[0, -1] + (X - mean[0, :-1]) @ coef[0]
        return pred, np.full(X.shape[0], var[0])
    pred = mean[:, -1] + np.einsum("ni,ni->n", coef, X - mean[:, :-1])
    return pred, var


# ---------------------------------------------------------------------------
# sampling


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return make_rng(seed)


def sample(scm: LinearScm, env=None, n: int = 1, seed=0) -> np.ndarray:
    """Draw ``n`` i.i.d. rows ``(X, Y)`` with Gaussian noise.

    ``seed`` is an integer or a ``numpy.random.Generator``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    scm = apply_interventions(scm, env)
    M = _reduced_form(scm.joint_matrix())
    rng = _rng(seed)
    eps = scm.noise_mean() + np.sqrt(scm.noise_var()) * rng.standard_normal((n, scm.d + 1))
    return eps @ M.T


def sample_continuous(scm: LinearScm, edits, U, seed=0) -> np.ndarray:
    """Draw one row per environment value in ``U``, parameters evaluated at each ``U_i``."""
    U = np.asarray(U, dtype=float)
    A, mu, var = _batched_joint(scm, edits, U)
    M = _reduced_form(A)
    rng = _rng(seed)
    eps = mu + np.sqrt(var) * rng.standard_normal(mu.shape)
    return np.einsum("nij,nj->ni", M, eps)


# ---------------------------------------------------------------------------
# random generation


@dataclass(frozen=True)
class RandomScmConfig:
    """Settings for :func:`random_scm`.

    ``n_variables`` counts all nodes including the response, so the
    generated model has ``n_variables - 1`` predictors.
    """

    n_variables: int = 9
    edge_prob: float = 0.5
    coef_range: tuple = (0.5, 1.5)
    require_parent_and_child: bool = True
    max_attempts: int = 1000


def random_scm(config: RandomScmConfig = RandomScmConfig(), seed=0) -> LinearScm:
    """Random DAG with lower-triangular Bernoulli adjacency and a random response node.

    Non-zero weights are uniform on ``[-hi, -lo] U [lo, hi]``; noises are
    standard normal.  The adjacency is redrawn until some node has both a
    parent and a child.
    """
    n = config.n_variables
    if n < 3:
        raise ValueError("n_variables must be at least 3")
    rng = _rng(seed)
    for _ in range(config.max_attempts):
        adj = np.tril(rng.random((n, n)) < config.edge_prob, k=-1)
        if config.require_parent_and_child:
            eligible = np.flatnonzero(adj.any(axis=1) & adj.any(axis=0))
        else:
            eligible = np.arange(n)
        if eligible.size:
            break
    else:
        raise GenerationError(
            f"no node with a parent and a child after {config.max_attempts} attempts"
        )
    y = int(rng.choice(eligible))
    lo, hi = config.coef_range
    weights = rng.uniform(lo, hi, (n, n)) * rng.choice([-1.0, 1.0], (n, n)) * adj
    xs = [i for i in range(n) if i != y]
    return LinearScm(
        gamma=weights[xs, y],
        B=weights[np.ix_(xs, xs)],
        beta=weights[y, xs],
    )


# ---------------------------------------------------------------------------
# serialization


def _payload_to_json(payload):
    if isinstance(payload, Sine):
        return {"sine": {"amplitude": payload.amplitude, "frequency": payload.frequency}}
    arr = np.asarray(payload, dtype=float)
    return arr.tolist() if arr.ndim else float(arr)


def _payload_from_json(obj):
    if isinstance(obj, dict):
        return Sine(**obj["sine"])
    if isinstance(obj, list):
        return np.asarray(obj, dtype=float)
    return float(obj)


def spec_to_dict(spec: InterventionSpec) -> dict:
    return {
        "env": spec.env,
        "edits": [
            {"target": e.target, "kind": e.kind, "source": e.source, "payload": _payload_to_json(e.payload)}
            for e in spec.edits
        ],
    }


def spec_from_dict(doc) -> InterventionSpec:
    edits = tuple(
        Edit(target=e["target"], kind=e["kind"], source=e.get("source"), payload=_payload_from_json(e["payload"]))
        for e in doc.get("edits", ())
    )
    return InterventionSpec(env=doc["env"], edits=edits)


def scm_to_dict(scm: LinearScm, interventions: Sequence[InterventionSpec] = ()) -> dict:
    """JSON-ready document for a model and its environments."""
    alpha_by_env = {"base": scm.alpha.tolist()}
    for spec in interventions:
        try:
            alpha_by_env[str(spec.env)] = apply_interventions(scm, spec).alpha.tolist()
        except InterventionError:
            pass
    return {
        "d": scm.d,
        "gamma": scm.gamma.tolist(),
        "B": scm.B.tolist(),
        "beta": scm.beta.tolist(),
        "alpha_by_env": alpha_by_env,
        "noise_x": [[m, v] for m, v in zip(scm.noise_x_mean.tolist(), scm.noise_x_var.tolist())],
        "noise_y": [scm.noise_y_mean, scm.noise_y_var],
        "interventions": [spec_to_dict(s) for s in interventions],
    }


def scm_from_dict(doc):
    """Inverse of :func:`scm_to_dict`; returns ``(scm, interventions)``."""
    noise_x = np.asarray(doc["noise_x"], dtype=float).reshape(-1, 2)
    scm = LinearScm(
        gamma=doc["gamma"],
        B=np.asarray(doc["B"], dtype=float).reshape(doc["d"], doc["d"]),
        beta=doc["beta"],
        alpha=doc["alpha_by_env"]["base"],
        noise_x_mean=noise_x[:, 0],
        noise_x_var=noise_x[:, 1],
        noise_y_mean=doc["noise_y"][0],
        noise_y_var=doc["noise_y"][1],
    )
    return scm, [spec_from_dict(s) for s in doc.get("interventions", ())]


def scm_to_json(scm, interventions=(), indent=2):
    return json.dumps(scm_to_dict(scm, interventions), indent=indent, sort_keys=True)


def scm_from_json(text):
    return scm_from_dict(json.loads(text))


def toy_scm(a=1.0):
    """The three-predictor example ``Y = a X0 + X1 + N_Y``, ``X2 = Y + X0 + N_2``."""
    return LinearScm(
        gamma=[0.0, 0.0, 1.0],
        B=[[0, 0, 0], [0, 0, 0], [1.0, 0, 0]],
        beta=[a, 1.0, 0.0],
    )
