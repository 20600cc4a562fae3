"""Configuration-driven simulation studies and panel-CSV evaluations.

Recipes (``kind``):

``discrete_x``
    Shift interventions on a fixed random set of predictors.
``discrete_y``
    Coefficient perturbations on a random number of the response's
    parents, plus a shift on the response.
``discrete_xy``
    Both, with the intervened predictors chosen so that the response keeps
    a child outside ``X^int(Y)``.
``continuous_xy``
    Like ``discrete_xy`` with every perturbation ``a sin(2 pi w U)``.
``robustness_sweep``
    Every parameter of every node intervened except one child of the
    response, which is intervened with strength ``lambda``.
``csv_panel``
    Train/test panels read from CSV files.

Each replicate draws from random streams keyed by ``(seed, replicate)``, so
replicates may run in any order or in parallel.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import scm as scm_mod
from ._random import make_rng
from .baselines import ANCHOR_GRID, anchor_cv, pooled_ols
from .continuous import DEFAULT_BANDWIDTH, enumerate_candidates_cont, fit_imp_continuous
from .discrete import (INVARIANCE, RESIDUAL, SelectionConfig, bootstrap_cutoffs, build_model,
                       enumerate_candidates, score_candidates, select_imps)
from .errors import GenerationError, InterventionError
from .estimators import ols_fit
from .panel import ContinuousData, PanelDataset, PanelSchema, load_panel_csv
from .report import EvalReport
from .scm import COEFFICIENT, NOISE_VARIANCE, SHIFT, Y, Edit, InterventionSpec, Sine

log = logging.getLogger(__name__)

KINDS = ("discrete_x", "discrete_y", "discrete_xy", "continuous_xy", "robustness_sweep", "csv_panel")
METHODS = ("imp", "imp_inv", "ols", "anchor")

_DEFAULTS = {
    "discrete_x": {"methods": ("imp", "imp_inv", "ols", "anchor")},
    "discrete_y": {"methods": ("imp", "imp_inv", "ols", "anchor")},
    "discrete_xy": {"methods": ("imp", "imp_inv", "ols", "anchor")},
    "continuous_xy": {"methods": ("imp", "ols"), "n_variables": 5, "n_intervened_x": 2,
                      "n_per_env": 800, "n_bootstrap": 10},
    "robustness_sweep": {"methods": ("imp",), "test_range": (-5.0, 5.0)},
    "csv_panel": {"methods": ("imp", "imp_inv", "ols", "anchor")},
}


def _pair(value, name):
    lo, hi = (float(v) for v in value)
    if lo > hi:
        raise ValueError(f"{name} must satisfy lo <= hi, got {value}")
    return (lo, hi)


@dataclass(frozen=True)
class ExperimentConfig:
    """Settings of one study.  ``None`` fields take the defaults of ``kind``.

    Ranges are ``(lo, hi)`` pairs.  ``train_range``/``test_range`` bound
    shift and coefficient perturbations; ``train_var_range``/
    ``test_var_range`` bound intervened noise variances in the robustness
    sweep.  ``n_variables`` counts the response.
    """

    kind: str
    replicates: int = 1
    seed: int = 0
    methods: tuple | None = None
    n_variables: int | None = None
    edge_prob: float = 0.5
    n_train_envs: int = 5
    n_test_envs: int = 5
    n_per_env: int | None = None
    n_intervened_x: int | None = None
    train_range: tuple = (-2.0, 2.0)
    test_range: tuple | None = None
    train_var_range: tuple = (0.75, 1.25)
    test_var_range: tuple = (0.5, 1.5)
    lambdas: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    train_amplitude: float = 2.0
    test_amplitude: float = 5.0
    frequency_range: tuple = (0.5, 2.0)
    train_u_range: tuple = (0.0, 1.0)
    test_u_range: tuple = (1.0, 2.0)
    bandwidth: float = DEFAULT_BANDWIDTH
    n_bootstrap: int | None = None
    quantile: float = 0.9
    max_s_size: int | None = None
    min_s_size: int = 0
    max_candidates: int | None = None
    anchor_grid: tuple = ANCHOR_GRID
    folds: int = 5
    max_generation_attempts: int = 100
    workers: int = 1
    train_csv: str | None = None
    test_csv: str | None = None
    schema: dict | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        defaults = _DEFAULTS[self.kind]
        resolved = {
            "methods": defaults.get("methods"),
            "n_variables": defaults.get("n_variables", 9),
            "n_per_env": defaults.get("n_per_env", 300),
            "n_intervened_x": defaults.get("n_intervened_x", 4),
            "test_range": defaults.get("test_range", (-10.0, 10.0)),
            "n_bootstrap": defaults.get("n_bootstrap", 50),
        }
        for name, value in resolved.items():
            if getattr(self, name) is None:
                object.__setattr__(self, name, value)
        object.__setattr__(self, "methods", tuple(self.methods))
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")
        if self.kind == "continuous_xy" and set(self.methods) - {"imp", "ols"}:
            raise ValueError("continuous experiments support the methods imp and ols only")
        for name in ("train_range", "test_range", "train_var_range", "test_var_range", "frequency_range",
                     "train_u_range", "test_u_range"):
            object.__setattr__(self, name, _pair(getattr(self, name), name))
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        object.__setattr__(self, "anchor_grid", tuple(float(v) for v in self.anchor_grid))
        if self.kind in ("discrete_xy", "continuous_xy") and self.n_intervened_x > self.n_variables - 2:
            raise ValueError(
                f"n_intervened_x={self.n_intervened_x} leaves no unintervened child of the response "
                f"among {self.n_variables - 1} predictors; use at most {self.n_variables - 2}")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.kind == "csv_panel" and (self.train_csv is None or self.test_csv is None or self.schema is None):
            raise ValueError("csv_panel needs train_csv, test_csv and schema")

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        doc = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}
        return cls(**doc)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


# ---------------------------------------------------------------------------
# environment recipes


@dataclass(frozen=True, eq=False)
class Scenario:
    """A generated model with its training and test environments.

    Discrete scenarios hold one :class:`InterventionSpec` per environment;
    continuous ones hold a single edit list evaluated at each ``U``.
    """

    scm: scm_mod.LinearScm
    train_specs: tuple = ()
    test_specs: tuple = ()
    train_edits: tuple = ()
    test_edits: tuple = ()
    intervened: tuple = ()
    protected_child: int | None = None


def _uniform(rng, bounds, size=None, scale=1.0):
    lo, hi = bounds
    return rng.uniform(lo * scale, hi * scale, size)


def _choose_intervened(rng, scm, count, require_assumption_2, attempts):
    d = scm.d
    count = min(count, d)
    for _ in range(attempts):
        chosen = tuple(sorted(rng.choice(d, size=count, replace=False).tolist()))
        if not require_assumption_2 or scm_mod.graph_sets(scm, chosen).assumption_2():
            return chosen
    raise GenerationError("no intervened set leaves the response an unintervened child")


def _y_parents(scm):
    return np.flatnonzero(scm.beta != 0)


def _discrete_scenario(config, rng):
    """Random model and per-environment specs for the discrete recipes."""
    kind = config.kind
    scm = scm_mod.random_scm(scm_mod.RandomScmConfig(n_variables=config.n_variables, edge_prob=config.edge_prob),
                             seed=rng)
    shift_x = kind in ("discrete_x", "discrete_xy")
    hit_y = kind in ("discrete_y", "discrete_xy")
    intervened = ()
    if shift_x:
        intervened = _choose_intervened(rng, scm, config.n_intervened_x, kind == "discrete_xy", 50)
    varying = ()
    if hit_y:
        parents = _y_parents(scm)
        n_p = int(rng.integers(1, parents.size + 1))
        varying = tuple(sorted(rng.choice(parents, size=n_p, replace=False).tolist()))

    def specs(count, bounds, offset):
        out = []
        for e in range(count):
            edits = [Edit(j, SHIFT, float(_uniform(rng, bounds))) for j in intervened]
            if hit_y:
                edits += [Edit(Y, COEFFICIENT, float(_uniform(rng, bounds)), source=j) for j in varying]
                edits.append(Edit(Y, SHIFT, float(_uniform(rng, bounds))))
            out.append(InterventionSpec(env=offset + e, edits=tuple(edits)))
        return tuple(out)

    train = specs(config.n_train_envs, config.train_range, 0)
    test = specs(config.n_test_envs, config.test_range, config.n_train_envs)
    return Scenario(scm, train_specs=train, test_specs=test, intervened=intervened)


def _continuous_scenario(config, rng):
    scm = scm_mod.random_scm(scm_mod.RandomScmConfig(n_variables=config.n_variables, edge_prob=config.edge_prob),
                             seed=rng)
    intervened = _choose_intervened(rng, scm, config.n_intervened_x, True, 50)
    parents = _y_parents(scm)
    varying = tuple(sorted(rng.choice(parents, size=int(rng.integers(1, parents.size + 1)), replace=False).tolist()))
    targets = [(j, SHIFT, None) for j in intervened]
    targets += [(Y, COEFFICIENT, j) for j in varying]
    targets.append((Y, SHIFT, None))
    freqs = _uniform(rng, config.frequency_range, len(targets))

    def edits(amplitude):
        return tuple(Edit(t, kind, Sine(amplitude, float(w)), source=src) for (t, kind, src), w in zip(targets, freqs))

    return Scenario(scm, train_edits=edits(config.train_amplitude), test_edits=edits(config.test_amplitude),
                    intervened=intervened)


def _earliest_child(scm):
    children = set(scm_mod.graph_sets(scm).ch_y)
    for node in scm_mod.topological_order(scm):
        if node in children:
            return node
    raise GenerationError("the response has no child")


@dataclass(frozen=True)
class _RobustDraws:
    """Uniform(-1, 1) variates per environment, scaled per strength ``lambda``."""

    protected: int
    other_edges: tuple     # (target, source) pairs, targets other than the protected child
    child_edges: tuple     # (protected, source) pairs
    other_nodes: tuple     # nodes with shift and variance edits (not the protected child)
    train: tuple           # per env: (edge draws, shift draws, var draws, child edge, child shift, child var)
    test: tuple


def _robust_draws(config, rng):
    scm = scm_mod.random_scm(scm_mod.RandomScmConfig(n_variables=config.n_variables, edge_prob=config.edge_prob),
                             seed=rng)
    protected = _earliest_child(scm)
    A = scm.joint_matrix()
    d = scm.d
    label = lambda i: Y if i == d else int(i)  # noqa: E731
    edges = [(label(t), label(s)) for t, s in zip(*np.nonzero(A))]
    child_edges = tuple(e for e in edges if e[0] == protected)
    other_edges = tuple(e for e in edges if e[0] != protected)
    other_nodes = tuple(j for j in list(range(d)) + [Y] if j != protected)

    def draw(count):
        out = []
        for _ in range(count):
            out.append((
                rng.uniform(-1, 1, len(other_edges)),
                rng.uniform(-1, 1, len(other_nodes)),
                rng.uniform(0, 1, len(other_nodes)),
                rng.uniform(-1, 1, len(child_edges)),
                float(rng.uniform(-1, 1)),
                float(rng.uniform(-1, 1)),
            ))
        return tuple(out)

    return scm, _RobustDraws(protected, other_edges, child_edges, other_nodes,
                             draw(config.n_train_envs), draw(config.n_test_envs))


def _robust_specs(draws: _RobustDraws, bounds, var_bounds, lam, offset):
    """Specs at strength ``lam`` from fixed variates, so strengths share their randomness."""
    lo, hi = bounds
    vlo, vhi = var_bounds
    half_width = 0.5 * (vhi - vlo)
    span = lambda u: lo + 0.5 * (hi - lo) * (u + 1.0)  # noqa: E731
    specs = []
    env_draws = draws.train if offset == 0 else draws.test
    for e, (edge_u, shift_u, var_u, child_edge_u, child_shift_u, child_var_u) in enumerate(env_draws):
        edits = [Edit(t, COEFFICIENT, float(span(u)), source=s) for (t, s), u in zip(draws.other_edges, edge_u)]
        for node, u, v in zip(draws.other_nodes, shift_u, var_u):
            edits.append(Edit(node, SHIFT, float(span(u))))
            edits.append(Edit(node, NOISE_VARIANCE, float(vlo + (vhi - vlo) * v)))
        if lam > 0:
            edits += [Edit(t, COEFFICIENT, float(lam * span(u)), source=s)
                      for (t, s), u in zip(draws.child_edges, child_edge_u)]
            edits.append(Edit(draws.protected, SHIFT, float(lam * span(child_shift_u))))
            edits.append(Edit(draws.protected, NOISE_VARIANCE, float(1.0 + lam * half_width * child_var_u)))
        specs.append(InterventionSpec(env=offset + e, edits=tuple(edits)))
    return tuple(specs)


def robustness_scenario(config, rng, lam):
    """Scenario of the robustness sweep at strength ``lam`` (draws depend on ``rng`` only)."""
    scm, draws = _robust_draws(config, rng)
    train = _robust_specs(draws, config.train_range, config.train_var_range, lam, 0)
    test = _robust_specs(draws, config.test_range, config.test_var_range, lam, config.n_train_envs)
    others = tuple(j for j in draws.other_nodes if j != Y)
    return Scenario(scm, train_specs=train, test_specs=test, intervened=others, protected_child=draws.protected)


def make_scenario(config: ExperimentConfig, replicate: int, lam: float = 0.0) -> Scenario:
    """Generate the model and environments of one replicate.

    Generation failures are retried with fresh draws up to
    ``max_generation_attempts`` times.
    """
    last = None
    for attempt in range(config.max_generation_attempts):
        rng = make_rng(config.seed, replicate, attempt, 1)
        try:
            if config.kind == "continuous_xy":
                return _continuous_scenario(config, rng)
            if config.kind == "robustness_sweep":
                return robustness_scenario(config, rng, lam)
            return _discrete_scenario(config, rng)
        except (GenerationError, InterventionError, ValueError) as exc:
            last = exc
    raise GenerationError(f"replicate {replicate}: generation failed {config.max_generation_attempts} times: {last}")


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True, eq=False)
class TestEnv:
    label: object
    X: np.ndarray
    y: np.ndarray
    U: np.ndarray | None = None
    oracle: np.ndarray | None = None
    sigma2: float = np.nan


def sample_discrete(config, scenario, replicate):
    """Training panel and labelled test environments, with oracle predictions."""
    n = config.n_per_env
    groups = []
    for spec in scenario.train_specs:
        x = scm_mod.sample(scenario.scm, spec, n, make_rng(config.seed, replicate, 2, spec.env))
        groups.append((x[:, :-1], x[:, -1]))
    train = PanelDataset.from_groups(groups, labels=[f"train{s.env}" for s in scenario.train_specs])
    tests = []
    for spec in scenario.test_specs:
        x = scm_mod.sample(scenario.scm, spec, n, make_rng(config.seed, replicate, 2, spec.env))
        mean, cov = scm_mod.population_moments(scenario.scm, spec)
        oracle, var = scm_mod.conditional_y_given_x(mean, cov, x[:, :-1])
        tests.append(TestEnv(f"test{spec.env}", x[:, :-1], x[:, -1], oracle=oracle, sigma2=float(var[0])))
    return train, tuple(tests)


def sample_continuous_envs(config, scenario, replicate, n_train=None, n_test=None):
    """Training data on ``train_u_range`` and one test set on ``test_u_range``, with oracle."""
    n_train = config.n_per_env if n_train is None else n_train
    n_test = config.n_per_env if n_test is None else n_test
    rng = make_rng(config.seed, replicate, 3)
    U = rng.uniform(*config.train_u_range, n_train)
    x = scm_mod.sample_continuous(scenario.scm, scenario.train_edits, U, rng)
    train = ContinuousData(U, x[:, :-1], x[:, -1])
    Ut = rng.uniform(*config.test_u_range, n_test)
    xt = scm_mod.sample_continuous(scenario.scm, scenario.test_edits, Ut, rng)
    mean, cov = scm_mod.population_moments_batch(scenario.scm, scenario.test_edits, Ut)
    oracle, var = scm_mod.conditional_y_given_x(mean, cov, xt[:, :-1])
    test = TestEnv("test", xt[:, :-1], xt[:, -1], U=Ut, oracle=oracle, sigma2=float(var.mean()))
    return train, (test,)


# ---------------------------------------------------------------------------
# methods


def _candidates(config, d):
    if config.max_s_size is None and config.min_s_size == 0 and d > 8:
        log.warning("d=%d: restricting the search to S = all predictors", d)
        return tuple(enumerate_candidates(d, min_s_size=d, max_candidates=config.max_candidates))
    return tuple(enumerate_candidates(d, max_s_size=config.max_s_size, min_s_size=config.min_s_size,
                                      max_candidates=config.max_candidates))


@dataclass(frozen=True, eq=False)
class MethodOutput:
    """Predictions per test environment plus selection details."""

    predictions: tuple
    found: bool = True
    n_selected: int = 0
    candidates: tuple = ()
    fallback: bool = False


def run_discrete_methods(config, train: PanelDataset, tests, seed):
    """Fit every configured method on ``train`` and predict each test environment.

    IMP variants share one score table and one bootstrap; when no
    candidate passes the IMP cutoff they fall back to pooled OLS.
    """
    out = {}
    ols = pooled_ols(train) if {"ols", "imp", "imp_inv"} & set(config.methods) else None
    imp_kinds = [m for m in config.methods if m in ("imp", "imp_inv")]
    if imp_kinds:
        cands = _candidates(config, train.d)
        scores = score_candidates(train, cands)
        base = dict(n_bootstrap=config.n_bootstrap, quantile=config.quantile, seed=seed)
        cutoffs = bootstrap_cutoffs(train, cands, SelectionConfig(**base))
        for m in imp_kinds:
            sel_cfg = SelectionConfig(score_kind=RESIDUAL if m == "imp" else INVARIANCE, **base)
            model = build_model(scores, select_imps(scores, sel_cfg, cutoffs), cutoffs)
            if model.found:
                preds = tuple(model.predict(t.X) for t in tests)
            else:
                preds = tuple(ols.predict(t.X) for t in tests)
            out[m] = MethodOutput(preds, model.found, len(model.predictors),
                                  tuple(p.candidate.label() for p in model.predictors), not model.found)
    if "ols" in config.methods:
        out["ols"] = MethodOutput(tuple(ols.predict(t.X) for t in tests))
    if "anchor" in config.methods:
        model = anchor_cv(train, config.anchor_grid, config.folds, seed)
        out["anchor"] = MethodOutput(tuple(model.predict(t.X) for t in tests), candidates=(f"gamma={model.gamma}",))
    return out


def run_continuous_methods(config, train: ContinuousData, tests, seed):
    out = {}
    ols = ols_fit(train.X, train.y)
    if "imp" in config.methods:
        cands = tuple(enumerate_candidates_cont(train.d, max_s_size=config.max_s_size,
                                                max_candidates=config.max_candidates))
        sel_cfg = SelectionConfig(n_bootstrap=config.n_bootstrap, quantile=config.quantile, seed=seed)
        model = fit_imp_continuous(train, sel_cfg, cands, config.bandwidth)
        if model.found:
            preds = tuple(model.predict(t.U, t.X) for t in tests)
        else:
            preds = tuple(ols.predict(t.X) for t in tests)
        out["imp"] = MethodOutput(preds, model.found, len(model.predictors),
                                  tuple(p.candidate.label() for p in model.predictors), not model.found)
    if "ols" in config.methods:
        out["ols"] = MethodOutput(tuple(ols.predict(t.X) for t in tests))
    return out


# ---------------------------------------------------------------------------
# replicates


def _rows(outputs, tests, replicate, lam):
    rows, logs = [], []
    for method in sorted(outputs):
        res = outputs[method]
        for t, pred in zip(tests, res.predictions):
            rows.append({
                "method": method,
                "replicate": replicate,
                "lambda": lam,
                "test_env": str(t.label),
                "mean_rss": float(np.mean((pred - t.y) ** 2)),
                "oracle_rss": float(np.mean((t.oracle - t.y) ** 2)) if t.oracle is not None else np.nan,
                "sigma2": t.sigma2,
                "n_selected": res.n_selected,
                "fallback": int(res.fallback),
            })
        logs.append({"method": method, "replicate": replicate, "lambda": lam, "found": int(res.found),
                     "n_selected": res.n_selected, "candidates": "; ".join(res.candidates)})
    return rows, logs


def run_replicate(config: ExperimentConfig, replicate: int):
    """Rows, logs and skip records of one replicate (all strengths for a sweep)."""
    rows, logs, skipped = [], [], []
    lams = config.lambdas if config.kind == "robustness_sweep" else (None,)
    seed = int(make_rng(config.seed, replicate, 4).integers(2**31))
    for lam in lams:
        try:
            scenario = make_scenario(config, replicate, 0.0 if lam is None else lam)
        except GenerationError as exc:
            log.warning("skipping replicate %d: %s", replicate, exc)
            skipped.append({"replicate": replicate, "lambda": lam, "reason": str(exc)})
            continue
        if config.kind == "continuous_xy":
            train, tests = sample_continuous_envs(config, scenario, replicate)
            outputs = run_continuous_methods(config, train, tests, seed)
        else:
            train, tests = sample_discrete(config, scenario, replicate)
            outputs = run_discrete_methods(config, train, tests, seed)
        r, lg = _rows(outputs, tests, replicate, lam)
        rows += r
        logs += lg
    return rows, logs, skipped


def _csv_run(config):
    schema = PanelSchema.from_dict(config.schema)
    train, _ = load_panel_csv(config.train_csv, schema)
    test, _ = load_panel_csv(config.test_csv, schema, min_environments=1)
    seed = int(make_rng(config.seed, 0, 4).integers(2**31))
    if schema.mode == "continuous":
        tests = (TestEnv("test", test.X, test.y, U=test.U),)
        outputs = run_continuous_methods(config, train, tests, seed)
    else:
        tests = tuple(TestEnv(lab, X, y) for lab, X, y in test.groups())
        outputs = run_discrete_methods(config, train, tests, seed)
    rows, logs = _rows(outputs, tests, 0, None)
    return rows, logs, []


def run_experiment(config: ExperimentConfig) -> EvalReport:
    """Run all replicates and collect an :class:`EvalReport` (deterministic given the config)."""
    if config.kind == "csv_panel":
        results = [_csv_run(config)]
    elif config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(run_replicate, [config] * config.replicates, range(config.replicates)))
    else:
        results = [run_replicate(config, r) for r in range(config.replicates)]
    report = EvalReport(config=config.to_dict())
    for rows, logs, skipped in results:
        report.rows += rows
        report.logs += logs
        report.skipped += skipped
    return report
