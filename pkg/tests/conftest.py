"""Shared fixtures and data builders."""

import numpy as np
import pytest

from implab import scm as S
from implab.panel import PanelDataset


def toy_env(a):
    """Environment of the three-predictor toy model with ``Y``'s coefficient on ``X0`` equal to ``a``."""
    return S.InterventionSpec(a, (S.Edit(S.Y, S.COEFFICIENT, float(a) - 1.0, source=0),)) if a != 1 else \
        S.InterventionSpec(a, ())


def toy_panel(n, seed, a_values=(1.0, 2.0)):
    """Pooled toy panel with one environment per value of ``a``."""
    model = S.toy_scm(1.0)
    groups = []
    for i, a in enumerate(a_values):
        rows = S.sample(model, toy_env(a), n, seed=np.random.default_rng([seed, i]))
        groups.append((rows[:, :-1], rows[:, -1]))
    return PanelDataset.from_groups(groups, labels=[f"a={a}" for a in a_values])


def brute_force_covariance(model):
    """Covariance of ``(X, Y)`` from the finite series ``M = sum_k A^k``.

    ``A`` is nilpotent for acyclic models, so the series stops after
    ``d + 1`` terms and no linear solve is involved.
    """
    A = model.joint_matrix()
    M = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for _ in range(A.shape[0]):
        term = term @ A
        M = M + term
    assert np.allclose(term, 0.0)
    return (M * model.noise_var()) @ M.T


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def toy_continuous(n, seed, amplitude=2.0, frequency=1.0, u_range=(0.0, 1.0)):
    """Toy model with ``Y``'s coefficient on ``X0`` equal to ``1 + amplitude sin(2 pi frequency U)``."""
    from implab.panel import ContinuousData

    rng = np.random.default_rng(seed)
    U = rng.uniform(*u_range, n)
    edits = (S.Edit(S.Y, S.COEFFICIENT, S.Sine(amplitude, frequency), source=0),)
    rows = S.sample_continuous(S.toy_scm(1.0), edits, U, seed=rng)
    return ContinuousData(U, rows[:, :-1], rows[:, -1], ("X0", "X1", "X2"))


ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    """Store and print the one-line verdict of an acceptance criterion."""
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
