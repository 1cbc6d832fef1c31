import numpy as np
import pytest

from svaro.lattice import build_lattice
from svaro.model import Dataset, Hyperparams, ModelState

_ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record a one-line acceptance verdict shown in the terminal summary."""
    def _add(number, passed, detail):
        _ACCEPTANCE_LINES.append((number, f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"))
        return passed
    return _add


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def make_dataset(dims=(2, 2), T=30, P=2, K=2, seed=0, mask=None):
    rng = np.random.default_rng(seed)
    graph = build_lattice(dims, mask)
    X = np.column_stack([rng.standard_normal(T)] + [np.ones(T)] * (K > 1)
                        + [rng.standard_normal(T) for _ in range(K - 2)])
    Y = rng.standard_normal((T, graph.n_voxels)) + 2.0
    return Dataset(Y=Y, X_full=X, graph=graph, P=P)


def make_state(dataset, seed=1, gamma=None):
    rng = np.random.default_rng(seed)
    K, N, P = dataset.K, dataset.N, dataset.P
    G = rng.integers(0, 2, (P, N)).astype(np.int8) if gamma is None else np.asarray(gamma, np.int8)
    return ModelState(
        W=rng.standard_normal((K, N)),
        A=0.2 * rng.standard_normal((P, N)),
        Gamma=G,
        alpha=rng.uniform(0.5, 2.0, K),
        tau=rng.uniform(5.0, 30.0, P),
        lam=rng.uniform(0.5, 2.0, N),
    )


@pytest.fixture
def small():
    ds = make_dataset()
    hyper = Hyperparams.default(ds.P, epsilon=50.0)
    return ds, hyper, make_state(ds)
