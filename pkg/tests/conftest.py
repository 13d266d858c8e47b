import numpy as np
import pytest

from lpcr.model import Dataset
from lpcr.simulation import gen_dataset, gen_true_params


def centered(Y, X):
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(X, dtype=float)
    return Dataset(Y - Y.mean(axis=0), X - X.mean(axis=0))


def random_data(n, p, r, seed, k_true=2, d_star=3.0):
    truth = gen_true_params(p, min(k_true, p), r, d_star=d_star, seed=seed)
    raw = gen_dataset(truth, n, seed=seed + 10_000)
    return centered(raw.Y, raw.X)


def random_echelon(p, k, rng):
    return np.tril(rng.standard_normal((p, k)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# acceptance criteria report: one line per criterion at the end of the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
