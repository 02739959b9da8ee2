import numpy as np
import pytest

from sparseinv.energy import Dictionary, SparseCodingProblem, normalize_columns


def random_dictionary(rng, d, m, nonneg=False):
    data = rng.standard_normal((d, m))
    if nonneg:
        data = np.abs(data)
    return Dictionary(normalize_columns(data), nonneg=nonneg)


def random_lasso(rng, max_rows=32, max_cols=64, noise=0.1):
    d = int(rng.integers(8, max_rows + 1))
    m = int(rng.integers(d, max_cols + 1))
    W = random_dictionary(rng, d, m)
    z_true = np.zeros(m)
    support = rng.choice(m, size=max(1, m // 8), replace=False)
    z_true[support] = rng.standard_normal(support.size)
    x = W.data @ z_true + noise * rng.standard_normal(d)
    alpha = float(0.2 * np.abs(W.data.T @ x).max())
    return SparseCodingProblem(W, x, alpha)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
