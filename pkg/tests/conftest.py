import numpy as np
import pytest

# Empirical null correlation of the four-test battery from a large
# reference trial (entries as published for that design; slightly
# indefinite from rounding, exercised as the regularization case).
EMPIRICAL_NULL_CORR = np.array([
    [1.000, 0.864, 0.913, 0.940],
    [0.864, 1.000, 0.583, 0.892],
    [0.913, 0.583, 1.000, 0.792],
    [0.940, 0.892, 0.793, 1.000],
])
EMPIRICAL_NULL_CORR = (EMPIRICAL_NULL_CORR + EMPIRICAL_NULL_CORR.T) / 2.0

# A strictly positive-definite matrix with a comparable correlation
# profile, for tests that want the fast well-conditioned path.
CLEAN_CORR = np.array([
    [1.00, 0.85, 0.90, 0.93],
    [0.85, 1.00, 0.60, 0.89],
    [0.90, 0.60, 1.00, 0.80],
    [0.93, 0.89, 0.80, 1.00],
])
CLEAN_CORR = (CLEAN_CORR + CLEAN_CORR.T) / 2.0


def random_correlation(k, seed):
    g = np.random.default_rng(seed)
    a = g.standard_normal((k, k + 3))
    c = a @ a.T
    d = np.sqrt(np.diag(c))
    return c / np.outer(d, d)


@pytest.fixture
def null_corr():
    return EMPIRICAL_NULL_CORR.copy()


@pytest.fixture
def clean_corr():
    return CLEAN_CORR.copy()
