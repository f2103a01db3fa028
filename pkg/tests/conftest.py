import numpy as np
import pytest

from crcvoi.nathist import LifeTable, NaturalHistoryParams, bundled_life_table


@pytest.fixture(scope="session")
def life_table() -> LifeTable:
    return bundled_life_table()


@pytest.fixture(scope="session")
def truth() -> NaturalHistoryParams:
    return NaturalHistoryParams()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


def series_expm(q: np.ndarray, tol: float = 1e-20, max_terms: int = 400) -> np.ndarray:
    """Plain Taylor series for exp(Q) with no scaling; reference for small-norm matrices."""
    n = q.shape[0]
    out = np.eye(n)
    term = np.eye(n)
    for k in range(1, max_terms):
        term = term @ q / k
        out = out + term
        if np.max(np.abs(term)) < tol:
            return out
    raise AssertionError("series did not converge")


def random_intensity(rng: np.random.Generator, n: int = 9, scale: float = 0.5) -> np.ndarray:
    q = rng.uniform(0, scale, (n, n)) * (rng.random((n, n)) < 0.4)
    np.fill_diagonal(q, 0.0)
    np.fill_diagonal(q, -q.sum(axis=1))
    return q
