import numpy as np
import pytest

from obsstudy.dataset import from_arrays


def make_si_data(n=600, seed=0, weights=None):
    """Ignorable assignment: T depends on z only; y linear in x."""
    rng = np.random.default_rng(seed)
    x1 = rng.normal(size=n)
    x2 = rng.normal(size=n)
    b = (rng.random(n) < 0.5).astype(float)
    s = rng.normal(size=n)
    t = (rng.random(n) < 1 / (1 + np.exp(-(0.2 + 0.6 * x1 + 0.5 * b + 0.8 * s)))).astype(int)
    y = np.where(t == 1, 1.0 + 0.5 * x1 + 0.3 * x2 + 0.4 * b, 0.5 + 0.4 * x1 + 0.5 * x2 - 0.2 * b)
    y = y + rng.normal(size=n)
    w = None if weights is None else weights(rng, n)
    return from_arrays(y, t, {"x1": x1, "x2": x2, "b": b, "s": s}, ["x1", "x2", "b"],
                       ["x1", "b", "s"], w=w)


@pytest.fixture
def si_data():
    return make_si_data()


@pytest.fixture
def weighted_si_data():
    return make_si_data(weights=lambda rng, n: rng.uniform(0.5, 3.0, n))
