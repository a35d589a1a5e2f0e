import numpy as np
import pytest

from btm.data import GenConfig, generate_synthetic_clinical
from btm.net import MlpSpec


def central_diff(f, x, h=1e-6):
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


@pytest.fixture(scope="session")
def small_ds():
    return generate_synthetic_clinical(GenConfig(n_samples=1200, n_features=6, prevalence=0.2, seed=3))


@pytest.fixture(scope="session")
def small_spec(small_ds):
    return MlpSpec.hidden(small_ds.n_features, [8])
