import numpy as np
import pytest

from zogp.harness import ExperimentConfig, build_chain_ocp, excited_state


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def chain3():
    """Excited three-mass chain OCP without GP data."""
    cfg = ExperimentConfig()
    return cfg, build_chain_ocp(cfg, 3, None, excited_state(cfg, 3))


def central_diff(fn, x, h=1e-6):
    """Column-wise central differences of a vector function."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(fn(x))
    jac = np.zeros((f0.size, x.size))
    for k in range(x.size):
        hk = h * max(1.0, abs(x[k]))
        xp, xm = x.copy(), x.copy()
        xp[k] += hk
        xm[k] -= hk
        jac[:, k] = (np.atleast_1d(fn(xp)) - np.atleast_1d(fn(xm))) / (2 * hk)
    return jac
