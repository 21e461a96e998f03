import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kfgn.network import NetworkSpec, init_params

settings.register_profile(
    "kfgn", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("kfgn")


def random_spd(rng, n, floor=0.1):
    A = rng.standard_normal((n, n))
    return A @ A.T + floor * np.eye(n)


def random_psd(rng, n, rank=None):
    A = rng.standard_normal((n, rank or n))
    return A @ A.T


def make_problem(sizes, transfer="tanh", loss="squared", N=3, seed=0, scale=1.0):
    """Spec, parameters, inputs and targets for a small random problem."""
    rng = np.random.default_rng(seed)
    spec = NetworkSpec(tuple(sizes), transfer, loss)
    params = init_params(spec, rng, scale)
    # non-zero biases so the bias column is actually exercised
    params = [W + np.hstack([np.zeros((W.shape[0], W.shape[1] - 1)), 0.1 * rng.standard_normal((W.shape[0], 1))]) for W in params]
    X = rng.uniform(-1, 1, size=(sizes[0], N))
    if loss == "squared":
        Y = rng.standard_normal((sizes[-1], N))
    elif loss == "bernoulli_xent":
        Y = rng.uniform(0, 1, size=(sizes[-1], N))
    else:
        Y = rng.integers(0, 2, size=(1, N)).astype(float)
    return spec, params, X, Y


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
