import numpy as np
import pytest
from hypothesis import settings

from lsvt import generate_operator
from lsvt.network import flatten_params, forward_batch, mse_loss, unflatten_like

settings.register_profile("suite", deadline=None, max_examples=25)
settings.load_profile("suite")


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture(scope="session")
def small_op():
    return generate_operator(d=4, m=8, seed=11)


def random_lowrank_batch(rng, op, r, n, variance=2.0):
    """Stack of rank-r ground truths with their measurements."""
    std = np.sqrt(variance)
    P = rng.normal(0.0, std, (n, op.d, r))
    Q = rng.normal(0.0, std, (n, r, op.d))
    X = P @ Q
    return X, op.apply_batch(X)


def fd_gradient(theta, B, X_true, indices, h=1e-6):
    """Central-difference gradient of the batch loss over flattened parameters."""
    v0 = flatten_params(theta)

    def loss(vec):
        th = unflatten_like(vec, theta)
        X_out, _ = forward_batch(th, B)
        return mse_loss(X_true, X_out)

    out = np.zeros(len(indices))
    for j, i in enumerate(indices):
        vp = v0.copy()
        vp[i] += h
        vm = v0.copy()
        vm[i] -= h
        out[j] = (loss(vp) - loss(vm)) / (2.0 * h)
    return out
