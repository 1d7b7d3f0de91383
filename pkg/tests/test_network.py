import numpy as np
import pytest

from lsvt import (
    NumericError,
    accumulate,
    backward,
    backward_batch,
    default_config,
    forward,
    forward_batch,
    generate_operator,
    mse_loss,
    svt_init,
    svt_operator,
    svt_solve_batch,
)
from lsvt.network import ThetaGrad, flatten_params, unflatten_like
from conftest import fd_gradient, random_lowrank_batch


def jittered_theta(op, n_layers, rng):
    """Move off the symmetric initialization so tests probe a generic point."""
    theta = svt_init(op, n_layers)
    theta.W += 0.02 * rng.standard_normal(theta.W.shape)
    theta.delta *= rng.uniform(0.8, 1.2, theta.delta.shape)
    theta.tau *= rng.uniform(0.8, 1.2, theta.tau.shape)
    return theta


def test_svt_init_structure():
    op = generate_operator(6, 14, seed=0)
    theta = svt_init(op, 4)
    assert theta.num_layers == 4 and theta.num_hidden == 3
    assert theta.W.shape == (4, 14, 36)
    for t in range(4):
        assert np.array_equal(theta.W[t], op.W)
    assert np.allclose(theta.tau, 30.0)
    assert np.allclose(theta.delta, 1.2 * 36 / 14)
    single = svt_init(op, 1)
    assert single.num_hidden == 0
    with pytest.raises(ValueError):
        svt_init(op, 0)
    with pytest.raises(ValueError):
        svt_init(op, 2, tau=-1.0)


@pytest.mark.parametrize("n_layers", [1, 2, 3, 4])
def test_initialized_network_equals_solver(rng, n_layers):
    op = generate_operator(6, 18, seed=1)
    _, B = random_lowrank_batch(rng, op, r=1, n=10)
    X_net, _ = forward_batch(svt_init(op, n_layers), B)
    X_solver, fail_iter = svt_solve_batch(op, B, default_config(6, 18, n_layers))
    assert (fail_iter == -1).all()
    assert np.abs(X_net - X_solver).max() < 1e-12


def test_forward_zero_measurements():
    op = generate_operator(5, 10, seed=2)
    theta = svt_init(op, 3)
    X, tape = forward(theta, np.zeros(op.m))
    assert np.array_equal(X, np.zeros((5, 5)))
    assert tape.batch_size == 1 and tape.fail_layer[0] == -1


def test_output_layer_only(rng):
    # H = 0: the network is a single thresholded back-projection of delta0*b
    op = generate_operator(5, 12, seed=3)
    theta = jittered_theta(op, 1, rng)
    _, B = random_lowrank_batch(rng, op, r=1, n=1)
    X, _ = forward(theta, B[0])
    Z = (theta.delta[0] * B[0] @ theta.W[0]).reshape(5, 5).T
    expected, _ = svt_operator(Z, theta.tau[0])
    assert np.allclose(X, expected, atol=1e-12)


def test_mse_loss_values(rng):
    X = rng.standard_normal((3, 4, 4))
    assert mse_loss(X, X) == 0.0
    Y = X.copy()
    Y[1, 2, 3] += 2.0
    assert np.isclose(mse_loss(X, Y), 4.0 / 3.0)
    A = np.zeros((2, 2, 2))
    B = np.zeros((2, 2, 2))
    B[0, 0, 0] = 1.0  # per-instance errors 1 and 3, mean 2
    B[1] = np.sqrt(3.0) / 2.0
    assert np.isclose(mse_loss(A, B), 2.0)
    with pytest.raises(ValueError):
        mse_loss(X, rng.standard_normal((3, 4, 5)))
    with pytest.raises(ValueError):
        mse_loss(np.zeros((0, 2, 2)), np.zeros((0, 2, 2)))


@pytest.mark.parametrize("n_layers", [2, 3])
def test_gradient_matches_finite_differences(rng, n_layers):
    op = generate_operator(4, 8, seed=4)
    theta = jittered_theta(op, n_layers, rng)
    X_true, B = random_lowrank_batch(rng, op, r=1, n=3)
    X_out, tape = forward_batch(theta, B)
    g = backward_batch(theta, tape, X_true)
    gvec = np.concatenate([g.W.ravel(), g.delta, g.tau])

    nw = theta.W.size
    idx = list(rng.choice(nw, size=30, replace=False)) + list(range(nw, gvec.size))
    fd = fd_gradient(theta, B, X_true, idx)
    for j, i in enumerate(idx):
        if abs(fd[j]) <= 1e-8:
            assert abs(gvec[i] - fd[j]) < 1e-8
        else:
            assert abs(gvec[i] - fd[j]) / abs(fd[j]) < 1e-5


def test_tau_gradient_inactive_above_spectrum(rng):
    op = generate_operator(4, 8, seed=5)
    theta = svt_init(op, 2)
    theta.tau[1] = 1e6  # output layer thresholds everything away
    X_true, B = random_lowrank_batch(rng, op, r=1, n=2)
    X_out, tape = forward_batch(theta, B)
    assert np.array_equal(X_out, np.zeros_like(X_out))
    g = backward_batch(theta, tape, X_true)
    assert g.tau[1] == 0.0
    assert np.array_equal(g.W[1], np.zeros_like(g.W[1]))


def test_zero_gradient_at_perfect_fit():
    op = generate_operator(4, 8, seed=6)
    theta = svt_init(op, 3)
    B = np.zeros((2, op.m))
    X_true = np.zeros((2, 4, 4))
    _, tape = forward_batch(theta, B)
    g = backward_batch(theta, tape, X_true)
    assert np.array_equal(g.W, np.zeros_like(g.W))
    assert np.array_equal(g.delta, np.zeros_like(g.delta))
    assert np.array_equal(g.tau, np.zeros_like(g.tau))


def test_batch_gradient_equals_accumulated_singles(rng):
    op = generate_operator(4, 8, seed=7)
    theta = jittered_theta(op, 3, rng)
    X_true, B = random_lowrank_batch(rng, op, r=1, n=5)
    _, tape = forward_batch(theta, B)
    g_batch = backward_batch(theta, tape, X_true)

    singles = []
    for i in range(5):
        _, tape_i = forward(theta, B[i])
        singles.append(backward(theta, tape_i, X_true[i]))
    g_acc = accumulate(singles)
    assert np.allclose(g_batch.W, g_acc.W, atol=1e-12)
    assert np.allclose(g_batch.delta, g_acc.delta, atol=1e-12)
    assert np.allclose(g_batch.tau, g_acc.tau, atol=1e-12)


def test_forward_deterministic(rng):
    op = generate_operator(5, 15, seed=8)
    theta = jittered_theta(op, 3, rng)
    _, B = random_lowrank_batch(rng, op, r=2, n=4)
    X1, _ = forward_batch(theta, B)
    X2, _ = forward_batch(theta, B)
    assert np.array_equal(X1, X2)


def test_divergence_reports_layer(rng):
    op = generate_operator(4, 8, seed=9)
    theta = svt_init(op, 3, delta=1e120)
    _, B = random_lowrank_batch(rng, op, r=1, n=2)
    with pytest.raises(NumericError) as err:
        forward_batch(theta, B)
    assert err.value.step is not None and err.value.step >= 1

    X, tape = forward_batch(theta, B, check_finite=False)
    assert (tape.fail_layer >= 1).all()
    assert np.isnan(X).all()
    with pytest.raises(NumericError):
        backward_batch(theta, tape, np.zeros((2, 4, 4)))


def test_input_validation(rng):
    op = generate_operator(4, 8, seed=10)
    theta = svt_init(op, 2)
    with pytest.raises(ValueError):
        forward(theta, np.zeros(7))
    bad = np.zeros((2, 8))
    bad[0, 0] = np.inf
    with pytest.raises(ValueError):
        forward_batch(theta, bad)
    _, tape = forward_batch(theta, np.zeros((2, 8)))
    with pytest.raises(ValueError):
        backward_batch(theta, tape, np.zeros((3, 4, 4)))


def test_accumulate_means_gradients():
    a = ThetaGrad(W=np.ones((2, 3, 4)), delta=np.array([1.0, 2.0]), tau=np.array([0.0, 4.0]))
    b = ThetaGrad(W=3 * np.ones((2, 3, 4)), delta=np.array([3.0, 2.0]), tau=np.array([2.0, 0.0]))
    mean = accumulate([a, b])
    assert np.array_equal(mean.W, 2 * np.ones((2, 3, 4)))
    assert np.array_equal(mean.delta, np.array([2.0, 2.0]))
    assert np.array_equal(mean.tau, np.array([1.0, 2.0]))
    single = accumulate([a])
    assert np.array_equal(single.W, a.W)
    with pytest.raises(ValueError):
        accumulate([])


def test_flatten_roundtrip(rng):
    op = generate_operator(4, 8, seed=11)
    theta = jittered_theta(op, 2, rng)
    vec = flatten_params(theta)
    back = unflatten_like(vec, theta)
    assert np.array_equal(back.W, theta.W)
    assert np.array_equal(back.delta, theta.delta)
    assert np.array_equal(back.tau, theta.tau)
    with pytest.raises(ValueError):
        unflatten_like(vec[:-1], theta)
