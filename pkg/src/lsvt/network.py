"""Unrolled singular-value-thresholding network with trainable parameters.

The network mirrors a fixed number of solver iterations, but every layer owns
its parameters.  With H hidden layers and measurements b:

    y_0 = delta[0] * b
    for t = 1..H:
        Z_t = adjoint(W[t-1], y_{t-1})
        X_t = shrink(Z_t, tau[t-1])
        y_t = y_{t-1} + delta[t] * (b - apply(W[t-1], X_t))
    X_out = shrink(adjoint(W[H], y_H), tau[H])

where shrink soft-thresholds singular values.  ``svt_init`` sets every W[t]
to the sensing operator's matrix and all (tau, delta) to the solver defaults;
at that point a network with n_layers = T reproduces the T-iteration solver
output exactly, so training starts from the classic algorithm.

Gradients of the reconstruction loss with respect to all parameters are
computed by a hand-written reverse pass (``backward_batch``), including the
derivative through the SVD-based shrinkage.

Parameter indexing: hidden layer t (1-based) reads W[t-1], tau[t-1] and
delta[t]; the output layer reads W[H], tau[H]; delta[0] scales the
measurements into the initial dual variable.  Flattened parameter order is
W, then delta, then tau.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .lowrank import soft_threshold_stacked
from .measurement import MeasurementOperator, adjoint_stacked, apply_stacked
from .svt import BLOWUP_LIMIT

# Relative spectral-gap threshold below which pairwise inverse gaps in the
# shrinkage derivative are clamped instead of inverted.
GAP_FLOOR = 1e-9


@dataclass
class Theta:
    """Trainable parameters: W (H+1, m, d*d), delta (H+1,), tau (H+1,)."""

    W: np.ndarray
    delta: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        if self.W.ndim != 3:
            raise ValueError(f"W must be 3-d, got shape {self.W.shape}")
        layers = self.W.shape[0]
        if self.delta.shape != (layers,) or self.tau.shape != (layers,):
            raise ValueError(
                f"delta/tau shapes {self.delta.shape}/{self.tau.shape} do not "
                f"match {layers} weight slabs"
            )
        d = int(round(self.W.shape[2] ** 0.5))
        if d * d != self.W.shape[2]:
            raise ValueError(f"W trailing dim {self.W.shape[2]} is not a square")

    @property
    def num_hidden(self) -> int:
        return self.W.shape[0] - 1

    @property
    def num_layers(self) -> int:
        return self.W.shape[0]

    @property
    def m(self) -> int:
        return self.W.shape[1]

    @property
    def d(self) -> int:
        return int(round(self.W.shape[2] ** 0.5))

    def copy(self) -> "Theta":
        return Theta(W=self.W.copy(), delta=self.delta.copy(), tau=self.tau.copy())


@dataclass
class ThetaGrad:
    """Gradient container with the same array shapes as Theta."""

    W: np.ndarray
    delta: np.ndarray
    tau: np.ndarray

    @classmethod
    def zeros_like(cls, theta: Theta) -> "ThetaGrad":
        return cls(
            W=np.zeros_like(theta.W),
            delta=np.zeros_like(theta.delta),
            tau=np.zeros_like(theta.tau),
        )


def svt_init(
    op: MeasurementOperator,
    n_layers: int,
    tau: float | None = None,
    delta: float | None = None,
) -> Theta:
    """Parameters under which the network equals the n_layers-iteration solver.

    tau defaults to 5*d and delta to 1.2*d^2/m, matching the solver defaults;
    pass explicit values to start from a different solver configuration.
    """
    if n_layers < 1:
        raise ValueError(f"n_layers must be >= 1, got {n_layers}")
    d, m = op.d, op.m
    tau_val = 5.0 * d if tau is None else float(tau)
    delta_val = 1.2 * d * d / m if delta is None else float(delta)
    if tau_val <= 0 or delta_val <= 0:
        raise ValueError(f"tau and delta must be positive, got {tau_val}, {delta_val}")
    return Theta(
        W=np.tile(op.W, (n_layers, 1, 1)),
        delta=np.full(n_layers, delta_val),
        tau=np.full(n_layers, tau_val),
    )


def flatten_params(theta: Theta) -> np.ndarray:
    """Concatenate all parameters into one vector (order: W, delta, tau)."""
    return np.concatenate([theta.W.ravel(), theta.delta, theta.tau])


def unflatten_like(vec: np.ndarray, theta: Theta) -> Theta:
    """Inverse of ``flatten_params`` for parameters shaped like ``theta``."""
    nw = theta.W.size
    nd = theta.delta.size
    if vec.shape != (nw + 2 * nd,):
        raise ValueError(f"vector has shape {vec.shape}, expected ({nw + 2 * nd},)")
    return Theta(
        W=vec[:nw].reshape(theta.W.shape).copy(),
        delta=vec[nw : nw + nd].copy(),
        tau=vec[nw + nd :].copy(),
    )


@dataclass
class ForwardTape:
    """Intermediates of one forward pass, consumed by ``backward_batch``.

    Lists are indexed by layer: entries 0..H-1 belong to the hidden layers,
    entry H to the output layer.  ``y`` holds the dual variables y_0..y_H.
    ``X`` holds the thresholded matrices X_1..X_H and finally X_out.
    ``fail_layer[n]`` is -1 if instance n stayed finite, else the 1-based
    layer at which its dual variable blew up (rows of X_out are NaN then).
    """

    b: np.ndarray
    y: list
    Z: list
    U: list
    sigma: list
    Vh: list
    X: list
    resid: list
    fail_layer: np.ndarray

    @property
    def X_out(self) -> np.ndarray:
        return self.X[-1]

    @property
    def batch_size(self) -> int:
        return self.b.shape[0]


def _vec_t(X: np.ndarray) -> np.ndarray:
    # Row-major vectorization of each transposed matrix in the stack; this is
    # the coordinate system in which apply/adjoint are plain matmuls by W.
    n, d, _ = X.shape
    return X.transpose(0, 2, 1).reshape(n, d * d)


def _rows_ok(y: np.ndarray) -> np.ndarray:
    return np.isfinite(y).all(axis=1) & (np.abs(y).max(axis=1) < BLOWUP_LIMIT)


def forward_batch(
    theta: Theta, B: np.ndarray, check_finite: bool = True
) -> tuple[np.ndarray, ForwardTape]:
    """Run the network on a stack of measurement vectors B of shape (N, m).

    Returns (X_out, tape) with X_out of shape (N, d, d).  If an instance's
    dual variable blows up, its row of X_out is NaN and the failure is
    recorded in ``tape.fail_layer``; with check_finite=True (the default) a
    NumericError is raised instead of returning.
    """
    if B.ndim != 2 or B.shape[1] != theta.m:
        raise ValueError(f"B has shape {B.shape}, expected (N, {theta.m})")
    if not np.isfinite(B).all():
        raise ValueError("non-finite measurements")
    d = theta.d
    H = theta.num_hidden
    n = B.shape[0]
    fail_layer = np.full(n, -1, dtype=np.int64)
    alive = np.ones(n, dtype=bool)

    y = theta.delta[0] * B
    ys = [y]
    Zs, Us, sigmas, Vhs, Xs, resids = [], [], [], [], [], []
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(1, H + 1):
            Wt = theta.W[t - 1]
            Z = adjoint_stacked(Wt, y, d)
            X, U, s, Vh = soft_threshold_stacked(Z, theta.tau[t - 1])
            r = B - apply_stacked(Wt, X)
            y = y + theta.delta[t] * r
            bad = alive & ~_rows_ok(y)
            if bad.any():
                fail_layer[bad] = t
                alive &= ~bad
            if not alive.all():
                # dead rows stay pinned at zero; otherwise the update re-grows
                # them and they overflow inside the next SVD
                y = np.where(alive[:, None], y, 0.0)
            Zs.append(Z)
            Us.append(U)
            sigmas.append(s)
            Vhs.append(Vh)
            Xs.append(X)
            resids.append(r)
            ys.append(y)
    Z = adjoint_stacked(theta.W[H], y, d)
    X_out, U, s, Vh = soft_threshold_stacked(Z, theta.tau[H])
    Zs.append(Z)
    Us.append(U)
    sigmas.append(s)
    Vhs.append(Vh)
    if not alive.all():
        X_out = X_out.copy()
        X_out[~alive] = np.nan
    Xs.append(X_out)

    if check_finite and not alive.all():
        first = int(fail_layer[fail_layer >= 0].min())
        raise NumericError(f"dual variable diverged at layer {first}", step=first)
    tape = ForwardTape(
        b=B, y=ys, Z=Zs, U=Us, sigma=sigmas, Vh=Vhs, X=Xs, resid=resids,
        fail_layer=fail_layer,
    )
    return X_out, tape


def forward(theta: Theta, b: np.ndarray) -> tuple[np.ndarray, ForwardTape]:
    """Run the network on one measurement vector b of shape (m,)."""
    if b.shape != (theta.m,):
        raise ValueError(f"b has shape {b.shape}, expected {(theta.m,)}")
    X, tape = forward_batch(theta, b[None])
    return X[0], tape


def mse_loss(X_true: np.ndarray, X_pred: np.ndarray) -> float:
    """Mean over the batch of squared Frobenius reconstruction error."""
    if X_true.shape != X_pred.shape or X_true.ndim != 3:
        raise ValueError(
            f"shape mismatch: {X_true.shape} vs {X_pred.shape} (expected (N, d, d))"
        )
    if X_true.shape[0] == 0:
        raise ValueError("empty batch")
    diff = X_pred - X_true
    return float(np.mean(np.sum(diff * diff, axis=(1, 2))))


def _threshold_backward(
    G: np.ndarray, U: np.ndarray, s: np.ndarray, Vh: np.ndarray, tau: float
) -> tuple[np.ndarray, np.ndarray]:
    """Reverse through Y = U @ diag(max(s - tau, 0)) @ Vh.

    Given dL/dY for a stack, returns (dL/dZ, per-instance dL/dtau) where Z is
    the matrix that was decomposed.  Uses the first-order perturbation of the
    SVD; pairwise inverse spectral gaps are clamped once the gap falls below
    GAP_FLOOR relative to sigma_1^2, and the threshold derivative is taken as
    zero on the inactive side at a crossing.
    """
    h = np.maximum(s - tau, 0.0)
    active = s > tau
    Ut = U.transpose(0, 2, 1)
    V = Vh.transpose(0, 2, 1)
    Gt = Ut @ G @ V

    s2 = s * s
    diff = s2[:, :, None] - s2[:, None, :]
    eps = GAP_FLOOR * s2[:, 0][:, None, None] + np.finfo(np.float64).tiny
    inv = 1.0 / np.where(np.abs(diff) < eps, np.copysign(eps, diff), diff)
    sh = s * h
    gamma = (sh[:, :, None] - sh[:, None, :]) * inv
    mix = (h[:, :, None] * s[:, None, :] - s[:, :, None] * h[:, None, :]) * inv
    core = gamma * Gt + mix * Gt.transpose(0, 2, 1)
    ii = np.arange(s.shape[1])
    diag_g = np.where(active, Gt[:, ii, ii], 0.0)
    core[:, ii, ii] = diag_g
    return U @ core @ Vh, -diag_g.sum(axis=1)


def backward_batch(theta: Theta, tape: ForwardTape, X_true: np.ndarray) -> ThetaGrad:
    """Gradient of mse_loss(X_true, X_out) with respect to all parameters.

    The returned gradient is the mean over the batch recorded in ``tape``.
    Refuses tapes containing diverged instances.
    """
    if (tape.fail_layer >= 0).any():
        first = int(tape.fail_layer[tape.fail_layer >= 0].min())
        raise NumericError(
            f"cannot differentiate a diverged forward pass (layer {first})",
            step=first,
        )
    if X_true.shape != tape.X_out.shape:
        raise ValueError(
            f"X_true has shape {X_true.shape}, expected {tape.X_out.shape}"
        )
    if not np.isfinite(X_true).all():
        raise ValueError("non-finite targets")
    n = tape.batch_size
    H = theta.num_hidden
    d = theta.d
    grad = ThetaGrad.zeros_like(theta)

    G = 2.0 * (tape.X_out - X_true)
    Gz, dtau = _threshold_backward(G, tape.U[H], tape.sigma[H], tape.Vh[H], theta.tau[H])
    grad.tau[H] = dtau.mean()
    grad.W[H] = tape.y[H].T @ _vec_t(Gz) / n
    q = apply_stacked(theta.W[H], Gz)

    for t in range(H, 0, -1):
        grad.delta[t] = (q * tape.resid[t - 1]).sum(axis=1).mean()
        Gx = -theta.delta[t] * adjoint_stacked(theta.W[t - 1], q, d)
        Gz, dtau = _threshold_backward(
            Gx, tape.U[t - 1], tape.sigma[t - 1], tape.Vh[t - 1], theta.tau[t - 1]
        )
        grad.tau[t - 1] = dtau.mean()
        grad.W[t - 1] = (
            tape.y[t - 1].T @ _vec_t(Gz) - theta.delta[t] * (q.T @ _vec_t(tape.X[t - 1]))
        ) / n
        q = q + apply_stacked(theta.W[t - 1], Gz)

    grad.delta[0] = (q * tape.b).sum(axis=1).mean()
    return grad


def backward(theta: Theta, tape: ForwardTape, X_true: np.ndarray) -> ThetaGrad:
    """Per-instance gradient for a tape produced by ``forward``."""
    if tape.batch_size != 1:
        raise ValueError(f"expected a single-instance tape, got {tape.batch_size}")
    if X_true.shape != (theta.d, theta.d):
        raise ValueError(f"X_true has shape {X_true.shape}, expected {(theta.d, theta.d)}")
    return backward_batch(theta, tape, X_true[None])


def accumulate(grads) -> ThetaGrad:
    """Elementwise mean of per-instance gradients."""
    grads = list(grads)
    if not grads:
        raise ValueError("no gradients to accumulate")
    return ThetaGrad(
        W=np.mean([g.W for g in grads], axis=0),
        delta=np.mean([g.delta for g in grads], axis=0),
        tau=np.mean([g.tau for g in grads], axis=0),
    )
