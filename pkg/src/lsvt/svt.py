"""Singular value thresholding solver for affine rank minimization.

Given measurements b = apply(op, X_true) of an unknown low-rank X_true, run
the dual-ascent iteration

    y_0 = 0
    repeat for k = 1..T:
        X_k = shrink(adjoint(op, y_{k-1}), tau)
        y_k = y_{k-1} + delta * (b - apply(op, X_k))

and return shrink(adjoint(op, y_T), tau), where shrink soft-thresholds
singular values at tau.  One solver iteration is one dual update; the
reconstruction reported for T iterations uses the dual variable after the
T-th update.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .lowrank import soft_threshold_stacked
from .measurement import MeasurementOperator

# Magnitude at which the dual iterate is declared divergent even though it is
# still finite; keeps later matrix products from overflowing inside LAPACK.
BLOWUP_LIMIT = 1e150


@dataclass(frozen=True)
class SvtConfig:
    """Solver hyperparameters: threshold tau, dual step delta, iteration count."""

    tau: float
    delta: float
    iterations: int

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.delta <= 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")


def default_config(d: int, m: int, iterations: int) -> SvtConfig:
    """Standard choice tau = 5*d and delta = 1.2 * d^2 / m."""
    return SvtConfig(tau=5.0 * d, delta=1.2 * d * d / m, iterations=iterations)


def svt_solve_batch(
    op: MeasurementOperator, B: np.ndarray, config: SvtConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Solve for a stack of measurement vectors B of shape (N, m).

    Returns ``(X, fail_iter)`` where X has shape (N, d, d) and fail_iter[n]
    is -1 for instances that stayed finite, else the 1-based iteration at
    which instance n diverged.  Divergent rows of X are NaN; no exception is
    raised, so sweeps over aggressive step sizes can report partial results.
    """
    if B.ndim != 2 or B.shape[1] != op.m:
        raise ValueError(f"B has shape {B.shape}, expected (N, {op.m})")
    n = B.shape[0]
    y = np.zeros_like(B)
    fail_iter = np.full(n, -1, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, config.iterations + 1):
            Z = op.adjoint_batch(y)
            X, _, _, _ = soft_threshold_stacked(Z, config.tau)
            y = y + config.delta * (B - op.apply_batch(X))
            bad = alive & ~(
                np.isfinite(y).all(axis=1) & (np.abs(y).max(axis=1) < BLOWUP_LIMIT)
            )
            if bad.any():
                fail_iter[bad] = k
                alive &= ~bad
            if not alive.all():
                # keep dead rows pinned at zero so they cannot re-grow through
                # the update and overflow inside the next SVD
                y = np.where(alive[:, None], y, 0.0)
    Z = op.adjoint_batch(y)
    X, _, _, _ = soft_threshold_stacked(Z, config.tau)
    X[~alive] = np.nan
    return X, fail_iter


def svt_solve(op: MeasurementOperator, b: np.ndarray, config: SvtConfig) -> np.ndarray:
    """Solve for a single measurement vector b of shape (m,).

    Raises NumericError (with the failing iteration index) if the dual
    iterate blows up.
    """
    if b.shape != (op.m,):
        raise ValueError(f"b has shape {b.shape}, expected {(op.m,)}")
    X, fail_iter = svt_solve_batch(op, b[None], config)
    if fail_iter[0] >= 0:
        raise NumericError(
            f"dual iterate diverged at iteration {fail_iter[0]}", step=int(fail_iter[0])
        )
    return X[0]
