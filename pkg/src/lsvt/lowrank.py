"""SVD helpers and singular value thresholding."""

from dataclasses import dataclass

import numpy as np

from .errors import NumericError


@dataclass(frozen=True)
class SvdFactors:
    """Full SVD of a square matrix: X = U @ diag(sigma) @ V.T, sigma nonincreasing."""

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.sigma) @ self.V.T


def svd(X: np.ndarray) -> SvdFactors:
    """Full SVD of one square matrix; rejects non-finite input."""
    if X.ndim != 2 or X.shape[0] != X.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise NumericError("non-finite entries in SVD input")
    U, s, Vh = np.linalg.svd(X)
    return SvdFactors(U=U, sigma=s, V=Vh.T)


def nuclear_norm(X: np.ndarray) -> float:
    """Sum of singular values."""
    return float(np.linalg.svd(X, compute_uv=False).sum())


def svt_operator(X: np.ndarray, tau: float) -> tuple[np.ndarray, SvdFactors]:
    """Soft-threshold the singular values of X at level tau >= 0.

    Returns the shrunk matrix U @ diag(max(sigma - tau, 0)) @ V.T together
    with the SVD factors of the input.  This is the proximal operator of
    tau * nuclear_norm at X: it minimizes tau*||Y||_* + 0.5*||Y - X||_F^2.
    """
    if tau < 0:
        raise ValueError(f"tau must be nonnegative, got {tau}")
    f = svd(X)
    shrunk = np.maximum(f.sigma - tau, 0.0)
    return (f.U * shrunk) @ f.V.T, f


def soft_threshold_stacked(
    Z: np.ndarray, tau: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Threshold a stack (N, d, d); returns (X, U, sigma, Vh) with X stacked.

    The SVD factors are returned so callers can reuse them (the backward pass
    through the thresholding needs them).
    """
    U, s, Vh = np.linalg.svd(Z)
    h = np.maximum(s - tau, 0.0)
    X = (U * h[:, None, :]) @ Vh
    return X, U, s, Vh
