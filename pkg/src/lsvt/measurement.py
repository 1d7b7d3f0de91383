"""Linear measurement operators with orthonormal rows.

A measurement operator maps a square matrix X to m scalar measurements
b_i = tr(A_i X), where the sensing matrices A_i are stored as the rows of a
single m-by-d^2 matrix W.  Row i of W is the row-major vectorization of A_i,
so the forward map is W @ vec(X^T) and the adjoint sends y to sum_i y_i A_i^T.
Rows of W are orthonormal (W W^T = I), which makes apply(adjoint(y)) == y.

All vectorizations in the package are row-major (C order).
"""

from dataclasses import dataclass

import numpy as np

VEC_CONVENTION = "row-major"


def apply_stacked(W: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Measure a stack of matrices: (N, d, d) -> (N, m)."""
    n, d, _ = X.shape
    return X.transpose(0, 2, 1).reshape(n, d * d) @ W.T


def adjoint_stacked(W: np.ndarray, Y: np.ndarray, d: int) -> np.ndarray:
    """Back-project a stack of measurement vectors: (N, m) -> (N, d, d)."""
    n = Y.shape[0]
    return (Y @ W).reshape(n, d, d).transpose(0, 2, 1)


@dataclass(frozen=True)
class MeasurementOperator:
    """Immutable sensing operator; ``W`` has shape (m, d*d) with orthonormal rows."""

    W: np.ndarray
    d: int

    def __post_init__(self):
        if self.W.ndim != 2:
            raise ValueError(f"W must be 2-d, got shape {self.W.shape}")
        m, n = self.W.shape
        if n != self.d * self.d:
            raise ValueError(f"W has {n} columns, expected d*d = {self.d * self.d}")
        if m > n:
            raise ValueError(f"m = {m} measurement rows exceed d*d = {n}")
        self.W.setflags(write=False)

    @property
    def m(self) -> int:
        return self.W.shape[0]

    def matrix(self, i: int) -> np.ndarray:
        """The i-th sensing matrix A_i, so that apply(X)[i] == tr(A_i @ X)."""
        return self.W[i].reshape(self.d, self.d)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Measurements of one matrix: (d, d) -> (m,)."""
        if X.shape != (self.d, self.d):
            raise ValueError(f"X has shape {X.shape}, expected {(self.d, self.d)}")
        return apply_stacked(self.W, X[None])[0]

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        """Adjoint of ``apply``: (m,) -> (d, d), equal to sum_i y_i A_i^T."""
        if y.shape != (self.m,):
            raise ValueError(f"y has shape {y.shape}, expected {(self.m,)}")
        return adjoint_stacked(self.W, y[None], self.d)[0]

    def apply_batch(self, X: np.ndarray) -> np.ndarray:
        if X.ndim != 3 or X.shape[1:] != (self.d, self.d):
            raise ValueError(f"X has shape {X.shape}, expected (N, {self.d}, {self.d})")
        return apply_stacked(self.W, X)

    def adjoint_batch(self, Y: np.ndarray) -> np.ndarray:
        if Y.ndim != 2 or Y.shape[1] != self.m:
            raise ValueError(f"Y has shape {Y.shape}, expected (N, {self.m})")
        return adjoint_stacked(self.W, Y, self.d)

    def orthonormality_defect(self) -> float:
        """max-norm of W W^T - I; near machine precision for generated operators."""
        gram = self.W @ self.W.T
        return float(np.abs(gram - np.eye(self.m)).max())


def generate_operator(d: int, m: int, seed) -> MeasurementOperator:
    """Draw a random operator with orthonormal rows.

    The rows span a uniformly random m-dimensional subspace of R^(d^2),
    obtained by QR-orthonormalizing an iid standard Gaussian draw.  Requires
    m <= d^2.  Deterministic in ``seed`` (anything accepted by
    ``np.random.default_rng``).
    """
    if d < 1:
        raise ValueError(f"d must be positive, got {d}")
    if not 1 <= m <= d * d:
        raise ValueError(f"m must be in [1, d*d] = [1, {d * d}], got {m}")
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((m, d * d))
    Q, _ = np.linalg.qr(G.T)
    return MeasurementOperator(W=np.ascontiguousarray(Q.T), d=d)
