"""CP factor representation of the unknown image.

An image W is approximated by W ~ W1 @ W2.T = sum_r w1^(r) o w2^(r) with
W1, W2 of shape (K, R). This module composes factors, linearizes the forward
model in one factor (the design matrices of the ALS half-steps) and reports
ranks and parameter counts.

Factor vectorization is column-first by rank block: vec(W_d) holds all K
entries of column r = 0, then r = 1, and so on. assemble_design addresses
columns the same way.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from tomography.lib.errors import ConfigError, DimensionMismatchError
from tomography.lib.radon_geometry import Image, SparseSystemTensor


@dataclass(frozen=True, eq=False)
class CPFactorPair:
    """Factor matrices (W1, W2), each K x R."""

    W1: np.ndarray
    W2: np.ndarray

    def __post_init__(self):
        W1 = np.array(self.W1, dtype=float)
        W2 = np.array(self.W2, dtype=float)
        if W1.ndim != 2 or W2.ndim != 2:
            raise DimensionMismatchError("CP factors must be 2-D matrices")
        if W1.shape != W2.shape:
            raise DimensionMismatchError(
                f"CP factors disagree in shape: {W1.shape} vs {W2.shape}"
            )
        if W1.shape[1] < 1:
            raise ConfigError("CP rank must be at least 1")
        if not (np.all(np.isfinite(W1)) and np.all(np.isfinite(W2))):
            raise ConfigError("CP factors must be finite")
        W1.setflags(write=False)
        W2.setflags(write=False)
        object.__setattr__(self, "W1", W1)
        object.__setattr__(self, "W2", W2)

    @property
    def grid_size(self) -> int:
        return self.W1.shape[0]

    @property
    def rank(self) -> int:
        return self.W1.shape[1]

    def factor(self, mode: int) -> np.ndarray:
        if mode == 1:
            return self.W1
        if mode == 2:
            return self.W2
        raise ConfigError(f"mode must be 1 or 2, got {mode}")

    def replace(self, mode: int, values: np.ndarray) -> "CPFactorPair":
        """Copy with one factor replaced; values may be K x R or vec form."""
        values = np.asarray(values, dtype=float).reshape(self.W1.shape, order="F")
        if mode == 1:
            return CPFactorPair(values, self.W2)
        if mode == 2:
            return CPFactorPair(self.W1, values)
        raise ConfigError(f"mode must be 1 or 2, got {mode}")


def vec_factor(W: np.ndarray) -> np.ndarray:
    """Column-first (rank-block) vectorization of a K x R factor."""
    return np.asarray(W, dtype=float).ravel(order="F")


def cp_compose(f: CPFactorPair) -> Image:
    """W[i, j] = sum_r W1[i, r] * W2[j, r]."""
    return f.W1 @ f.W2.T


def assemble_design(L: SparseSystemTensor, other: np.ndarray, mode: int) -> np.ndarray:
    """Design matrix of the forward model linearized in one factor.

    For mode 1 (other = W2): A[b, r*K + i] = sum_j L[b, i, j] * W2[j, r], so
    A @ vec(W1) == forward_project(L, W1 @ W2.T). Mode 2 (other = W1)
    contracts over i instead.

    Args:
        L: System tensor
        other: The fixed factor, K x R (a length-K vector is read as R = 1)
        mode: Which factor the design matrix solves for (1 or 2)

    Returns:
        Dense array of shape (|Theta|*|T|, K*R)
    """
    K = L.geometry.grid_size
    other = np.asarray(other, dtype=float)
    if other.ndim == 1:
        other = other[:, None]
    if other.ndim != 2 or other.shape[0] != K:
        raise DimensionMismatchError(
            f"fixed factor has shape {other.shape}, expected ({K}, R)"
        )
    if mode == 1:
        unfolded = L.unfolded
    elif mode == 2:
        unfolded = L.unfolded_transposed
    else:
        raise ConfigError(f"mode must be 1 or 2, got {mode}")

    # kron(other, I_K)[q*K + p, r*K + p] = other[q, r]; rows follow the pixel
    # ordering of the chosen unfolding, so the product contracts the fixed mode.
    selector = np.kron(other, np.eye(K))
    return np.asarray(unfolded @ selector)


def matrix_rank(W: Image, tol: Optional[float] = None) -> int:
    """Number of singular values above tol * sigma_max.

    tol defaults to 1e-10 * max(W.shape).
    """
    W = np.asarray(W, dtype=float)
    if not np.all(np.isfinite(W)):
        raise ConfigError("matrix_rank needs a finite image")
    if W.size == 0:
        return 0
    singular_values = np.linalg.svd(W, compute_uv=False)
    sigma_max = singular_values[0] if singular_values.size else 0.0
    if sigma_max == 0.0:
        return 0
    if tol is None:
        tol = 1e-10 * max(W.shape)
    return int(np.count_nonzero(singular_values > tol * sigma_max))


def parameter_count(K: int, R: int) -> int:
    """Unknowns of a rank-R CP model of a K x K image: 2 * K * R."""
    if K < 1 or R < 1:
        raise ConfigError(f"K and R must be positive, got K={K}, R={R}")
    return 2 * K * R


def truncated_svd_factors(W: Image, rank: int) -> CPFactorPair:
    """Best rank-R factorization: W1 = U_R sqrt(S_R), W2 = V_R sqrt(S_R).

    Ranks beyond the image's dimensions are padded with zero columns.
    """
    W = np.asarray(W, dtype=float)
    K = W.shape[0]
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise DimensionMismatchError(f"expected a square image, got shape {W.shape}")
    if rank < 1:
        raise ConfigError(f"rank must be at least 1, got {rank}")
    U, S, Vt = np.linalg.svd(W)
    keep = min(rank, S.size)
    root = np.sqrt(S[:keep])
    W1 = np.zeros((K, rank))
    W2 = np.zeros((K, rank))
    W1[:, :keep] = U[:, :keep] * root
    W2[:, :keep] = Vt[:keep].T * root
    return CPFactorPair(W1, W2)
