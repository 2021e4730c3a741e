import logging
from typing import Sequence, Tuple, Union

import numpy as np

from ..models.errors import DimensionMismatchError, EmptyInputError, ZeroVectorError, ConfigError

logger = logging.getLogger(__name__)

ZERO_NORM = 1e-12
UNIT_TOLERANCE = 1e-6

ArrayLike = Union[np.ndarray, Sequence[float]]


def check_temperature(tau: float) -> float:
    if not np.isfinite(tau) or tau <= 0:
        raise ConfigError(f"Temperature must be positive, got {tau}")
    return float(tau)


def l2_normalize(v: ArrayLike) -> np.ndarray:
    """Scale a vector to unit Euclidean norm."""
    vec = np.asarray(v, dtype=np.float64).ravel()
    if vec.size == 0:
        raise EmptyInputError("Cannot normalize an empty vector")
    norm = np.linalg.norm(vec)
    if norm < ZERO_NORM:
        raise ZeroVectorError(f"Vector norm {norm:.3e} is below {ZERO_NORM}")
    return vec / norm


def ensure_unit(v: ArrayLike) -> np.ndarray:
    """Return v unchanged if it is unit-norm within tolerance, otherwise renormalize it."""
    vec = np.asarray(v, dtype=np.float64).ravel()
    if abs(np.linalg.norm(vec) - 1.0) > UNIT_TOLERANCE:
        return l2_normalize(vec)
    return vec


def logit(u: ArrayLike, v: ArrayLike, tau: float) -> float:
    """Temperature-scaled cosine similarity u.v / tau of two unit vectors."""
    tau = check_temperature(tau)
    a = ensure_unit(u)
    b = ensure_unit(v)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"Dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(a @ b) / tau


def pairwise_logits(A: Sequence[ArrayLike], B: Sequence[ArrayLike], tau: float) -> np.ndarray:
    """Matrix of logit(A_i, B_j, tau)."""
    tau = check_temperature(tau)
    if len(A) == 0 or len(B) == 0:
        raise EmptyInputError("pairwise_logits needs non-empty inputs")
    left = _stack_unit(A)
    right = _stack_unit(B)
    if left.shape[1] != right.shape[1]:
        raise DimensionMismatchError(f"Dimension mismatch: {left.shape[1]} vs {right.shape[1]}")
    return left @ right.T / tau


def _stack_unit(vectors: Sequence[ArrayLike]) -> np.ndarray:
    rows = [ensure_unit(v) for v in vectors]
    if len({row.shape[0] for row in rows}) != 1:
        raise DimensionMismatchError("All vectors must share one dimension")
    return np.stack(rows)


def normalize_rows(X: np.ndarray, mask: np.ndarray = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Row-wise l2 normalization of the last axis, skipping masked-out rows.

    Args:
        X: Array of shape (..., d)
        mask: Optional boolean array of shape X.shape[:-1]; False rows stay zero

    Returns:
        Tuple of (normalized array, norms) where norms of skipped rows are 1.0
    """
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=-1)
    if mask is None:
        mask = np.ones(X.shape[:-1], dtype=bool)
    active = norms[mask]
    if active.size and active.min() < ZERO_NORM:
        raise ZeroVectorError("Cannot normalize a zero embedding")
    safe = np.where(mask, norms, 1.0)
    Z = np.where(mask[..., None], X / safe[..., None], 0.0)
    return Z, safe


def normalize_backward(Z: np.ndarray, norms: np.ndarray, dZ: np.ndarray) -> np.ndarray:
    """Pull a gradient back through z = x/||x||, i.e. apply (I - z z^T) / ||x||."""
    radial = np.sum(Z * dZ, axis=-1, keepdims=True)
    return (dZ - Z * radial) / norms[..., None]
