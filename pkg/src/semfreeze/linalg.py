"""Dense real-matrix kernels shared by every other module.

Matrices are row-major 2-D float64 arrays, vectors 1-D float64 arrays. All
inputs are validated (finite entries, consistent shapes) and all functions
are pure, so they are safe to call from any number of threads.
"""

from __future__ import annotations

import numpy as np

NORM_FLOOR = 1e-12


class DegenerateVectorError(ValueError):
    """A vector whose norm is too small for direction-based arithmetic."""


def as_matrix(a) -> np.ndarray:
    """Validate and convert to a non-empty, finite, row-major float64 matrix."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix entries must be finite")
    return np.ascontiguousarray(m)


def as_vector(a) -> np.ndarray:
    """Validate and convert to a non-empty, finite float64 vector."""
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"expected a non-empty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector entries must be finite")
    return v


def pseudoinverse(m, tol: float = 1e-6) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD.

    Singular values below ``tol * max_singular_value`` are treated as zero.
    Raises ``np.linalg.LinAlgError`` if the decomposition fails to converge.
    """
    a = as_matrix(m)
    if not 0.0 < tol < 1.0:
        raise ValueError(f"tol must lie in (0, 1), got {tol}")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    cutoff = tol * s[0] if s.size else 0.0
    inv_s = np.where(s > cutoff, np.divide(1.0, s, where=s > cutoff), 0.0)
    return (vt.T * inv_s) @ u.T


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1].

    Raises DegenerateVectorError when either norm is below NORM_FLOOR.
    """
    va, vb = as_vector(a), as_vector(b)
    if va.shape != vb.shape:
        raise ValueError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        raise DegenerateVectorError(f"vector norm below {NORM_FLOOR}: {min(na, nb)}")
    c = float(np.dot(va, vb) / (na * nb))
    return min(1.0, max(-1.0, c))


def softmax_cross_entropy(logits, label: int) -> float:
    """-log(softmax(logits)[label]) with max-subtraction stabilization."""
    z = as_vector(logits)
    if not 0 <= label < z.size:
        raise IndexError(f"label {label} out of range for {z.size} logits")
    shifted = z - z.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[label])
