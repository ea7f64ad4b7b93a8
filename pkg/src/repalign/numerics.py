"""Dense float64 kernels: SVD, top-k feature bases, least squares.

Everything here is a pure function of its inputs. numpy's LAPACK-backed
SVD does the heavy lifting; this module pins down the sign convention and
the rank tolerance so callers get identical results on every run.
"""
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, InvalidInput, ShapeMismatch


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray      # (m, r), orthonormal columns
    sigma: np.ndarray  # (r,), non-increasing
    v: np.ndarray      # (n, r), orthonormal columns

    def reconstruct(self):
        return (self.u * self.sigma) @ self.v.T


def as_matrix(a, name="a"):
    """Return ``a`` as a finite 2-D float64 array or raise InvalidInput."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidInput(f"{name} must be a non-empty 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInput(f"{name} contains non-finite entries")
    return a


def svd(a):
    """Thin SVD ``a = U diag(sigma) V^T`` with a deterministic sign convention.

    Each column of U is flipped (together with the matching column of V) so
    that its largest-magnitude entry is positive. Ties go to the first index.
    """
    a = as_matrix(a)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    v = vt.T.copy()
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    u = u * signs
    v = v * signs
    return SvdResult(u=u, sigma=s, v=v)


def rank_tolerance(sigma, shape):
    if sigma.size == 0:
        return 0.0
    return max(shape) * np.finfo(np.float64).eps * float(sigma[0])


def numerical_rank(a):
    res = svd(a)
    return int(np.sum(res.sigma > rank_tolerance(res.sigma, np.shape(a))))


def orthonormal_basis_topk(a, k):
    """Top-k right singular vectors of ``a`` as a (cols, k) matrix.

    These are feature-space directions, so bases computed from two activation
    matrices with the same width live in the same ambient space.
    """
    a = as_matrix(a)
    if not (1 <= k <= min(a.shape)):
        raise InvalidArgument(f"k={k} outside [1, {min(a.shape)}] for shape {a.shape}")
    return svd(a).v[:, :k].copy()


def least_squares(a, b):
    """Minimum-norm X minimizing ||aX - b||_F, via the SVD pseudoinverse."""
    a = as_matrix(a, "a")
    b = np.asarray(b, dtype=np.float64)
    vector_rhs = b.ndim == 1
    if vector_rhs:
        b = b[:, None]
    b = as_matrix(b, "b")
    if a.shape[0] != b.shape[0]:
        raise ShapeMismatch(f"row mismatch: a has {a.shape[0]} rows, b has {b.shape[0]}")
    res = svd(a)
    keep = res.sigma > rank_tolerance(res.sigma, a.shape)
    inv = np.zeros_like(res.sigma)
    inv[keep] = 1.0 / res.sigma[keep]
    x = (res.v * inv) @ (res.u.T @ b)
    return x[:, 0] if vector_rhs else x


def orthonormality_error(q):
    q = np.asarray(q, dtype=np.float64)
    return float(np.max(np.abs(q.T @ q - np.eye(q.shape[1]))))
