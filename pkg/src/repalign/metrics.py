"""Geometric alignment measures between two activation sets.

Linear CKA, principal angles / subspace overlap between top-k feature
subspaces, and linear alignment maps (orthogonal Procrustes, least squares,
CCA) together with :func:`apply_map`.
"""
from dataclasses import dataclass, field

import numpy as np

from .activations import ActivationSet
from .errors import InvalidArgument, ShapeMismatch
from .numerics import (as_matrix, least_squares, numerical_rank, orthonormal_basis_topk,
                       orthonormality_error, svd)

MAP_KINDS = ("procrustes", "least_squares", "cca")
CCA_RIDGE = 1e-6


def _features(a):
    return a.features if isinstance(a, ActivationSet) else as_matrix(a)


def _centered(x):
    return x - x.mean(axis=0)


def cka(x, y):
    """Linear CKA between two representations of the same n samples.

    Both inputs are column-centered here regardless of prior preprocessing,
    so the value is invariant to translation as well as to orthogonal
    transforms and isotropic scaling. A representation that is constant
    across samples has no alignment signal and scores 0.
    """
    x, y = _features(x), _features(y)
    if x.shape[0] != y.shape[0]:
        raise ShapeMismatch(f"sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    xc, yc = _centered(x), _centered(y)
    xx = np.linalg.norm(xc.T @ xc)
    yy = np.linalg.norm(yc.T @ yc)
    if xx == 0.0 or yy == 0.0:
        return 0.0
    xy = np.linalg.norm(yc.T @ xc) ** 2
    return float(xy / (xx * yy))


def principal_angles(u, v, tol=1e-6):
    """Cosines of the principal angles between span(u) and span(v).

    ``u`` and ``v`` must have orthonormal columns. Returned cosines are
    clamped to [0, 1] and sorted non-increasing.
    """
    u, v = as_matrix(u, "u"), as_matrix(v, "v")
    if u.shape[0] != v.shape[0]:
        raise ShapeMismatch(f"ambient dims differ: {u.shape[0]} vs {v.shape[0]}")
    for name, q in (("u", u), ("v", v)):
        err = orthonormality_error(q)
        if err > tol:
            raise InvalidArgument(f"{name} columns are not orthonormal (error {err:.2e})")
    cos = svd(u.T @ v).sigma
    return np.clip(cos, 0.0, 1.0)


@dataclass(frozen=True)
class SubspaceComparison:
    k: int
    cosines: np.ndarray
    overlap: float


def default_k(d, n):
    return max(1, min(10, d, n - 1))


def subspace_overlap(x, y, k=None):
    """Mean squared cosine of principal angles between top-k feature subspaces."""
    x, y = _features(x), _features(y)
    if x.shape[0] != y.shape[0]:
        raise ShapeMismatch(f"sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[1] != y.shape[1]:
        raise ShapeMismatch(
            f"feature dims differ ({x.shape[1]} vs {y.shape[1]}); run project_dims first")
    if k is None:
        k = default_k(x.shape[1], x.shape[0])
    xc, yc = _centered(x), _centered(y)
    avail = min(numerical_rank(xc), numerical_rank(yc))
    if not 1 <= k <= avail:
        raise InvalidArgument(f"k={k} exceeds available rank {avail}")
    cos = principal_angles(orthonormal_basis_topk(xc, k), orthonormal_basis_topk(yc, k))
    return SubspaceComparison(k=k, cosines=cos, overlap=float(np.mean(cos ** 2)))


@dataclass(frozen=True)
class AlignmentMap:
    """Linear map T with ``x @ T`` approximating ``y``."""
    kind: str
    transform: np.ndarray
    fit_residual: float
    extras: dict = field(default_factory=dict)


def _procrustes(x, y):
    res = svd(x.T @ y)
    return res.u @ res.v.T


def _inv_sqrt(c):
    w, q = np.linalg.eigh(c)
    return (q / np.sqrt(w)) @ q.T, (q * np.sqrt(w)) @ q.T


def _cca(x, y):
    xc, yc = _centered(x), _centered(y)
    n = x.shape[0]
    denom = max(n - 1, 1)
    cxx, cyy = xc.T @ xc / denom, yc.T @ yc / denom
    cxy = xc.T @ yc / denom
    ridge = {}
    for name, c in (("x", cxx), ("y", cyy)):
        w = np.linalg.eigvalsh(c)
        if w[0] <= 1e-10 * max(w[-1], 1e-300):
            c += CCA_RIDGE * np.eye(c.shape[0])
            ridge[name] = CCA_RIDGE
    wx, _ = _inv_sqrt(cxx)
    wy, wy_inv = _inv_sqrt(cyy)
    res = svd(wx @ cxy @ wy)
    # identify the i-th whitened canonical direction of x with that of y
    t = wx @ res.u @ res.v.T @ wy_inv
    corr = np.clip(res.sigma, 0.0, 1.0)
    return t, {"correlations": corr.tolist(), "ridge": ridge}


def fit_alignment_map(x, y, kind="procrustes"):
    """Fit T so that ``x @ T`` approximates ``y`` (rows are paired samples)."""
    fx, fy = _features(x), _features(y)
    if fx.shape[0] != fy.shape[0]:
        raise ShapeMismatch(f"sample counts differ: {fx.shape[0]} vs {fy.shape[0]}")
    extras = {}
    if kind == "procrustes":
        if fx.shape[1] != fy.shape[1]:
            raise ShapeMismatch("procrustes needs equal feature dims; run project_dims first")
        t = _procrustes(fx, fy)
    elif kind == "least_squares":
        t = least_squares(fx, fy)
    elif kind == "cca":
        t, extras = _cca(fx, fy)
    else:
        raise InvalidArgument(f"unknown map kind {kind!r}; expected one of {MAP_KINDS}")
    ny = np.linalg.norm(fy)
    resid = np.linalg.norm(fx @ t - fy)
    rel = float(resid / ny) if ny > 0 else float(resid)
    return AlignmentMap(kind=kind, transform=t, fit_residual=rel, extras=extras)


def apply_map(t, x):
    if x.d != t.transform.shape[0]:
        raise ShapeMismatch(f"map expects {t.transform.shape[0]} dims, set has {x.d}")
    return x.with_features(x.features @ t.transform, alignment_map=t.kind)
