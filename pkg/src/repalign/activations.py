"""Activation matrices with labels and provenance, plus their on-disk format.

RAF v1 layout (little-endian, no padding)::

    b"RAF1" | u32 version=1 | u32 n | u32 d | u32 num_classes | u32 meta_len
    | meta_len bytes of UTF-8 JSON | n*d float32 features (row-major)
    | n uint32 labels
"""
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgument, ShapeMismatch, UnsupportedVersion
from .numerics import as_matrix, svd

RAF_MAGIC = b"RAF1"
RAF_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")

META_KEYS = ("model_id", "layer_id", "seed", "dataset_id", "epoch")


def default_meta(**overrides):
    meta = {"model_id": "", "layer_id": "", "seed": 0, "dataset_id": "", "epoch": 0}
    meta.update(overrides)
    return meta


@dataclass(frozen=True)
class ActivationSet:
    """n samples x d features, one integer label per sample.

    Arrays are copied and made read-only on construction.
    """
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    meta: dict = field(default_factory=default_meta)

    def __post_init__(self):
        feats = as_matrix(self.features, "features").copy()
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or labels.shape[0] != feats.shape[0]:
            raise ShapeMismatch(
                f"labels length {labels.shape} does not match {feats.shape[0]} rows")
        if feats.shape[0] < 2:
            raise InvalidArgument("an ActivationSet needs at least 2 samples")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise InvalidArgument(f"labels must lie in [0, {self.num_classes})")
        labels = labels.astype(np.int64)
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "num_classes", int(self.num_classes))
        object.__setattr__(self, "meta", {**default_meta(), **dict(self.meta)})

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    def with_features(self, features, **meta_updates):
        return replace(self, features=features, meta={**self.meta, **meta_updates})


@dataclass(frozen=True)
class NormalizationRecord:
    """Enough to replay :func:`normalize` on the raw matrix bit-for-bit."""
    column_means: np.ndarray
    row_norm_applied: bool
    iterations: int
    zero_rows: np.ndarray  # bool mask of rows that were zero after centering
    converged: bool = True


def _normalize_features(x, tol, max_iter):
    n = x.shape[0]
    means = x.mean(axis=0)
    z = x - means
    norms = np.linalg.norm(z, axis=1)
    # rows that are zero up to rounding of the raw values count as zero
    scale = np.linalg.norm(x, axis=1).max()
    zero = norms <= 1e-12 * scale if scale > 0 else np.ones(n, dtype=bool)
    z[zero] = 0.0
    live = ~zero
    iterations = 0
    if not live.any():
        return z, means, zero, iterations, True
    n_live = int(live.sum())
    # Alternate row scaling and re-centering until both hold at once.
    # Zero rows stay pinned at zero, so column means are driven by the live rows.
    while True:
        iterations += 1
        z[live] /= np.linalg.norm(z[live], axis=1, keepdims=True)
        converged = np.max(np.abs(z.sum(axis=0) / n)) <= tol
        if converged or iterations >= max_iter:
            break
        z[live] -= z[live].sum(axis=0) / n_live
    return z, means, zero, iterations, bool(converged)


def normalize(a, tol=1e-12, max_iter=1000):
    """Center each feature column and scale each sample row to unit length.

    Scaling rows moves the column means off zero again, so the two steps
    repeat until column means are within ``tol`` of zero with every
    non-degenerate row at unit norm. Rows that vanish after the first
    centering stay exactly zero.

    Some inputs admit no such matrix (one feature and an odd number of
    non-zero rows: unit scalars cannot sum to zero). Those stop after
    ``max_iter`` rounds with unit rows and ``record.converged`` False.
    """
    z, means, zero, iterations, converged = _normalize_features(a.features, tol, max_iter)
    rec = NormalizationRecord(column_means=means, row_norm_applied=iterations > 0,
                              iterations=iterations, zero_rows=zero, converged=converged)
    return a.with_features(z, normalized=True), rec


def apply_normalization(record, raw):
    """Replay a :class:`NormalizationRecord` on the raw feature matrix."""
    x = as_matrix(raw)
    z = x - record.column_means
    z[record.zero_rows] = 0.0
    live = ~record.zero_rows
    n_live = int(live.sum())
    for i in range(record.iterations):
        z[live] /= np.linalg.norm(z[live], axis=1, keepdims=True)
        if i + 1 < record.iterations:
            z[live] -= z[live].sum(axis=0) / n_live
    return z


def project_dims(a, target_d):
    """Bring ``a`` to ``target_d`` feature dimensions.

    Wider sets are projected onto their top right singular directions;
    narrower sets are zero-padded on the right.
    """
    if target_d < 1:
        raise InvalidArgument(f"target_d must be >= 1, got {target_d}")
    d = a.d
    if d == target_d:
        return a
    if d > target_d:
        basis = svd(a.features).v[:, :target_d]
        feats = a.features @ basis
    else:
        feats = np.zeros((a.n, target_d))
        feats[:, :d] = a.features
    return a.with_features(feats, projected_from=d)


def write_raf(a, path):
    meta = json.dumps(a.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    feats = np.ascontiguousarray(a.features, dtype="<f4")
    labels = np.ascontiguousarray(a.labels, dtype="<u4")
    header = _HEADER.pack(RAF_MAGIC, RAF_VERSION, a.n, a.d, a.num_classes, len(meta))
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(meta)
        fh.write(feats.tobytes())
        fh.write(labels.tobytes())


def decode_raf(blob):
    if len(blob) < _HEADER.size:
        raise FormatError(f"file too short for RAF header ({len(blob)} bytes)")
    magic, version, n, d, num_classes, meta_len = _HEADER.unpack_from(blob, 0)
    if magic != RAF_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {RAF_MAGIC!r}")
    if version != RAF_VERSION:
        raise UnsupportedVersion(f"RAF version {version} not supported")
    expected = _HEADER.size + meta_len + 4 * n * d + 4 * n
    if len(blob) != expected:
        raise FormatError(f"RAF payload is {len(blob)} bytes, header implies {expected}")
    off = _HEADER.size
    try:
        meta = json.loads(blob[off:off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"RAF metadata is not valid JSON: {exc}") from exc
    off += meta_len
    feats = np.frombuffer(blob, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    off += 4 * n * d
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=off)
    try:
        return ActivationSet(feats.astype(np.float64), labels.astype(np.int64),
                             num_classes, meta)
    except ValueError as exc:
        raise FormatError(f"RAF content invalid: {exc}") from exc


def read_raf(path):
    return decode_raf(Path(path).read_bytes())
