"""Datasets: a synthetic latent-factor task and FashionMNIST (IDX files)."""
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgument

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
SPLIT_FRACTIONS = (0.7, 0.15, 0.15)


@dataclass(frozen=True)
class Split:
    features: np.ndarray
    labels: np.ndarray

    @property
    def n(self):
        return self.features.shape[0]


@dataclass(frozen=True)
class Dataset:
    train: Split
    val: Split
    test: Split
    num_classes: int
    dataset_id: str
    ground_truth_latents: np.ndarray = None  # latents for every sample, train/val/test order
    mixing: np.ndarray = None                # (d, r), orthonormal columns
    spec: dict = field(default_factory=dict)

    @property
    def input_dim(self):
        return self.train.features.shape[1]


def _split(x, y, perm, fractions):
    n = len(perm)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    return [Split(x[p], y[p]) for p in parts], parts


def make_synthetic(r, d, n, num_classes=4, noise=0.0, seed=0, fractions=SPLIT_FRACTIONS):
    """Labelled data generated from ``r`` latent factors embedded in ``d`` dims.

    z ~ N(0, I_r); x = A z + eps with A (d x r) having orthonormal columns and
    eps ~ N(0, noise^2); label = argmax of ``num_classes`` seeded linear
    readouts of z. With ``noise == 0`` the class rule is linear in x and the
    centred inputs span exactly span(A).
    """
    if r > d:
        raise InvalidArgument(f"latent dim r={r} exceeds input dim d={d}")
    if r < 1 or num_classes < 2:
        raise InvalidArgument("need r >= 1 and at least 2 classes")
    if n < 10 * num_classes:
        raise InvalidArgument(f"n={n} is below 10 samples per class")
    if noise < 0:
        raise InvalidArgument("noise must be >= 0")
    rng = np.random.default_rng(seed)
    mixing, _ = np.linalg.qr(rng.standard_normal((d, r)))
    readout = rng.standard_normal((num_classes, r))
    z = rng.standard_normal((n, r))
    x = z @ mixing.T
    if noise > 0:
        x = x + noise * rng.standard_normal((n, d))
    y = np.argmax(z @ readout.T, axis=1)
    perm = rng.permutation(n)
    (train, val, test), parts = _split(x, y, perm, fractions)
    for name, s in (("train", train), ("val", val)):
        if np.unique(s.labels).size < num_classes:
            raise InvalidArgument(f"{name} split is missing a class; increase n")
    spec = {"kind": "synth", "r": r, "d": d, "n": n, "num_classes": num_classes,
            "noise": noise, "seed": seed}
    return Dataset(train=train, val=val, test=test, num_classes=num_classes,
                   dataset_id=f"synth-r{r}-d{d}-n{n}-c{num_classes}-s{seed}",
                   ground_truth_latents=z[np.concatenate(parts)], mixing=mixing, spec=spec)


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path):
    """Parse a big-endian IDX file (ubyte payload) into ``(magic, array)``."""
    with _open(path) as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise FormatError(f"{path}: too short for an IDX header")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic == IDX_IMAGES_MAGIC:
        if len(blob) < 16:
            raise FormatError(f"{path}: truncated IDX image header")
        count, rows, cols = struct.unpack(">III", blob[4:16])
        shape, offset = (count, rows, cols), 16
    elif magic == IDX_LABELS_MAGIC:
        (count,) = struct.unpack(">I", blob[4:8])
        shape, offset = (count,), 8
    else:
        raise FormatError(f"{path}: unexpected IDX magic {magic}")
    size = int(np.prod(shape))
    if len(blob) - offset != size:
        raise FormatError(f"{path}: payload holds {len(blob) - offset} bytes, header says {size}")
    return magic, np.frombuffer(blob, dtype=np.uint8, offset=offset).reshape(shape)


def load_fashion_mnist(images_path, labels_path):
    """Flattened images in [0, 1] (row-major pixels) and integer labels."""
    magic_i, images = read_idx(images_path)
    magic_l, labels = read_idx(labels_path)
    if magic_i != IDX_IMAGES_MAGIC:
        raise FormatError(f"{images_path}: expected image magic {IDX_IMAGES_MAGIC}, got {magic_i}")
    if magic_l != IDX_LABELS_MAGIC:
        raise FormatError(f"{labels_path}: expected label magic {IDX_LABELS_MAGIC}, got {magic_l}")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Split(x, labels.astype(np.int64))


def _find(directory, stem):
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def fashion_mnist_dataset(directory, seed=0, val_fraction=1 / 6, limit=None):
    """Standard train/test files; validation is a seeded slice of train."""
    directory = Path(directory)
    train = load_fashion_mnist(_find(directory, "train-images-idx3-ubyte"),
                               _find(directory, "train-labels-idx1-ubyte"))
    test = load_fashion_mnist(_find(directory, "t10k-images-idx3-ubyte"),
                              _find(directory, "t10k-labels-idx1-ubyte"))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(train.n)
    if limit:
        perm = perm[:limit]
    n_val = int(round(len(perm) * val_fraction))
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    spec = {"kind": "fashion", "path": str(directory), "seed": seed, "limit": limit}
    return Dataset(train=Split(train.features[tr_idx], train.labels[tr_idx]),
                   val=Split(train.features[val_idx], train.labels[val_idx]),
                   test=test, num_classes=10, dataset_id=f"fashion-mnist-s{seed}", spec=spec)


def add_gaussian_noise(x, sigma, seed):
    """``x + sigma * N(0, 1)``; one seed gives the same draw for every sigma."""
    if sigma < 0:
        raise InvalidArgument(f"sigma must be >= 0, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    return x + sigma * np.random.default_rng(seed).standard_normal(x.shape)


def dataset_from_spec(spec):
    """Build a Dataset from a plain dict (as stored in configs and checkpoints)."""
    spec = dict(spec)
    kind = spec.pop("kind", "synth")
    if kind == "synth":
        return make_synthetic(**spec)
    if kind == "fashion":
        return fashion_mnist_dataset(spec["path"], seed=spec.get("seed", 0),
                                     limit=spec.get("limit"))
    raise InvalidArgument(f"unknown dataset kind {kind!r}")
