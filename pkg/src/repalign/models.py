"""Small layered networks with hand-written backprop.

Three architectures share one layer stack shape ``dims = [in, h1, ..., hL, C]``:

* ``mlp``            dense ReLU hidden layers, dense logits.
* ``pgnn``           hidden layers are :class:`StructuredProjection`,
                     ``relu(S W x + b + phi(x))`` with S a frozen orthogonal
                     projector and phi a tanh corrective path.
* ``pgnn_nostruct``  pgnn with S := I and phi removed, i.e. a dense ReLU
                     layer initialised from the same draws as pgnn's W, b.

Activations are row-major: a batch is (n, features).
"""
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgument, NumericalError, ShapeMismatch, UnsupportedVersion

ARCHS = ("mlp", "pgnn", "pgnn_nostruct")
ACTIVATIONS = ("relu", "identity")
DEFAULT_HIDDEN = (128, 128)
DEFAULT_PROJ_RANK = 64

_W_TAG, _S_TAG, _PHI_TAG = 0, 1, 2


def _rng(seed, layer, tag):
    return np.random.default_rng([seed, layer, tag])


def _fan_in_uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _act(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else z


def _act_grad(z, grad, kind):
    return grad * (z > 0) if kind == "relu" else grad


def random_projector(dim, rank, rng):
    """Rank-``rank`` orthogonal projector Q Q^T from a QR of a Gaussian draw."""
    q, _ = np.linalg.qr(rng.standard_normal((dim, rank)))
    p = q @ q.T
    return 0.5 * (p + p.T)


@dataclass
class Dense:
    in_dim: int
    out_dim: int
    activation: str = "relu"
    params: dict = field(default_factory=dict)

    def init(self, seed, index):
        rng = _rng(seed, index, _W_TAG)
        self.params = {
            "w": _fan_in_uniform(rng, (self.out_dim, self.in_dim), self.in_dim),
            "b": _fan_in_uniform(rng, (self.out_dim,), self.in_dim),
        }
        return self

    def forward(self, x):
        z = x @ self.params["w"].T + self.params["b"]
        return _act(z, self.activation), (x, z)

    def backward(self, cache, grad_out):
        x, z = cache
        dz = _act_grad(z, grad_out, self.activation)
        grads = {"w": dz.T @ x, "b": dz.sum(axis=0)}
        return dz @ self.params["w"], grads


@dataclass
class StructuredProjection:
    """``act(S W x + b + phi(x))`` with ``phi(x) = U2 tanh(U1 x + c1)``.

    ``s`` is fixed at construction and never updated; it is not a key in
    ``params`` and gets no gradient.
    """
    in_dim: int
    out_dim: int
    proj_rank: int
    corrective_hidden: int
    activation: str = "relu"
    params: dict = field(default_factory=dict)
    s: np.ndarray = None

    def init(self, seed, index):
        rng = _rng(seed, index, _W_TAG)
        self.params = {
            "w": _fan_in_uniform(rng, (self.out_dim, self.in_dim), self.in_dim),
            "b": _fan_in_uniform(rng, (self.out_dim,), self.in_dim),
        }
        self.s = random_projector(self.out_dim, self.proj_rank, _rng(seed, index, _S_TAG))
        self.s.setflags(write=False)
        rng = _rng(seed, index, _PHI_TAG)
        h = self.corrective_hidden
        self.params["u1"] = _fan_in_uniform(rng, (h, self.in_dim), self.in_dim)
        self.params["c1"] = _fan_in_uniform(rng, (h,), self.in_dim)
        self.params["u2"] = _fan_in_uniform(rng, (self.out_dim, h), h)
        return self

    def forward(self, x):
        p = self.params
        lin = (x @ p["w"].T) @ self.s  # S symmetric, so (S W x)^T = x^T W^T S
        hid = np.tanh(x @ p["u1"].T + p["c1"])
        z = lin + p["b"] + hid @ p["u2"].T
        return _act(z, self.activation), (x, z, hid)

    def backward(self, cache, grad_out):
        x, z, hid = cache
        p = self.params
        dz = _act_grad(z, grad_out, self.activation)
        dlin = dz @ self.s
        dpre = (dz @ p["u2"]) * (1.0 - hid * hid)
        grads = {
            "w": dlin.T @ x,
            "b": dz.sum(axis=0),
            "u1": dpre.T @ x,
            "c1": dpre.sum(axis=0),
            "u2": dz.T @ hid,
        }
        return dlin @ p["w"] + dpre @ p["u1"], grads


@dataclass
class NetworkModel:
    arch_id: str
    dims: tuple
    seed: int
    layers: list
    proj_rank: int = DEFAULT_PROJ_RANK
    corrective_hidden: int = None

    @property
    def layer_ids(self):
        hidden = [f"h{i + 1}" for i in range(len(self.layers) - 1)]
        return hidden + ["logits"]

    @property
    def input_dim(self):
        return self.dims[0]

    @property
    def num_classes(self):
        return self.dims[-1]

    def parameters(self):
        """Yield ``(layer_index, name, array)`` for every learnable tensor."""
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                yield i, name, layer.params[name]

    def num_parameters(self):
        return int(sum(p.size for _, _, p in self.parameters()))

    def copy_params(self):
        return [{k: v.copy() for k, v in layer.params.items()} for layer in self.layers]

    def load_params(self, snapshot):
        for layer, params in zip(self.layers, snapshot):
            layer.params = {k: v.copy() for k, v in params.items()}


def build(arch_id, dims, seed, proj_rank=DEFAULT_PROJ_RANK, corrective_hidden=None):
    """Construct a freshly initialised model.

    ``proj_rank`` is clipped per layer to ``min(in, out)``. The corrective
    path width defaults to ``ceil(out / 2)``.
    """
    if arch_id not in ARCHS:
        raise InvalidArgument(f"unknown arch {arch_id!r}; expected one of {ARCHS}")
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise InvalidArgument(f"dims must be >= 2 positive sizes, got {dims}")
    if proj_rank < 1:
        raise InvalidArgument("proj_rank must be >= 1")
    layers = []
    n_layers = len(dims) - 1
    for i in range(n_layers):
        d_in, d_out = dims[i], dims[i + 1]
        last = i == n_layers - 1
        if arch_id == "pgnn" and not last:
            hid = corrective_hidden or math.ceil(d_out / 2)
            layer = StructuredProjection(d_in, d_out, min(proj_rank, d_in, d_out), hid)
        else:
            layer = Dense(d_in, d_out, "identity" if last else "relu")
        layers.append(layer.init(seed, i))
    return NetworkModel(arch_id=arch_id, dims=dims, seed=int(seed), layers=layers,
                        proj_rank=int(proj_rank), corrective_hidden=corrective_hidden)


def _check_batch(model, batch):
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != model.input_dim:
        raise ShapeMismatch(f"batch shape {batch.shape} does not fit input dim {model.input_dim}")
    return batch


def _forward(model, batch):
    acts, caches = [], []
    h = _check_batch(model, batch)
    for i, layer in enumerate(model.layers):
        h, cache = layer.forward(h)
        if not np.all(np.isfinite(h)):
            raise NumericalError(f"non-finite activation in layer {model.layer_ids[i]}")
        acts.append(h)
        caches.append(cache)
    return acts, caches


def forward(model, batch):
    """Per-layer activations for ``batch``; the last entry is the logits."""
    return _forward(model, batch)[0]


def extract(model, batch, layer_id):
    ids = model.layer_ids
    if layer_id not in ids:
        raise InvalidArgument(f"unknown layer {layer_id!r}; valid ids: {', '.join(ids)}")
    return forward(model, batch)[ids.index(layer_id)]


def cross_entropy(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    return float(-logp[np.arange(n), labels].mean()), np.exp(logp)


def backward(model, batch, labels):
    """Mean cross-entropy loss and gradients for every learnable parameter.

    Returns ``(loss, grads)`` where ``grads[i]`` mirrors ``layers[i].params``.
    """
    labels = np.asarray(labels)
    acts, caches = _forward(model, batch)
    if labels.shape != (acts[-1].shape[0],) or labels.min() < 0 or labels.max() >= model.num_classes:
        raise InvalidArgument("labels must be class ids, one per batch row")
    loss, probs = cross_entropy(acts[-1], labels)
    n = probs.shape[0]
    grad = probs
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    grads = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        grad, grads[i] = model.layers[i].backward(caches[i], grad)
    return loss, grads


def evaluate(model, x, y):
    """(mean cross-entropy, accuracy) over a full split."""
    logits = forward(model, x)[-1]
    loss, _ = cross_entropy(logits, y)
    acc = float(np.mean(np.argmax(logits, axis=1) == y))
    return loss, acc


# -- checkpoints ----------------------------------------------------------
#   b"RCK1" | u32 version=1 | u32 header_len | header JSON (UTF-8)
#   | u32 count | count float32 learnable parameters (little-endian)
# The frozen projectors are rebuilt from the seed, so they never pass
# through float32.

CKPT_MAGIC = b"RCK1"
CKPT_VERSION = 1


def _header(model, extra):
    shapes = [[i, name, list(p.shape)] for i, name, p in model.parameters()]
    return {
        "arch_id": model.arch_id,
        "dims": list(model.dims),
        "seed": model.seed,
        "proj_rank": model.proj_rank,
        "corrective_hidden": model.corrective_hidden,
        "shapes": shapes,
        "extra": extra or {},
    }


def checkpoint_bytes(model, extra=None):
    header = json.dumps(_header(model, extra), sort_keys=True, separators=(",", ":")).encode()
    flat = np.concatenate([p.ravel() for _, _, p in model.parameters()]).astype("<f4")
    return (CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)) + header
            + struct.pack("<I", flat.size) + flat.tobytes())


def save_checkpoint(model, path, extra=None):
    Path(path).write_bytes(checkpoint_bytes(model, extra))


def load_checkpoint(path):
    """Return ``(model, extra)``; parameters are the stored float32 values."""
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a model checkpoint")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise UnsupportedVersion(f"checkpoint version {version} not supported")
    try:
        header = json.loads(blob[12:12 + hlen].decode())
        (count,) = struct.unpack_from("<I", blob, 12 + hlen)
    except (ValueError, struct.error) as exc:
        raise FormatError(f"{path}: corrupt checkpoint header") from exc
    off = 16 + hlen
    if len(blob) != off + 4 * count:
        raise FormatError(f"{path}: truncated parameter blob")
    flat = np.frombuffer(blob, dtype="<f4", count=count, offset=off).astype(np.float64)
    model = build(header["arch_id"], header["dims"], header["seed"], header["proj_rank"],
                  corrective_hidden=header["corrective_hidden"])
    pos = 0
    for i, name, shape in header["shapes"]:
        size = int(np.prod(shape))
        model.layers[i].params[name] = flat[pos:pos + size].reshape(shape).copy()
        pos += size
    return model, header["extra"]
