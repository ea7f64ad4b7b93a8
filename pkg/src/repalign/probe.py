"""L2-regularized multinomial logistic regression used as a frozen probe."""
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, ShapeMismatch

DEFAULT_LAMBDA = 1e-3
DEFAULT_SPLITS = 5
TRAIN_FRACTION = 0.5


@dataclass(frozen=True)
class LinearProbe:
    weights: np.ndarray  # (d, C)
    bias: np.ndarray     # (C,)
    lam: float
    iterations: int = 0
    grad_norm: float = 0.0

    @property
    def classes(self):
        return self.weights.shape[1]

    def predict(self, features):
        features = np.asarray(features, dtype=np.float64)
        if features.shape[1] != self.weights.shape[0]:
            raise ShapeMismatch(
                f"probe expects {self.weights.shape[0]} dims, got {features.shape[1]}")
        # np.argmax returns the first maximum: ties go to the lowest class id
        return np.argmax(features @ self.weights + self.bias, axis=1)


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def probe_objective(w, b, x, y, lam):
    """Mean cross-entropy plus (lam/2)||W||_F^2 and its gradient (bias unpenalized)."""
    n = x.shape[0]
    logp = _log_softmax(x @ w + b)
    loss = -logp[np.arange(n), y].mean() + 0.5 * lam * np.sum(w * w)
    p = np.exp(logp)
    p[np.arange(n), y] -= 1.0
    p /= n
    return loss, x.T @ p + lam * w, p.sum(axis=0)


def _fit(x, y, lam, w, b, tol, max_iter):
    f, gw, gb = probe_objective(w, b, x, y, lam)
    step = 1.0
    prev = None
    it = 0
    gnorm = np.sqrt(np.sum(gw * gw) + np.sum(gb * gb))
    while gnorm > tol and it < max_iter:
        it += 1
        if prev is not None:
            # Barzilai-Borwein trial step, then Armijo backtracking
            sw, sb, yw, yb = prev
            sy = np.sum(sw * yw) + np.sum(sb * yb)
            if sy > 0:
                step = (np.sum(sw * sw) + np.sum(sb * sb)) / sy
        g2 = gnorm * gnorm
        while True:
            w_new, b_new = w - step * gw, b - step * gb
            f_new, gw_new, gb_new = probe_objective(w_new, b_new, x, y, lam)
            if f_new <= f - 1e-4 * step * g2 or step < 1e-12:
                break
            step *= 0.5
        prev = (w_new - w, b_new - b, gw_new - gw, gb_new - gb)
        w, b, f, gw, gb = w_new, b_new, f_new, gw_new, gb_new
        gnorm = np.sqrt(np.sum(gw * gw) + np.sum(gb * gb))
    return w, b, f, it, gnorm


def train_probe(x, lam=DEFAULT_LAMBDA, num_classes=None, init_seed=None,
                tol=1e-6, max_iter=10_000):
    """Fit a probe on ``x`` (an ActivationSet).

    Starts from zero parameters, or from a seeded Gaussian draw when
    ``init_seed`` is given; the objective is strictly convex so both reach
    the same optimum.
    """
    if lam <= 0:
        raise InvalidArgument(f"lambda must be positive, got {lam}")
    feats, labels = x.features, x.labels
    if np.unique(labels).size < 2:
        raise InvalidArgument("probe training needs at least two classes present")
    c = max(num_classes or x.num_classes, int(labels.max()) + 1, 2)
    d = feats.shape[1]
    if init_seed is None:
        w0, b0 = np.zeros((d, c)), np.zeros(c)
    else:
        rng = np.random.default_rng(init_seed)
        w0, b0 = rng.standard_normal((d, c)), rng.standard_normal(c)
    w, b, _, it, gnorm = _fit(feats, labels, lam, w0, b0, tol, max_iter)
    return LinearProbe(weights=w, bias=b, lam=lam, iterations=it, grad_norm=float(gnorm))


def probe_loss(g, x):
    return probe_objective(g.weights, g.bias, x.features, x.labels, g.lam)[0]


def probe_accuracy(g, x):
    """Fraction of samples whose argmax prediction matches the label."""
    return float(np.mean(g.predict(x.features) == x.labels))


def split_indices(n, splits, seed=0, train_fraction=TRAIN_FRACTION):
    rng = np.random.default_rng(seed)
    n_train = int(round(n * train_fraction))
    out = []
    for _ in range(splits):
        perm = rng.permutation(n)
        out.append((np.sort(perm[:n_train]), np.sort(perm[n_train:])))
    return out


def _subset(a, idx):
    return type(a)(a.features[idx], a.labels[idx], a.num_classes, a.meta)


def transfer_eval(source, target, lam=DEFAULT_LAMBDA, splits=DEFAULT_SPLITS, seed=0):
    """Probe trained on ``source`` rows, scored on the held-out ``target`` rows.

    Each split trains on a random half of the samples and evaluates on the
    other half, both on ``target`` (transfer) and ``source`` (same-model
    baseline). Standard deviations use the n-1 denominator.
    """
    if splits < 2:
        raise InvalidArgument(f"need at least 2 splits, got {splits}")
    if source.n != target.n or not np.array_equal(source.labels, target.labels):
        raise InvalidArgument("source and target must share labels and sample order")
    transfer, same = [], []
    for tr, ev in split_indices(source.n, splits, seed):
        train = _subset(source, tr)
        if np.unique(train.labels).size < 2:
            raise InvalidArgument("a split's training half holds a single class")
        g = train_probe(train, lam, num_classes=source.num_classes)
        transfer.append(probe_accuracy(g, _subset(target, ev)))
        same.append(probe_accuracy(g, _subset(source, ev)))
    transfer, same = np.array(transfer), np.array(same)
    return {
        "mean": float(transfer.mean()),
        "std": float(transfer.std(ddof=1)),
        "same_model_mean": float(same.mean()),
        "same_model_std": float(same.std(ddof=1)),
        "per_split": transfer.tolist(),
        "same_model_per_split": same.tolist(),
        "lambda": lam,
        "splits": splits,
        "train_fraction": TRAIN_FRACTION,
    }
