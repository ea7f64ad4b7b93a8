"""Mini-batch Adam with early stopping on validation loss."""
import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidArgument, NumericalError
from .models import DEFAULT_HIDDEN, backward, build, evaluate

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    # evaluation-time input noise; training never sees it
    noise_sigma: float = 0.0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InvalidArgument("learning_rate must be > 0")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise InvalidArgument("batch_size, patience and max_epochs must be >= 1")
        if self.noise_sigma < 0:
            raise InvalidArgument("noise_sigma must be >= 0")


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    initial_train_loss: float = float("nan")
    initial_val_loss: float = float("nan")
    stopped_epoch: int = 0
    best_epoch: int = 0

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
        for row in zip(self.epochs, self.train_loss, self.val_loss, self.val_acc):
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()


class Adam:
    """Adam over a list of per-layer parameter dicts (updated in place)."""

    def __init__(self, params, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
        self.v = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            for k in p:
                m[k] *= self.beta1
                m[k] += (1.0 - self.beta1) * g[k]
                v[k] *= self.beta2
                v[k] += (1.0 - self.beta2) * g[k] * g[k]
                p[k] -= self.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + self.eps)


def _checked(value, epoch):
    if not np.isfinite(value):
        raise NumericalError(f"loss became non-finite in epoch {epoch}", epoch=epoch)
    return value


def train(model, dataset, config, val_loss_hook=None):
    """Train ``model`` in place; returns ``(model, history)``.

    The returned model holds the parameters from ``history.best_epoch``
    (lowest validation loss), not the last epoch. ``val_loss_hook(epoch,
    loss)`` may rewrite the recorded validation loss; tests use it to inject
    a known loss curve.
    """
    tr, va = dataset.train, dataset.val
    rng = np.random.default_rng([config.seed, 1])
    opt = Adam([layer.params for layer in model.layers], config.learning_rate,
               config.beta1, config.beta2, config.eps)
    hist = TrainHistory()
    try:
        hist.initial_train_loss = evaluate(model, tr.features, tr.labels)[0]
        hist.initial_val_loss = evaluate(model, va.features, va.labels)[0]
    except NumericalError as exc:
        raise NumericalError(str(exc), epoch=0) from exc
    best_loss, best_params, stale = np.inf, model.copy_params(), 0
    for epoch in range(1, config.max_epochs + 1):
        try:
            perm = rng.permutation(tr.n)
            for start in range(0, tr.n, config.batch_size):
                idx = perm[start:start + config.batch_size]
                loss, grads = backward(model, tr.features[idx], tr.labels[idx])
                _checked(loss, epoch)
                opt.step(grads)
            train_loss, _ = evaluate(model, tr.features, tr.labels)
            val_loss, val_acc = evaluate(model, va.features, va.labels)
        except NumericalError as exc:
            raise NumericalError(f"divergence in epoch {epoch}: {exc}", epoch=epoch) from exc
        _checked(train_loss, epoch)
        _checked(val_loss, epoch)
        if val_loss_hook is not None:
            val_loss = val_loss_hook(epoch, val_loss)
        hist.epochs.append(epoch)
        hist.train_loss.append(train_loss)
        hist.val_loss.append(val_loss)
        hist.val_acc.append(val_acc)
        if val_loss < best_loss:
            best_loss, best_params, stale = val_loss, model.copy_params(), 0
            hist.best_epoch = epoch
        else:
            stale += 1
        hist.stopped_epoch = epoch
        if stale >= config.patience:
            break
    model.load_params(best_params)
    return model, hist


@dataclass
class RunResult:
    arch_id: str
    seed: int
    model: object = None
    history: TrainHistory = None
    error: str = None

    @property
    def ok(self):
        return self.error is None


def _run_one(args):
    arch_id, dims, proj_rank, dataset, config, seed = args
    cfg = TrainConfig(**{**asdict(config), "seed": seed})
    try:
        model = build(arch_id, dims, seed, proj_rank)
        model, hist = train(model, dataset, cfg)
        return RunResult(arch_id, seed, model, hist)
    except (NumericalError, ValueError) as exc:
        return RunResult(arch_id, seed, error=f"{type(exc).__name__}: {exc}")


def multi_seed_run(arch_id, dataset, config, seeds, hidden=None, proj_rank=64, jobs=1):
    """Independent training runs, one per seed.

    The seed drives both initialisation and batch order. A failing run is
    reported through ``RunResult.error`` and does not stop the others.
    Results do not depend on ``jobs``.
    """
    seeds = [int(s) for s in seeds]
    if len(set(seeds)) != len(seeds):
        raise InvalidArgument(f"seeds must be distinct, got {seeds}")
    dims = (dataset.input_dim, *(hidden or DEFAULT_HIDDEN), dataset.num_classes)
    tasks = [(arch_id, dims, proj_rank, dataset, config, s) for s in seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_one, tasks))
    return [_run_one(t) for t in tasks]
