"""Multi-seed, multi-layer comparison of two architectures.

:func:`run_protocol` trains both architectures for every seed, extracts
validation-set activations at the selected layers, projects them to a
common width, normalizes them and evaluates every enabled metric for every
(layer, seed pair) cell. Aggregates are recomputable from the raw cells.

:func:`run_experiment_suite` covers the single-model experiments (curves,
initialization sensitivity, structure ablation, input-noise sweep).
"""
import csv
import io
import json
import os
import warnings
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from . import __version__
from .activations import ActivationSet, normalize, project_dims
from .data import add_gaussian_noise, dataset_from_spec
from .errors import InvalidArgument
from .metrics import apply_map, cka, default_k, fit_alignment_map, subspace_overlap
from .models import ARCHS, DEFAULT_HIDDEN, DEFAULT_PROJ_RANK, evaluate, extract
from .probe import DEFAULT_LAMBDA, DEFAULT_SPLITS, TRAIN_FRACTION, transfer_eval
from .training import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, TrainConfig, multi_seed_run

METRICS = ("cka", "overlap", "maps", "transfer")
SUITES = ("accuracy_curves", "init_sensitivity", "ablation", "noise_resilience")
PIPELINE_ORDER = ("extract", "project_dims", "normalize", "metric")
PAPER_NOISE_SIGMAS = (0.0, 0.1, 0.2, 0.3)
DEFAULT_DATASET = {"kind": "synth", "r": 4, "d": 32, "n": 4000, "num_classes": 4,
                   "noise": 0.05, "seed": 0}


@dataclass
class ProtocolConfig:
    dataset: dict = field(default_factory=lambda: dict(DEFAULT_DATASET))
    arch_a: str = "mlp"
    arch_b: str = "pgnn"
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    layers: list = None  # None -> first, middle and last hidden layer
    metrics: list = field(default_factory=lambda: list(METRICS))
    probe_lambda: float = DEFAULT_LAMBDA
    probe_splits: int = DEFAULT_SPLITS
    probe_seed: int = 0
    k: int = None  # None -> min(10, d, n - 1)
    noise_sigmas: list = field(default_factory=lambda: list(PAPER_NOISE_SIGMAS))
    hidden: list = field(default_factory=lambda: list(DEFAULT_HIDDEN))
    proj_rank: int = DEFAULT_PROJ_RANK
    train: TrainConfig = field(default_factory=TrainConfig)
    cross_product: bool = True
    jobs: int = 1

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        self.seeds = [int(s) for s in self.seeds]
        self.metrics = list(self.metrics)
        self.validate()

    def validate(self):
        if not self.seeds:
            raise InvalidArgument("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise InvalidArgument("seeds must be distinct")
        for arch in (self.arch_a, self.arch_b):
            if arch not in ARCHS:
                raise InvalidArgument(f"unknown arch {arch!r}; expected one of {ARCHS}")
        bad = set(self.metrics) - set(METRICS)
        if bad:
            raise InvalidArgument(f"unknown metrics {sorted(bad)}; expected {METRICS}")
        if self.probe_splits < 2 or self.probe_lambda <= 0:
            raise InvalidArgument("probe needs splits >= 2 and lambda > 0")
        if self.layers is not None:
            valid = hidden_layer_ids(len(self.hidden)) + ["logits"]
            wrong = [l for l in self.layers if l not in valid]
            if wrong or not self.layers:
                raise InvalidArgument(f"invalid layers {wrong}; valid ids: {valid}")
        if any(s < 0 for s in self.noise_sigmas):
            raise InvalidArgument("noise sigmas must be >= 0")

    def echo(self):
        """Every setting the run depends on, including defaults left open upstream."""
        d = asdict(self)
        d.pop("jobs")
        d["layers"] = self.layers or default_layers(len(self.hidden))
        d["k"] = self.k if self.k is not None else "min(10, d, n-1)"
        d["adam"] = {"beta1": ADAM_BETA1, "beta2": ADAM_BETA2, "eps": ADAM_EPS}
        d["pipeline_order"] = list(PIPELINE_ORDER)
        d["probe_train_fraction"] = TRAIN_FRACTION
        d["metric_split"] = "validation"
        d["noise_applied_to"] = "evaluation inputs only"
        d["augmentation"] = "none"
        d["seed_pairing"] = "paired (seed i vs seed i); cross product as secondary table"
        return d


def hidden_layer_ids(n_hidden):
    return [f"h{i + 1}" for i in range(n_hidden)]


def default_layers(n_hidden):
    """First, middle and last hidden layer (deduplicated, in depth order)."""
    ids = hidden_layer_ids(n_hidden)
    if not ids:
        return ["logits"]
    picks = [ids[0], ids[len(ids) // 2], ids[-1]]
    return sorted(set(picks), key=ids.index)


def aggregate(values):
    """Mean and standard deviation (n-1 denominator; 0 for a single value)."""
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        raise InvalidArgument("cannot aggregate an empty group")
    std = float(vals.std(ddof=1)) if vals.size >= 2 else 0.0
    return {"mean": float(vals.mean()), "std": std, "n": int(vals.size)}


def paired_deltas(a, b):
    """Per-seed differences ``a[s] - b[s]`` over seeds present in both dicts."""
    seeds = sorted(set(a) & set(b))
    deltas = [a[s] - b[s] for s in seeds]
    out = aggregate(deltas) if deltas else {"mean": None, "std": None, "n": 0}
    out["deltas"] = deltas
    out["seeds"] = seeds
    return out


@dataclass
class AlignmentReport:
    config: dict
    cells: list
    model_cells: list
    summary: list
    cross_summary: list
    paired: dict
    warnings: list
    provenance: dict

    @property
    def n_ok(self):
        return sum(c["status"] == "ok" for c in self.cells)

    @property
    def n_failed(self):
        return sum(c["status"] != "ok" for c in self.cells)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def summary_csv(self):
        return _csv(["metric", "layer", "mean", "std", "n"],
                    [[r["metric"], r["layer"], r["mean"], r["std"], r["n"]]
                     for r in self.summary])

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write(out / "report.json", self.to_json())
        _write(out / "summary.csv", self.summary_csv())
        return [out / "report.json", out / "summary.csv"]

    def value(self, metric, layer, seed_a, seed_b):
        for c in self.cells:
            if (c["metric"], c["layer"], c["seed_a"], c["seed_b"]) == (metric, layer, seed_a, seed_b):
                return c["value"]
        raise KeyError((metric, layer, seed_a, seed_b))


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def provenance():
    prov = {"package": "repalign", "version": __version__, "numpy": np.__version__}
    # wall-clock time would break byte-identical reruns; opt in explicitly
    if "SOURCE_DATE_EPOCH" in os.environ:
        prov["source_date_epoch"] = os.environ["SOURCE_DATE_EPOCH"]
    return prov


def _train_all(cfg, dataset):
    runs = {}
    for arch in dict.fromkeys((cfg.arch_a, cfg.arch_b)):
        for r in multi_seed_run(arch, dataset, cfg.train, cfg.seeds, cfg.hidden,
                                cfg.proj_rank, jobs=cfg.jobs):
            runs[arch, r.seed] = r
    return runs


def _layer_width(cfg, dataset, layer):
    # both architectures share the layer widths, so no projection is needed
    # unless hidden sizes are changed to differ per architecture
    return dataset.num_classes if layer == "logits" else cfg.hidden[int(layer[1:]) - 1]


def _prepared(run, dataset, layer, target_d):
    raw = extract(run.model, dataset.val.features, layer)
    meta = {"model_id": run.arch_id, "layer_id": layer, "seed": run.seed,
            "dataset_id": dataset.dataset_id, "epoch": run.history.best_epoch}
    a = ActivationSet(raw, dataset.val.labels, dataset.num_classes, meta)
    return normalize(project_dims(a, target_d))[0]


def _cell_metrics(xa, xb, cfg):
    """All enabled metric values for one (layer, seed pair); x* are prepared sets."""
    out = {}
    if "cka" in cfg.metrics:
        out["cka"] = lambda: cka(xa, xb)
    if "overlap" in cfg.metrics:
        out["overlap"] = lambda: subspace_overlap(xa, xb, cfg.k).overlap
    if "maps" in cfg.metrics:
        for kind in ("procrustes", "least_squares", "cca"):
            out[f"{kind}_residual"] = lambda kind=kind: fit_alignment_map(xa, xb, kind).fit_residual
        out["cca_mean_correlation"] = lambda: float(np.mean(
            fit_alignment_map(xa, xb, "cca").extras["correlations"]))
    if "transfer" in cfg.metrics:
        te = {}

        def transfer(key):
            if not te:
                te.update(transfer_eval(xa, xb, cfg.probe_lambda, cfg.probe_splits, cfg.probe_seed))
            return te[key]

        out["transfer_accuracy"] = lambda: transfer("mean")
        out["transfer_same_model"] = lambda: transfer("same_model_mean")
        out["transfer_aligned_accuracy"] = lambda: transfer_eval(
            xa, apply_map(fit_alignment_map(xb, xa, "procrustes"), xb),
            cfg.probe_lambda, cfg.probe_splits, cfg.probe_seed)["mean"]
    return out


def _metric_names(cfg):
    dummy = np.zeros((2, 1))
    a = ActivationSet(dummy, np.zeros(2, int), 1)
    return list(_cell_metrics(a, a, cfg))


def run_protocol(cfg):
    """Train, extract, compare and aggregate; failures are recorded per cell."""
    cfg.validate()
    dataset = dataset_from_spec(cfg.dataset)
    runs = _train_all(cfg, dataset)
    layers = cfg.layers or default_layers(len(cfg.hidden))
    notes = []

    model_cells = []
    for (arch, seed), r in sorted(runs.items()):
        if not r.ok:
            notes.append(f"training failed for {arch} seed {seed}: {r.error}")
            model_cells.append({"arch": arch, "seed": seed, "status": "failed", "error": r.error})
            continue
        _, val_acc = evaluate(r.model, dataset.val.features, dataset.val.labels)
        _, test_acc = evaluate(r.model, dataset.test.features, dataset.test.labels)
        model_cells.append({"arch": arch, "seed": seed, "status": "ok", "error": None,
                            "val_accuracy": val_acc, "test_accuracy": test_acc,
                            "best_epoch": r.history.best_epoch,
                            "stopped_epoch": r.history.stopped_epoch,
                            "num_parameters": r.model.num_parameters()})

    pairs = (list(product(cfg.seeds, cfg.seeds)) if cfg.cross_product
             else [(s, s) for s in cfg.seeds])
    names = _metric_names(cfg)
    cells = []
    for layer in layers:
        cache = {}
        width = _layer_width(cfg, dataset, layer)

        def prepared(arch, seed):
            if (arch, seed) not in cache:
                cache[arch, seed] = _prepared(runs[arch, seed], dataset, layer, width)
            return cache[arch, seed]

        for sa, sb in pairs:
            ra, rb = runs[cfg.arch_a, sa], runs[cfg.arch_b, sb]
            base = {"layer": layer, "seed_a": sa, "seed_b": sb, "paired": sa == sb}
            if not (ra.ok and rb.ok):
                err = ra.error or rb.error
                cells += [{**base, "metric": m, "value": None, "status": "failed", "error": err}
                          for m in names]
                continue
            try:
                xa = prepared(cfg.arch_a, sa)
                xb = prepared(cfg.arch_b, sb)
                fns = _cell_metrics(xa, xb, cfg)
            except (ValueError, ArithmeticError) as exc:
                err = f"{type(exc).__name__}: {exc}"
                cells += [{**base, "metric": m, "value": None, "status": "failed", "error": err}
                          for m in names]
                continue
            for m, fn in fns.items():
                try:
                    cells.append({**base, "metric": m, "value": float(fn()), "status": "ok",
                                  "error": None})
                except (ValueError, ArithmeticError) as exc:
                    cells.append({**base, "metric": m, "value": None, "status": "failed",
                                  "error": f"{type(exc).__name__}: {exc}"})

    summary, cross = [], []
    for layer in layers:
        for m in names:
            group = [c for c in cells if c["layer"] == layer and c["metric"] == m]
            for table, members in ((summary, [c for c in group if c["paired"]]), (cross, group)):
                vals = [c["value"] for c in members if c["status"] == "ok"]
                if not vals:
                    if table is summary:
                        notes.append(f"no successful cells for {m} at {layer}; group excluded")
                    continue
                table.append({"metric": m, "layer": layer, **aggregate(vals)})

    paired = {}
    ok_models = [c for c in model_cells if c["status"] == "ok"]
    for key in ("val_accuracy", "test_accuracy"):
        per_arch = {arch: {c["seed"]: c[key] for c in ok_models if c["arch"] == arch}
                    for arch in (cfg.arch_a, cfg.arch_b)}
        paired[f"{key}:{cfg.arch_a}-{cfg.arch_b}"] = paired_deltas(per_arch[cfg.arch_a],
                                                                   per_arch[cfg.arch_b])
    for layer in layers:
        vals = {}
        for c in cells:
            if c["layer"] == layer and c["paired"] and c["status"] == "ok":
                vals.setdefault(c["metric"], {})[c["seed_a"]] = c["value"]
        if "transfer_accuracy" in vals and "transfer_same_model" in vals:
            paired[f"transfer_gap:{layer}"] = paired_deltas(vals["transfer_same_model"],
                                                            vals["transfer_accuracy"])
    for note in notes:
        warnings.warn(note)
    config = cfg.echo()
    config["k_resolved"] = {
        layer: cfg.k if cfg.k is not None else default_k(_layer_width(cfg, dataset, layer),
                                                         dataset.val.n)
        for layer in layers}
    return AlignmentReport(config=config, cells=cells, model_cells=model_cells,
                           summary=summary, cross_summary=cross, paired=paired,
                           warnings=notes, provenance=provenance())


# -- single-model experiment suites ---------------------------------------

TREND_EPOCH = 5
TREND_FINAL_SLACK = 0.01


@dataclass
class SuiteResult:
    name: str
    data: dict
    files: list
    n_ok: int
    n_failed: int


def _suite_archs(name, cfg):
    if name == "ablation":
        return ("pgnn", "pgnn_nostruct")
    return tuple(dict.fromkeys((cfg.arch_a, cfg.arch_b)))


def _curve_rows(histories, n_epochs):
    rows = []
    for e in range(n_epochs):
        row = [e + 1]
        for key in ("train_loss", "val_loss", "val_acc"):
            agg = aggregate([getattr(h, key)[e] for h in histories])
            row += [agg["mean"], agg["std"]]
        rows.append(row + [len(histories)])
    return rows


CURVE_HEADER = ["epoch", "train_loss_mean", "train_loss_std", "val_loss_mean", "val_loss_std",
                "val_acc_mean", "val_acc_std", "n"]


def run_experiment_suite(name, cfg, out_dir):
    """Run one named experiment and write its CSV/JSON files into ``out_dir``.

    Curve suites train for the full epoch budget (early stopping is kept
    from cutting seeds off at different epochs) so every seed shares one
    epoch grid; final accuracies still come from the best-validation epoch.
    """
    if name not in SUITES:
        raise InvalidArgument(f"unknown suite {name!r}; expected one of {SUITES}")
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = dataset_from_spec(cfg.dataset)
    train_cfg = cfg.train
    if name in ("accuracy_curves", "ablation"):
        train_cfg = TrainConfig(**{**asdict(cfg.train), "patience": cfg.train.max_epochs})
    archs = _suite_archs(name, cfg)
    runs, notes = {}, []
    for arch in archs:
        results = multi_seed_run(arch, dataset, train_cfg, cfg.seeds, cfg.hidden,
                                 cfg.proj_rank, jobs=cfg.jobs)
        runs[arch] = [r for r in results if r.ok]
        notes += [f"{arch} seed {r.seed} failed: {r.error}" for r in results if not r.ok]
    n_ok = sum(len(v) for v in runs.values())
    n_failed = len(archs) * len(cfg.seeds) - n_ok

    final = {}
    for arch in archs:
        final[arch] = []
        for r in runs[arch]:
            _, val_acc = evaluate(r.model, dataset.val.features, dataset.val.labels)
            _, test_acc = evaluate(r.model, dataset.test.features, dataset.test.labels)
            final[arch].append({"seed": r.seed, "val_accuracy": val_acc, "test_accuracy": test_acc,
                                "best_epoch": r.history.best_epoch,
                                "stopped_epoch": r.history.stopped_epoch,
                                "num_parameters": r.model.num_parameters()})
    summary_rows = []
    for arch in archs:
        for key in ("test_accuracy", "val_accuracy"):
            vals = [f[key] for f in final[arch]]
            if vals:
                agg = aggregate(vals)
                summary_rows.append([key, arch, agg["mean"], agg["std"], agg["n"]])
    files = []

    def emit(fname, text):
        _write(out / fname, text)
        files.append(out / fname)

    data = {"suite": name, "archs": list(archs), "config": cfg.echo(), "final": final,
            "warnings": notes, "provenance": provenance()}
    data["config"]["suite_train"] = asdict(train_cfg)

    if name in ("accuracy_curves", "ablation"):
        curves = {}
        for arch in archs:
            hs = [r.history for r in runs[arch]]
            if not hs:
                continue
            curves[arch] = _curve_rows(hs, min(len(h.epochs) for h in hs))
            emit(f"curves_{name}_{arch}.csv", _csv(CURVE_HEADER, curves[arch]))
        data["curves"] = curves
        if name == "ablation" and len(curves) == 2:
            trend = ablation_trend(curves["pgnn"], curves["pgnn_nostruct"])
            data["trend"] = trend
            emit("trend.csv", _csv(["check", "epoch", "pgnn", "pgnn_nostruct", "slack", "holds"],
                                   [[t["check"], t["epoch"], t["pgnn"], t["pgnn_nostruct"],
                                     t["slack"], t["holds"]] for t in trend]))
    elif name == "init_sensitivity":
        emit("init_sensitivity.csv", _csv(
            ["arch", "seed", "test_accuracy", "val_accuracy", "best_epoch"],
            [[arch, f["seed"], f["test_accuracy"], f["val_accuracy"], f["best_epoch"]]
             for arch in archs for f in final[arch]]))
    elif name == "noise_resilience":
        table = noise_table(runs, dataset, cfg.noise_sigmas)
        data["noise"] = table
        header = ["sigma"] + [f"{arch}_{s}" for arch in archs for s in ("mean", "std")]
        rows = [[sigma] + [v for arch in archs for v in (table[arch]["mean"][i], table[arch]["std"][i])]
                for i, sigma in enumerate(table["sigmas"])]
        emit("noise_table.csv", _csv(header, rows))
    emit("summary.csv", _csv(["metric", "arch", "mean", "std", "n"], summary_rows))
    emit("report.json", json.dumps(data, indent=2, sort_keys=True) + "\n")
    for note in notes:
        warnings.warn(note)
    return SuiteResult(name=name, data=data, files=files, n_ok=n_ok, n_failed=n_failed)


def ablation_trend(pgnn_rows, nostruct_rows, epoch=TREND_EPOCH, slack=TREND_FINAL_SLACK):
    """Early- and final-epoch mean validation accuracy of PGNN vs its ablation.

    Rows are curve rows as produced for ``curves_*.csv``; column 5 holds the
    mean validation accuracy.
    """
    e = min(epoch, len(pgnn_rows), len(nostruct_rows))
    early_p, early_n = pgnn_rows[e - 1][5], nostruct_rows[e - 1][5]
    final_p, final_n = pgnn_rows[-1][5], nostruct_rows[-1][5]
    return [
        {"check": "early", "epoch": e, "pgnn": early_p, "pgnn_nostruct": early_n,
         "slack": 0.0, "holds": bool(early_p >= early_n)},
        {"check": "final", "epoch": len(pgnn_rows), "pgnn": final_p, "pgnn_nostruct": final_n,
         "slack": slack, "holds": bool(final_p >= final_n - slack)},
    ]


def noise_table(runs, dataset, sigmas):
    """Test accuracy under additive Gaussian input noise, per arch and sigma.

    Each seed uses one fixed noise draw scaled by sigma, so the sweep
    perturbs the same directions with growing magnitude.
    """
    x, y = dataset.test.features, dataset.test.labels
    table = {"sigmas": [float(s) for s in sigmas]}
    for arch, rs in runs.items():
        per_seed = {}
        for r in rs:
            accs = [evaluate(r.model, add_gaussian_noise(x, s, [r.seed, 7]), y)[1] for s in sigmas]
            per_seed[r.seed] = {"accuracy": accs, "clean": evaluate(r.model, x, y)[1]}
        cols = np.array([v["accuracy"] for v in per_seed.values()]).reshape(len(rs), len(sigmas))
        aggs = [aggregate(cols[:, i]) if len(rs) else {"mean": None, "std": None}
                for i in range(len(sigmas))]
        table[arch] = {"mean": [a["mean"] for a in aggs], "std": [a["std"] for a in aggs],
                       "per_seed": {str(k): v for k, v in per_seed.items()}}
    return table


def noise_monotone(arch_table):
    """True when accuracy never rises by more than the per-sigma seed std."""
    means, stds = arch_table["mean"], arch_table["std"]
    return all(means[i + 1] <= means[i] + max(stds[i], stds[i + 1])
               for i in range(len(means) - 1))
