"""Command-line entry point.

Exit codes: 0 ok, 1 usage/config error, 2 numerical divergence,
3 every protocol cell failed.
"""
import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .activations import ActivationSet, normalize, project_dims, read_raf, write_raf
from .data import dataset_from_spec
from .errors import FormatError, NumericalError
from .metrics import MAP_KINDS, apply_map, cka, fit_alignment_map, subspace_overlap
from .models import ARCHS, DEFAULT_HIDDEN, DEFAULT_PROJ_RANK, build, extract, load_checkpoint, save_checkpoint
from .probe import DEFAULT_LAMBDA, DEFAULT_SPLITS, transfer_eval
from .protocol import (DEFAULT_DATASET, METRICS, SUITES, ProtocolConfig, run_experiment_suite,
                       run_protocol)
from .training import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_ALL_FAILED = 0, 1, 2, 3
INIT_SENSITIVITY_SEEDS = list(range(20))


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def load_config(path):
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file {path} not found")
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        cfg = tomllib.loads(text)
    else:
        cfg = json.loads(text)
    cfg.pop("command", None)
    return cfg


def _ints(text):
    return [int(t) for t in text.split(",") if t.strip()]


def _strs(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _dataset_spec(args, cfg):
    spec = dict(cfg.get("dataset", DEFAULT_DATASET))
    if getattr(args, "dataset", None) == "fashion":
        spec = {"kind": "fashion", "path": args.data_dir or spec.get("path", "."),
                "seed": spec.get("seed", 0), "limit": args.limit}
    elif getattr(args, "dataset", None) == "synth" and spec.get("kind") != "synth":
        spec = dict(DEFAULT_DATASET)
    return spec


def _train_overrides(args, cfg):
    t = dict(cfg.get("train", {}))
    for flag, key in (("epochs", "max_epochs"), ("lr", "learning_rate"),
                      ("batch_size", "batch_size"), ("patience", "patience")):
        if getattr(args, flag, None) is not None:
            t[key] = getattr(args, flag)
    return t


def _add_train_flags(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--hidden", type=_ints, help="comma-separated hidden widths")
    p.add_argument("--proj-rank", type=int)


def cmd_train(args):
    cfg = load_config(args.config)
    arch = args.arch or cfg.get("arch", "pgnn")
    if arch not in ARCHS:
        raise UsageError(f"invalid arch {arch!r}; choose from {', '.join(ARCHS)}")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    hidden = args.hidden or cfg.get("hidden", list(DEFAULT_HIDDEN))
    proj_rank = args.proj_rank or cfg.get("proj_rank", DEFAULT_PROJ_RANK)
    spec = _dataset_spec(args, cfg)
    tcfg = TrainConfig(**{**_train_overrides(args, cfg), "seed": seed})
    resolved = {"command": "train", "arch": arch, "seed": seed, "hidden": list(hidden),
                "proj_rank": proj_rank, "dataset": spec, "train": asdict(tcfg)}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", resolved)
    dataset = dataset_from_spec(spec)
    model = build(arch, (dataset.input_dim, *hidden, dataset.num_classes), seed, proj_rank)
    model, hist = train(model, dataset, tcfg)
    save_checkpoint(model, out / "model.ckpt", extra={"dataset": spec, "train": asdict(tcfg),
                                                         "best_epoch": hist.best_epoch})
    (out / "history.csv").write_text(hist.to_csv(), encoding="utf-8")
    print(f"trained {arch} seed={seed}: best_epoch={hist.best_epoch} "
          f"val_acc={hist.val_acc[hist.best_epoch - 1]:.4f} -> {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_extract(args):
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint {ckpt} not found")
    model, extra = load_checkpoint(ckpt)
    cfg = load_config(args.config)
    spec = _dataset_spec(args, cfg) if (args.dataset or cfg) else extra["dataset"]
    layers = args.layers or [model.layer_ids[-2]]
    bad = [l for l in layers if l not in model.layer_ids]
    if bad:
        raise UsageError(f"invalid layer id(s) {bad}; valid ids: {', '.join(model.layer_ids)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", {"command": "extract", "checkpoint": str(ckpt),
                                               "layers": layers, "dataset": spec})
    dataset = dataset_from_spec(spec)
    best_epoch = extra.get("best_epoch", 0)
    for layer in layers:
        feats = extract(model, dataset.val.features, layer)
        meta = {"model_id": model.arch_id, "layer_id": layer, "seed": model.seed,
                "dataset_id": dataset.dataset_id, "epoch": best_epoch}
        write_raf(ActivationSet(feats, dataset.val.labels, dataset.num_classes, meta),
                  out / f"{layer}.raf")
        print(f"{layer}: n={feats.shape[0]} d={feats.shape[1]} -> {out / (layer + '.raf')}")
    return EXIT_OK


def _load_pair(args):
    a, b = read_raf(args.a), read_raf(args.b)
    if a.n != b.n:
        raise UsageError(f"sample counts differ: {a.n} vs {b.n}")
    if not args.raw:
        target = min(a.d, b.d)
        a = normalize(project_dims(a, target))[0]
        b = normalize(project_dims(b, target))[0]
    return a, b


def cmd_compare(args):
    a, b = _load_pair(args)
    result = {"a": str(args.a), "b": str(args.b), "preprocessed": not args.raw,
              "cka": cka(a, b)}
    if a.d == b.d:
        sub = subspace_overlap(a, b, args.k)
        result.update(k=sub.k, overlap=sub.overlap, cosines=sub.cosines.tolist())
    for kind in MAP_KINDS:
        if kind == "procrustes" and a.d != b.d:
            continue
        m = fit_alignment_map(a, b, kind)
        result[f"{kind}_residual"] = m.fit_residual
        if kind == "cca":
            result["cca_correlations"] = m.extras["correlations"]
    for key in ("cka", "overlap", "procrustes_residual", "least_squares_residual", "cca_residual"):
        if key in result:
            print(f"{key:<24}{result[key]:.10f}")
    if "k" in result:
        print(f"{'k':<24}{result['k']}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "compare.json", result)
        _write_json(out / "resolved_config.json", {"command": "compare", "a": str(args.a),
                                                   "b": str(args.b), "k": args.k, "raw": args.raw})
    return EXIT_OK


def cmd_probe_transfer(args):
    a, b = _load_pair(args)
    if not np.array_equal(a.labels, b.labels):
        raise UsageError("label vectors differ between the two files")
    target = b
    if args.align:
        target = apply_map(fit_alignment_map(b, a, "procrustes"), b)
    res = transfer_eval(a, target, args.lam, args.splits, args.seed)
    print(f"transfer_accuracy   {res['mean']:.6f} +/- {res['std']:.6f}")
    print(f"same_model_accuracy {res['same_model_mean']:.6f} +/- {res['same_model_std']:.6f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "transfer.json", {**res, "aligned": args.align})
        _write_json(out / "resolved_config.json", {
            "command": "probe-transfer", "a": str(args.a), "b": str(args.b), "lambda": args.lam,
            "splits": args.splits, "seed": args.seed, "align": args.align, "raw": args.raw})
    return EXIT_OK


def _protocol_config(args, suite=None):
    cfg = load_config(args.config)
    if args.seeds is not None:
        cfg["seeds"] = args.seeds
    elif args.seed is not None:
        cfg["seeds"] = [args.seed]
    elif suite == "init_sensitivity" and "seeds" not in cfg:
        cfg["seeds"] = INIT_SENSITIVITY_SEEDS
    for flag, key in (("arch_a", "arch_a"), ("arch_b", "arch_b"), ("layers", "layers"),
                      ("metrics", "metrics"), ("k", "k"), ("jobs", "jobs"),
                      ("hidden", "hidden"), ("proj_rank", "proj_rank"),
                      ("sigmas", "noise_sigmas"), ("lam", "probe_lambda"),
                      ("splits", "probe_splits")):
        if getattr(args, flag, None) is not None:
            cfg[key] = getattr(args, flag)
    if args.dataset is not None:
        cfg["dataset"] = _dataset_spec(args, cfg)
    cfg["train"] = _train_overrides(args, cfg)
    known = set(ProtocolConfig.__dataclass_fields__)
    unknown = set(cfg) - known
    if unknown:
        raise UsageError(f"unknown config keys {sorted(unknown)}")
    return ProtocolConfig(**cfg)


def _resolved(cfg, command, **extra):
    d = asdict(cfg)
    d["command"] = command
    d.update(extra)
    return d


def cmd_protocol(args):
    cfg = _protocol_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", _resolved(cfg, "protocol"))
    report = run_protocol(cfg)
    report.write(out)
    print(f"{report.n_ok} cells ok, {report.n_failed} failed -> {out}")
    for row in report.summary:
        print(f"{row['metric']:<28}{row['layer']:<8}{row['mean']:.6f} +/- {row['std']:.6f}")
    return EXIT_OK if report.n_ok else EXIT_ALL_FAILED


def cmd_suite(args):
    cfg = _protocol_config(args, suite=args.name)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", _resolved(cfg, "suite", name=args.name))
    res = run_experiment_suite(args.name, cfg, out)
    for f in res.files:
        print(f"wrote {f}")
    if res.name == "ablation" and "trend" in res.data:
        for t in res.data["trend"]:
            status = "reproduced" if t["holds"] else "not reproduced"
            print(f"trend {t['check']:<6} epoch {t['epoch']:>3}: pgnn={t['pgnn']:.4f} "
                  f"nostruct={t['pgnn_nostruct']:.4f} ({status})")
    return EXIT_OK if res.n_ok else EXIT_ALL_FAILED


def _add_protocol_flags(p):
    p.add_argument("--config")
    p.add_argument("--out", default="protocol_out")
    p.add_argument("--seeds", type=_ints, help="comma-separated seeds, e.g. 0,1,2")
    p.add_argument("--seed", type=int, help="shorthand for a single-seed run")
    p.add_argument("--arch-a", choices=ARCHS)
    p.add_argument("--arch-b", choices=ARCHS)
    p.add_argument("--layers", type=_strs)
    p.add_argument("--metrics", type=_strs, help=f"subset of {','.join(METRICS)}")
    p.add_argument("--k", type=int)
    p.add_argument("--sigmas", type=lambda s: [float(t) for t in s.split(",")])
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--splits", type=int)
    p.add_argument("--dataset", choices=("synth", "fashion"))
    p.add_argument("--data-dir")
    p.add_argument("--limit", type=int)
    p.add_argument("--jobs", type=int)
    _add_train_flags(p)


def build_parser():
    parser = _Parser(prog="repalign", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one model and write a checkpoint")
    p.add_argument("--arch", help=f"one of {', '.join(ARCHS)}")
    p.add_argument("--dataset", choices=("synth", "fashion"))
    p.add_argument("--data-dir")
    p.add_argument("--limit", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--out", default="train_out")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="write validation-set activations as RAF files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layers", type=_strs)
    p.add_argument("--dataset", choices=("synth", "fashion"))
    p.add_argument("--data-dir")
    p.add_argument("--limit", type=int)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, help="accepted for uniformity; extraction is deterministic")
    p.add_argument("--out", default="extract_out")
    p.set_defaults(func=cmd_extract)

    for name, func, help_ in (("compare", cmd_compare, "CKA, overlap and map residuals"),
                              ("probe-transfer", cmd_probe_transfer, "cross-model probe accuracy")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("a")
        p.add_argument("b")
        p.add_argument("--raw", action="store_true", help="skip project_dims + normalize")
        p.add_argument("--out")
        p.add_argument("--seed", type=int, default=0)
        if name == "compare":
            p.add_argument("--k", type=int)
        else:
            p.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
            p.add_argument("--splits", type=int, default=DEFAULT_SPLITS)
            p.add_argument("--align", action="store_true",
                           help="Procrustes-align b onto a before scoring")
        p.set_defaults(func=func)

    p = sub.add_parser("protocol", help="full two-architecture alignment protocol")
    _add_protocol_flags(p)
    p.set_defaults(func=cmd_protocol)

    p = sub.add_parser("suite", help="run a named experiment suite")
    p.add_argument("name", choices=SUITES)
    _add_protocol_flags(p)
    p.set_defaults(func=cmd_suite)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, ValueError, FormatError, OSError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
