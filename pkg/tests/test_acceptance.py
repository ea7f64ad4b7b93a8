"""Acceptance gate: one group of tests per criterion.

The terminal summary prints one PASS/FAIL line per criterion number.
Slow criteria (training-based) run with the default suite; nothing is
deselected by default.
"""
import json
import time
from fractions import Fraction

import numpy as np
import pytest
from conftest import random_orthogonal

from repalign.activations import ActivationSet
from repalign.cli import main
from repalign.data import make_synthetic
from repalign.metrics import apply_map, cka, fit_alignment_map, principal_angles, subspace_overlap
from repalign.models import backward, build, extract
from repalign.numerics import orthonormal_basis_topk
from repalign.probe import probe_objective, transfer_eval
from repalign.protocol import (ProtocolConfig, noise_monotone, run_experiment_suite,
                               run_protocol)
from repalign.training import TrainConfig, train

crit = pytest.mark.criterion
HEADLINE_DATA = {"kind": "synth", "r": 4, "d": 32, "n": 4000, "num_classes": 4,
                 "noise": 0.0, "seed": 0}


# -- literal oracles --------------------------------------------------------

def oracle_cka(x, y):
    n = x.shape[0]
    h = np.eye(n) - np.ones((n, n)) / n
    xc, yc = h @ x, h @ y
    num = np.linalg.norm(yc.T @ xc, "fro") ** 2
    den = np.linalg.norm(xc.T @ xc, "fro") * np.linalg.norm(yc.T @ yc, "fro")
    return num / den


def oracle_overlap(x, y, k):
    # top-k eigenvectors of the centered covariances, then cos^2 via an
    # eigen-decomposition of M^T M instead of an SVD
    def basis(a):
        a = a - a.mean(axis=0)
        vals, vecs = np.linalg.eigh(a.T @ a)
        return vecs[:, np.argsort(vals)[::-1][:k]]

    m = basis(x).T @ basis(y)
    cos2 = np.clip(np.linalg.eigvalsh(m.T @ m), 0.0, 1.0)
    return float(np.sum(cos2) / k)


def test_oracle_fixture_exact():
    x = [[1, 0], [0, 1], [1, 1]]
    y = [[1, 1], [0, 1], [1, 0]]

    def centered(a):
        cols = list(zip(*a))
        means = [sum(Fraction(v) for v in c) / len(c) for c in cols]
        return [[Fraction(v) - m for v, m in zip(row, means)] for row in a]

    def gram(a, b):  # a^T b
        return [[sum(a[r][i] * b[r][j] for r in range(len(a))) for j in range(len(b[0]))]
                for i in range(len(a[0]))]

    def fro2(m):
        return sum(v * v for row in m for v in row)

    xc, yc = centered(x), centered(y)
    num = fro2(gram(yc, xc))
    den2 = fro2(gram(xc, xc)) * fro2(gram(yc, yc))
    # num / sqrt(den2) == 7/10, checked without leaving the rationals
    assert num * num * 100 == 49 * den2
    assert abs(cka(np.array(x, float), np.array(y, float)) - 0.7) <= 1e-12


@crit(1, "metric oracle equivalence (100 instances, 1e-10, <10 s)")
def test_c1_oracle_equivalence():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(3, 51))
        d = int(rng.integers(1, 11))
        x = rng.standard_normal((n, d)) * rng.uniform(0.1, 10)
        y = x @ rng.standard_normal((d, d)) + 0.5 * rng.standard_normal((n, d))
        worst = max(worst, abs(cka(x, y) - oracle_cka(x, y)))
        k = int(rng.integers(1, min(d, n - 1) + 1))
        worst = max(worst, abs(subspace_overlap(x, y, k).overlap - oracle_overlap(x, y, k)))
    assert worst <= 1e-10
    assert time.perf_counter() - start < 10.0


@crit(2, "CKA invariance under c*XQ (50 Q x 3 scales, 1e-8)")
def test_c2_cka_invariance():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        n, d = int(rng.integers(5, 60)), int(rng.integers(2, 12))
        x = rng.standard_normal((n, d))
        y = rng.standard_normal((n, int(rng.integers(1, 12))))
        q = random_orthogonal(rng, d)
        base = cka(x, y)
        for c in (0.1, 1.0, 10.0):
            worst = max(worst, abs(base - cka(c * x @ q, y)))
    assert worst <= 1e-8


def class_blobs(rng, n_per=60, d=12, c=4):
    y = np.repeat(np.arange(c), n_per)
    x = 0.7 * rng.standard_normal((c * n_per, d))
    x[np.arange(c * n_per), y] += 3.0
    return x, y


@crit(3, "Procrustes recovers Q (1e-6) and aligned transfer within 0.02")
def test_c3_procrustes_recovery():
    rng = np.random.default_rng(3)
    for _ in range(10):
        x, y = class_blobs(rng)
        q = random_orthogonal(rng, x.shape[1])
        t = fit_alignment_map(x, x @ q, "procrustes").transform
        assert np.linalg.norm(t - q) <= 1e-6
    x, y = class_blobs(rng)
    a = ActivationSet(x, y, 4)
    b = ActivationSet(x @ random_orthogonal(rng, 12), y, 4)
    raw = transfer_eval(a, b, 1e-3, 5, 0)
    aligned = transfer_eval(a, apply_map(fit_alignment_map(b, a, "procrustes"), b), 1e-3, 5, 0)
    assert abs(aligned["mean"] - aligned["same_model_mean"]) <= 0.02
    assert raw["mean"] < aligned["mean"]


def rel_err(a, n):
    return np.linalg.norm(a - n) / max(np.linalg.norm(n), 1e-12)


@crit(4, "backward and probe gradients vs central differences (rel 1e-4)")
@pytest.mark.parametrize("arch", ["mlp", "pgnn", "pgnn_nostruct"])
def test_c4_model_gradients(arch):
    rng = np.random.default_rng(4)
    model = build(arch, (4, 6, 3), seed=11, proj_rank=3)
    assert model.num_parameters() <= 200
    x, y = rng.standard_normal((6, 4)), np.array([0, 1, 2, 2, 1, 0])
    _, grads = backward(model, x, y)
    h = 1e-6
    for layer, g in zip(model.layers, grads):
        for name, p in layer.params.items():
            num = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                fp = backward(model, x, y)[0]
                p[idx] = old - h
                fm = backward(model, x, y)[0]
                p[idx] = old
                num[idx] = (fp - fm) / (2 * h)
            assert rel_err(g[name], num) <= 1e-4, (name, rel_err(g[name], num))


@crit(4, "backward and probe gradients vs central differences (rel 1e-4)")
def test_c4_probe_gradient():
    rng = np.random.default_rng(5)
    x, y = rng.standard_normal((10, 5)), rng.integers(0, 3, 10)
    w, b = rng.standard_normal((5, 3)), rng.standard_normal(3)
    _, gw, gb = probe_objective(w, b, x, y, 0.1)
    h = 1e-6
    for p, g in ((w, gw), (b, gb)):
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            fp = probe_objective(w, b, x, y, 0.1)[0]
            p[idx] = old - h
            fm = probe_objective(w, b, x, y, 0.1)[0]
            p[idx] = old
            num[idx] = (fp - fm) / (2 * h)
        assert rel_err(g, num) <= 1e-4


@crit(5, "structured S idempotent/symmetric (1e-8) and frozen over 50 epochs")
def test_c5_structured_invariants():
    ds = make_synthetic(r=3, d=12, n=800, num_classes=3, noise=0.05, seed=2)
    model = build("pgnn", (12, 24, 24, 3), seed=5, proj_rank=8)
    layers = [l for l in model.layers if hasattr(l, "s")]
    assert layers
    before = [l.s.tobytes() for l in layers]
    for l in layers:
        assert np.abs(l.s @ l.s - l.s).max() <= 1e-8 and np.abs(l.s - l.s.T).max() <= 1e-8
    _, hist = train(model, ds, TrainConfig(max_epochs=50, patience=50))
    assert hist.stopped_epoch == 50
    for l, raw in zip(layers, before):
        assert l.s.tobytes() == raw
        assert np.abs(l.s @ l.s - l.s).max() <= 1e-8 and np.abs(l.s - l.s.T).max() <= 1e-8


@crit(6, "synthetic ground truth: input overlap >= 0.999, headline probe >= 0.9")
def test_c6_input_subspace():
    ds = make_synthetic(**{k: v for k, v in HEADLINE_DATA.items() if k != "kind"})
    x = ds.train.features - ds.train.features.mean(axis=0)
    cos = principal_angles(orthonormal_basis_topk(x, 4), ds.mixing)
    assert np.mean(cos ** 2) >= 0.999


@crit(6, "synthetic ground truth: input overlap >= 0.999, headline probe >= 0.9")
@pytest.mark.parametrize("arch", ["mlp", "pgnn", "pgnn_nostruct"])
def test_c6_headline_probe(arch, record_property):
    ds = make_synthetic(**{k: v for k, v in HEADLINE_DATA.items() if k != "kind"})
    model = build(arch, (32, 128, 128, 4), seed=0)
    _, hist = train(model, ds, TrainConfig(max_epochs=50))
    assert hist.val_acc[hist.best_epoch - 1] >= 0.95
    feats = ActivationSet(extract(model, ds.val.features, "h2"), ds.val.labels, 4)
    res = transfer_eval(feats, feats, 1e-3, 5, 0)
    assert res["same_model_mean"] >= 0.9


@crit(7, "self-comparison CKA and overlap = 1 +/- 1e-8 at every layer")
def test_c7_self_comparison():
    cfg = ProtocolConfig(dataset=dict(HEADLINE_DATA, noise=0.05), arch_a="pgnn", arch_b="pgnn",
                         seeds=[0], layers=["h1", "h2", "logits"], metrics=["cka", "overlap"],
                         train={"max_epochs": 5})
    rep = run_protocol(cfg)
    assert rep.n_ok == 6
    for c in rep.cells:
        assert abs(c["value"] - 1.0) <= 1e-8, c


TREND_EPOCHS = 30


@crit(8, "ablation trend table emitted (5 seeds), reproduced or not recorded")
@pytest.mark.slow
def test_c8_ablation_trend(tmp_path, request):
    cfg = ProtocolConfig(dataset=dict(HEADLINE_DATA, noise=0.05), seeds=[0, 1, 2, 3, 4],
                         train={"max_epochs": TREND_EPOCHS})
    start = time.perf_counter()
    res = run_experiment_suite("ablation", cfg, tmp_path)
    elapsed = time.perf_counter() - start
    assert res.n_ok == 10 and (tmp_path / "trend.csv").exists()
    lines = [f"{'check':<6} {'epoch':>5} {'pgnn':>8} {'nostruct':>8}  status"]
    for t in res.data["trend"]:
        status = "reproduced" if t["holds"] else "not reproduced"
        lines.append(f"{t['check']:<6} {t['epoch']:>5} {t['pgnn']:>8.4f} "
                     f"{t['pgnn_nostruct']:>8.4f}  {status}")
    lines.append(f"runtime {elapsed:.1f} s")
    request.node.user_properties.append(("note", 8, "\n".join(lines)))
    print("\n".join(lines))
    assert elapsed < 15 * 60


@crit(9, "noise sweep non-increasing within std; sigma=0 equals clean accuracy")
@pytest.mark.slow
def test_c9_noise_resilience(tmp_path, request):
    cfg = ProtocolConfig(dataset=dict(HEADLINE_DATA, noise=0.05), seeds=[0, 1, 2, 3, 4],
                         noise_sigmas=[0.0, 0.1, 0.2, 0.3], train={"max_epochs": TREND_EPOCHS})
    res = run_experiment_suite("noise_resilience", cfg, tmp_path)
    table = res.data["noise"]
    lines = []
    for arch in ("mlp", "pgnn"):
        lines.append(f"{arch:<5} " + "  ".join(f"{m:.4f}+/-{s:.4f}"
                                              for m, s in zip(table[arch]["mean"], table[arch]["std"])))
        for v in table[arch]["per_seed"].values():
            assert v["accuracy"][0] == v["clean"]
    request.node.user_properties.append(("note", 9, "\n".join(lines)))
    for arch in ("mlp", "pgnn"):
        assert noise_monotone(table[arch]), table[arch]


CLI_CONFIG = {"dataset": {"kind": "synth", "r": 2, "d": 8, "n": 400, "num_classes": 2,
                          "noise": 0.05, "seed": 0},
              "hidden": [16, 16], "proj_rank": 4, "train": {"max_epochs": 3}}


def _bundle(path):
    return {p.relative_to(path).as_posix(): p.read_bytes()
            for p in sorted(path.rglob("*")) if p.is_file()}


@crit(10, "repeated CLI invocations give byte-identical bundles")
def test_c10_cli_determinism(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(CLI_CONFIG))

    def invocations(out):
        return [
            ["train", "--arch", "pgnn", "--seed", "2", "--config", str(cfg), "--out", f"{out}/train"],
            ["extract", "--checkpoint", f"{out}/train/model.ckpt", "--layers", "h1,h2",
             "--out", f"{out}/extract"],
            ["compare", f"{out}/extract/h1.raf", f"{out}/extract/h2.raf", "--out", f"{out}/compare"],
            ["probe-transfer", f"{out}/extract/h1.raf", f"{out}/extract/h2.raf", "--align",
             "--out", f"{out}/transfer"],
            ["protocol", "--config", str(cfg), "--seeds", "0,1", "--out", f"{out}/protocol"],
            ["suite", "ablation", "--config", str(cfg), "--seeds", "0,1", "--out", f"{out}/ablation"],
            ["suite", "noise_resilience", "--config", str(cfg), "--seeds", "0", "--out", f"{out}/noise"],
        ]

    out = tmp_path / "run"
    snapshots = []
    for _ in range(2):
        for argv in invocations(out):
            assert main(argv) == 0, argv
        snapshots.append(_bundle(out))
    assert snapshots[0] == snapshots[1]
    assert len(snapshots[0]) >= 15
