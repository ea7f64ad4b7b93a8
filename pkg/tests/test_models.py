import numpy as np
import pytest

from repalign.errors import InvalidArgument, NumericalError, ShapeMismatch
from repalign.models import (Dense, StructuredProjection, backward, build, checkpoint_bytes,
                             extract, forward, load_checkpoint, save_checkpoint)


def numeric_grads(model, x, y, h=1e-5):
    out = []
    for layer in model.layers:
        g = {}
        for name, p in layer.params.items():
            num = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                fp, _ = backward(model, x, y)
                p[idx] = old - h
                fm, _ = backward(model, x, y)
                p[idx] = old
                num[idx] = (fp - fm) / (2 * h)
            g[name] = num
        out.append(g)
    return out


def flat(grads):
    return np.concatenate([g[k].ravel() for g in grads for k in sorted(g)])


@pytest.mark.parametrize("arch", ["mlp", "pgnn", "pgnn_nostruct"])
def test_gradients_match_finite_differences(arch, rng):
    model = build(arch, (3, 4, 3), seed=7, proj_rank=2)
    assert model.num_parameters() <= 200
    x = rng.standard_normal((4, 3))
    y = np.array([0, 2, 1, 2])
    _, grads = backward(model, x, y)
    a, n = flat(grads), flat(numeric_grads(model, x, y))
    assert np.linalg.norm(a - n) <= 1e-4 * np.linalg.norm(n)


def test_zero_dense_gives_bias():
    layer = Dense(3, 2, "identity", {"w": np.zeros((2, 3)), "b": np.array([0.5, -1.0])})
    out, _ = layer.forward(np.zeros((4, 3)))
    np.testing.assert_array_equal(out, np.tile([0.5, -1.0], (4, 1)))


def test_full_rank_structured_is_linear(rng):
    layer = StructuredProjection(3, 4, proj_rank=4, corrective_hidden=2, activation="identity")
    layer.init(seed=0, index=0)
    layer.params["u2"][:] = 0.0
    layer.params["b"][:] = 0.0
    np.testing.assert_allclose(layer.s, np.eye(4), atol=1e-12)
    x = rng.standard_normal((5, 3))
    out, _ = layer.forward(x)
    np.testing.assert_allclose(out, x @ layer.params["w"].T, atol=1e-12)


def test_hand_computed_mlp():
    model = build("mlp", (2, 2, 2), seed=0)
    model.layers[0].params = {"w": np.array([[1.0, -1.0], [0.5, 2.0]]), "b": np.array([0.0, -1.0])}
    model.layers[1].params = {"w": np.array([[1.0, 1.0], [-1.0, 2.0]]), "b": np.array([0.5, 0.0])}
    # h = relu([1-2, 0.5+4-1]) = [0, 3.5]; logits = [3.5+0.5, 7.0]
    acts = forward(model, np.array([[1.0, 2.0]]))
    np.testing.assert_array_equal(acts[0], [[0.0, 3.5]])
    np.testing.assert_array_equal(acts[1], [[4.0, 7.0]])


def test_symmetric_inputs_symmetric_gradients(rng):
    model = build("pgnn", (2, 4, 3), seed=3, proj_rank=2)
    model.layers[0].params["u2"][:] = 0.0
    col = rng.standard_normal((6, 1))
    x = np.hstack([col, col])
    _, grads = backward(model, x, np.array([0, 1, 2, 0, 1, 2]))
    g = grads[0]
    np.testing.assert_array_equal(g["w"][:, 0], g["w"][:, 1])
    np.testing.assert_array_equal(g["u1"], 0.0)
    np.testing.assert_array_equal(g["c1"], 0.0)


def test_saturated_loss_gradient_vanishes():
    model = build("mlp", (2, 2), seed=0)
    model.layers[0].params = {"w": 100.0 * np.eye(2), "b": np.zeros(2)}
    loss, grads = backward(model, np.eye(2), np.array([0, 1]))
    assert loss < 1e-40
    assert np.linalg.norm(flat(grads)) < 1e-40


def test_build_deterministic():
    a, b = build("mlp", (5, 8, 3), 11), build("mlp", (5, 8, 3), 11)
    for (_, _, p), (_, _, q) in zip(a.parameters(), b.parameters()):
        assert p.tobytes() == q.tobytes()
    c = build("mlp", (5, 8, 3), 12)
    assert not np.array_equal(a.layers[0].params["w"], c.layers[0].params["w"])


def test_projector_properties():
    model = build("pgnn", (10, 16, 16, 3), seed=4, proj_rank=6)
    for layer in model.layers[:-1]:
        s = layer.s
        assert np.linalg.norm(s @ s - s) <= 1e-8
        np.testing.assert_array_equal(s, s.T)
        assert round(np.trace(s)) == 6
        assert "s" not in layer.params


def test_nostruct_is_dense_relu_stack(rng):
    m = build("pgnn_nostruct", (5, 6, 4, 3), seed=2)
    p = build("pgnn", (5, 6, 4, 3), seed=2)
    x = rng.standard_normal((7, 5))
    h = x
    for i, layer in enumerate(m.layers):
        # same W, b draws as the structured model
        np.testing.assert_array_equal(layer.params["w"], p.layers[i].params["w"])
        h = h @ layer.params["w"].T + layer.params["b"]
        if i < 2:
            h = np.maximum(h, 0)
    np.testing.assert_allclose(forward(m, x)[-1], h, atol=1e-14)


def test_forward_shapes_and_determinism(rng):
    model = build("pgnn", (4, 8, 8, 3), seed=0)
    x = rng.standard_normal((9, 4))
    acts = forward(model, x)
    assert [a.shape for a in acts] == [(9, 8), (9, 8), (9, 3)]
    assert all(np.array_equal(a, b) for a, b in zip(acts, forward(model, x)))
    assert model.layer_ids == ["h1", "h2", "logits"]
    np.testing.assert_array_equal(extract(model, x, "h2"), acts[1])
    with pytest.raises(InvalidArgument):
        extract(model, x, "h3")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_forward_errors():
    model = build("mlp", (4, 3, 2), seed=0)
    with pytest.raises(ShapeMismatch):
        forward(model, np.ones((2, 5)))
    model.layers[0].params["w"][:] = 1e300
    with pytest.raises(NumericalError):
        forward(model, np.full((2, 4), 1e300))


@pytest.mark.parametrize("dims,arch", [((4,), "mlp"), ((4, 0, 2), "mlp"), ((4, 2), "cnn")])
def test_build_rejects(dims, arch):
    with pytest.raises(InvalidArgument):
        build(arch, dims, 0)


def test_parameter_counts_differ():
    mlp, pgnn = build("mlp", (32, 128, 128, 4), 0), build("pgnn", (32, 128, 128, 4), 0)
    assert mlp.num_parameters() == 32 * 128 + 128 + 128 * 128 + 128 + 128 * 4 + 4
    assert pgnn.num_parameters() > mlp.num_parameters()


@pytest.mark.parametrize("arch", ["mlp", "pgnn"])
def test_checkpoint_roundtrip(tmp_path, rng, arch):
    model = build(arch, (6, 8, 3), seed=5, proj_rank=3)
    save_checkpoint(model, tmp_path / "m.ckpt", extra={"note": 1})
    loaded, extra = load_checkpoint(tmp_path / "m.ckpt")
    assert extra == {"note": 1}
    for (_, _, p), (_, _, q) in zip(model.parameters(), loaded.parameters()):
        np.testing.assert_array_equal(q, p.astype(np.float32))
    if arch == "pgnn":
        np.testing.assert_array_equal(loaded.layers[0].s, model.layers[0].s)
    assert checkpoint_bytes(loaded, {"note": 1}) == (tmp_path / "m.ckpt").read_bytes()


def test_checkpoint_truncated(tmp_path):
    from repalign.errors import FormatError
    save_checkpoint(build("mlp", (3, 2), 0), tmp_path / "m.ckpt")
    blob = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(blob[:-4])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.ckpt")
