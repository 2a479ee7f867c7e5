import numpy as np
import pytest

from ggd.datakit import FormatError, LabeledBatch, colorize
from ggd.diffcore import ContractError, LayerKind, ShapeError, Tape, backward, cross_entropy_soft
from ggd.engine import Optimizer, OptimizerConfig
from ggd.modelzoo import (
    ModelKind,
    build_background_model,
    build_mlp,
    build_simplenet,
    build_static_distribution,
    clone_architecture,
    load_model,
    model_from_bytes,
    model_to_bytes,
    save_model,
)


def batch_of(x, labels=None, C=10):
    n = len(x)
    labels = np.zeros(n, int) if labels is None else np.asarray(labels)
    return LabeledBatch(np.asarray(x, dtype=float), labels, labels.copy(), C)


def fit(model, batch, steps, lr=0.05):
    opt = Optimizer(model.parameters(), OptimizerConfig("adam", lr))
    for _ in range(steps):
        tape = Tape()
        opt.zero_grad()
        loss = cross_entropy_soft(model.forward(batch, tape), batch.onehot, tape)
        backward(tape, loss)
        opt.step()
    return (model.predict(batch) == batch.labels).mean()


def test_simplenet_1k_four_block_shape():
    m = build_simplenet(1, [16, 32, 64, 128], 10, seed=0)
    convs = [l for l in m.layers if l.kind is LayerKind.CONV2D]
    assert [l.out_features for l in convs] == [16, 32, 64, 128]
    assert all(l.kernel == 1 for l in convs)
    assert m.layers[-2].kind is LayerKind.GLOBAL_AVG_POOL and m.layers[-1].kind is LayerKind.LINEAR
    assert m.kind is ModelKind.LOW_CAPACITY


def test_reduced_simplenet_output():
    m = build_simplenet(1, [8, 16], 10, seed=0)
    out = m.logits(batch_of(np.random.default_rng(0).uniform(size=(3, 3, 5, 5))))
    assert out.shape == (3, 10) and np.isfinite(out).all()


def test_1k_constant_input_size_invariant():
    m = build_simplenet(1, [8, 16], 10, seed=1)
    color = np.array([0.2, 0.7, 0.4])[None, :, None, None]
    a = m.logits(batch_of(np.ones((1, 3, 4, 4)) * color))
    b = m.logits(batch_of(np.ones((1, 3, 9, 9)) * color))
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_1k_transpose_invariant():
    m = build_simplenet(1, [8, 16], 10, seed=2)
    x = np.random.default_rng(2).uniform(size=(2, 3, 5, 5))
    np.testing.assert_allclose(m.logits(batch_of(x)), m.logits(batch_of(x.transpose(0, 1, 3, 2))), atol=1e-12)


def test_simplenet_validation():
    with pytest.raises(ContractError):
        build_simplenet(5, [4], 10)
    with pytest.raises(ContractError):
        build_simplenet(1, [], 10)


def test_init_seed_deterministic():
    a = build_simplenet(3, [4, 8], 10, seed=5)
    b = build_simplenet(3, [4, 8], 10, seed=5)
    assert all(p.data.tobytes() == q.data.tobytes() for p, q in zip(a.parameters(), b.parameters()))
    for layer in a.layers:
        if "bias" in layer.params:
            assert not layer.params["bias"].data.any()
        if layer.kind is LayerKind.LINEAR:
            w = layer.params["weight"].data
            assert np.abs(w).max() <= np.sqrt(6 / (layer.in_features + layer.out_features))


def test_signature_mismatch():
    m = build_simplenet(3, [4], 10, seed=0, in_channels=3)
    with pytest.raises(ShapeError):
        m.logits(batch_of(np.zeros((1, 1, 4, 4))))


# ---------------------------------------------------------------- background model


def test_background_ignores_digit_strokes():
    m = build_background_model(10, seed=0)
    plain = np.ones((1, 3, 4, 4)) * np.array([0.9, 0.1, 0.1])[None, :, None, None]
    digit = plain.copy()
    digit[0, :, 1:3, 2] = 1.0
    np.testing.assert_allclose(m.logits(batch_of(plain)), m.logits(batch_of(digit)), atol=1e-12)


def test_background_same_mean_same_logits():
    m = build_background_model(10, seed=0)
    x1 = np.zeros((1, 3, 2, 2))
    x1[0, :, 0, 0] = [0.8, 0.4, 0.0]
    x2 = np.zeros((1, 3, 2, 2))
    x2[0, :, 1, 1] = [0.8, 0.4, 0.0]
    np.testing.assert_array_equal(m.logits(batch_of(x1)), m.logits(batch_of(x2)))


@pytest.fixture(scope="module")
def small_digits(mnist_raw):
    idx = np.random.default_rng(0).permutation(len(mnist_raw))[:600]
    return mnist_raw.subset(idx).downsample(2)


def test_background_fits_rho_one(small_digits):
    ds = colorize(small_digits, 1.0, seed=0)
    acc = fit(build_background_model(10, hidden=32, seed=0), ds.batch(), 600)
    assert acc == 1.0


def test_background_chance_at_rho_01(mnist_raw):
    # all 5000 digits so per-colour label counts are close to uniform
    ds = colorize(mnist_raw.downsample(2), 0.1, seed=0)
    acc = fit(build_background_model(10, hidden=16, seed=0), ds.batch(), 300)
    assert abs(acc - 0.1) <= 0.03


# ---------------------------------------------------------------- static distribution


def test_static_smoothing_by_hand():
    labels = np.array([1] * 10)
    m = build_static_distribution(labels, np.zeros(10, int), epsilon=1.0, num_classes=2)
    np.testing.assert_allclose(np.exp(m.log_table[0]), [1 / 12, 11 / 12], atol=1e-15)


def test_static_small_epsilon_limit():
    labels = np.array([0] * 9 + [1])
    m = build_static_distribution(labels, np.zeros(10, int), epsilon=1e-12, num_classes=2)
    np.testing.assert_allclose(m.log_table[0], np.log([0.9, 0.1]), atol=1e-10)


def test_static_uniform_counts_uniform_logits():
    labels = np.arange(12) % 3
    m = build_static_distribution(labels, np.zeros(12, int), epsilon=0.5, num_classes=3)
    np.testing.assert_allclose(m.log_table[0], np.log(np.ones(3) / 3), atol=1e-15)


def test_static_unseen_group_uses_prior():
    labels = np.array([0, 0, 1, 1])
    groups = np.array([0, 0, 1, 1])
    m = build_static_distribution(labels, groups, 1.0, 2)
    b = LabeledBatch(np.zeros((1, 1)), np.array([0]), np.array([5]), 2)
    np.testing.assert_allclose(m.logits(b)[0], m.log_prior)
    assert not m.trainable and m.parameters() == []


def test_static_rejects_bad_epsilon():
    with pytest.raises(ContractError):
        build_static_distribution([0], [0], 0.0)


# ---------------------------------------------------------------- clones


def test_clone_structure_and_seed():
    base = build_simplenet(3, [4, 8], 10, seed=0)
    a = clone_architecture(base, 1)
    b = clone_architecture(base, 1)
    c = clone_architecture(base, 2)
    assert a.kind is ModelKind.SELF_ENSEMBLE and a.arch["cloned_from"] == "base"
    assert [l.kind for l in a.layers] == [l.kind for l in base.layers]
    assert [p.shape for p in a.parameters()] == [p.shape for p in base.parameters()]
    assert all(p.data.tobytes() == q.data.tobytes() for p, q in zip(a.parameters(), b.parameters()))
    assert any(not np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), c.parameters()))
    assert any(not np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), base.parameters()))


# ---------------------------------------------------------------- checkpoints


@pytest.mark.parametrize("make", [
    lambda: build_simplenet(3, [4, 8], 10, seed=3, strides=[2, 1]),
    lambda: build_mlp(6, [5], 3, seed=1, selector="bias_block", kind=ModelKind.EXPLICIT_FEATURE, bias_start=2),
    lambda: build_static_distribution([0, 1, 1], [0, 0, 1], 0.5, 2),
])
def test_checkpoint_round_trip(tmp_path, make):
    m = make()
    save_model(m, tmp_path / "m.ggdm")
    back = load_model(tmp_path / "m.ggdm")
    assert model_to_bytes(back) == model_to_bytes(m)
    assert back.kind is m.kind and back.selector == m.selector


def test_checkpoint_corruption():
    data = bytearray(model_to_bytes(build_mlp(2, [], 2, seed=0)))
    data[-1] ^= 1
    with pytest.raises(FormatError):
        model_from_bytes(bytes(data))
    with pytest.raises(FormatError):
        model_from_bytes(b"GGDS" + bytes(20))
