import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cogsel.errors import FormatError
from cogsel.nn import (
    TrainConfig,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    conv_backward,
    conv_forward,
    cross_entropy,
    gradient_check,
    init_model,
    load_checkpoint,
    pool_backward,
    pool_forward,
    predict,
    predict_classes,
    save_checkpoint,
    sgd_momentum_step,
    softmax,
    train,
)


def naive_conv(x, w, b):
    """2x2 'same' correlation with zero padding at bottom and right."""
    N, Cin, H, W = x.shape
    F = w.shape[0]
    xp = np.zeros((N, Cin, H + 1, W + 1))
    xp[:, :, :H, :W] = x
    out = np.zeros((N, F, H, W))
    for n in range(N):
        for f in range(F):
            for i in range(H):
                for j in range(W):
                    out[n, f, i, j] = np.sum(xp[n, :, i : i + 2, j : j + 2] * w[f]) + b[f]
    return out


def naive_pool(x):
    N, C, H, W = x.shape
    out = np.zeros((N, C, H // 2, W // 2))
    for i in range(H // 2):
        for j in range(W // 2):
            out[:, :, i, j] = x[:, :, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max(axis=(2, 3))
    return out


@given(st.integers(1, 3), st.integers(1, 4), st.integers(2, 7), st.integers(0, 2**31))
def test_conv_matches_naive(cin, f, size, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, cin, size, size))
    w = rng.standard_normal((f, cin, 2, 2))
    b = rng.standard_normal(f)
    out, _ = conv_forward(x, w, b)
    np.testing.assert_allclose(out, naive_conv(x, w, b), atol=1e-12)


@given(st.integers(2, 9), st.integers(0, 2**31))
def test_pool_matches_naive(size, seed):
    x = np.random.default_rng(seed).standard_normal((2, 3, size, size))
    out, _ = pool_forward(x)
    np.testing.assert_array_equal(out, naive_pool(x))


def test_pool_tie_routes_gradient_to_first():
    x = np.ones((1, 1, 2, 2))
    out, arg = pool_forward(x)
    dx = pool_backward(np.ones_like(out), arg, x.shape)
    np.testing.assert_array_equal(dx[0, 0], [[1, 0], [0, 0]])


def test_conv_backward_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((3, 2, 2, 2))
    b = rng.standard_normal(3)
    g = rng.standard_normal((1, 3, 4, 4))
    out, cols = conv_forward(x, w, b)
    dx, dw, db = conv_backward(g, cols, x.shape, w)
    h = 1e-6
    for arr, grad in ((x, dx), (w, dw)):
        for k in range(0, arr.size, 5):
            flat = arr.reshape(-1)
            o = flat[k]
            flat[k] = o + h
            up = np.sum(conv_forward(x, w, b)[0] * g)
            flat[k] = o - h
            dn = np.sum(conv_forward(x, w, b)[0] * g)
            flat[k] = o
            assert grad.reshape(-1)[k] == pytest.approx((up - dn) / (2 * h), rel=1e-6, abs=1e-8)
    np.testing.assert_allclose(db, g.sum(axis=(0, 2, 3)))


def test_softmax_and_cross_entropy():
    p = softmax(np.array([[1000.0, 1000.0, 1000.0]]))
    np.testing.assert_allclose(p, 1 / 3)
    assert cross_entropy(p, np.array([1])) == pytest.approx(np.log(3))


def small_model(**kw):
    return init_model(8, kw.pop("C", 3), seed=kw.pop("seed", 0), n_filters=4, n_hidden=16, **kw)


def test_untrained_loss_near_log_c():
    m = small_model(C=5, init_gain=0.05)
    x = np.random.default_rng(1).standard_normal((20, 3, 8, 8))
    loss, _, _ = m.loss_and_grads(x, np.zeros(20, dtype=int))
    assert loss == pytest.approx(np.log(5), rel=0.02)


def test_gradient_check_small_net():
    m = small_model(init_gain=1.0)
    x = np.random.default_rng(2).standard_normal((3, 8, 8))
    worst, checked, skipped = gradient_check(m, x, 1)
    assert checked > 0 and worst < 1e-4


def test_gradient_check_step_bounds():
    m = small_model()
    with pytest.raises(ValueError):
        gradient_check(m, np.zeros((3, 8, 8)), 0, h=1e-3)


def test_small_m_rejected():
    with pytest.raises(ValueError, match="M >= 8"):
        init_model(7, 3)
    with pytest.raises(ValueError):
        init_model(8, [4])
    with pytest.raises(ValueError):
        init_model(8, [4, 4])


def test_init_is_seeded_and_class_ids_sorted():
    a, b = small_model(C=[9, 2, 5]), small_model(C=[9, 2, 5])
    assert a.class_ids == [2, 5, 9]
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    c = small_model(seed=1)
    assert not np.array_equal(a.params["fc1_w"], c.params["fc1_w"])


def test_dropout_needs_rng_and_eval_is_deterministic():
    m = small_model()
    x = np.random.default_rng(0).standard_normal((2, 3, 8, 8))
    with pytest.raises(ValueError):
        m.logits(x, train=True)
    np.testing.assert_array_equal(m.forward(x), m.forward(x))


def test_input_shape_checked():
    with pytest.raises(ValueError):
        small_model().forward(np.zeros((1, 3, 9, 9)))


def test_momentum_step():
    p = {"w": np.array([1.0])}
    v = {}
    sgd_momentum_step(p, {"w": np.array([2.0])}, v, 0.1, 0.9)
    assert p["w"][0] == pytest.approx(0.8)
    sgd_momentum_step(p, {"w": np.array([2.0])}, v, 0.1, 0.9)
    assert p["w"][0] == pytest.approx(0.8 - 0.2 - 0.18)


class _Toy:
    """Two linearly separable classes in the feature tensor."""

    def __init__(self, n=120, seed=0):
        rng = np.random.default_rng(seed)
        self.labels = np.array([3, 8] * (n // 2))
        self.features = rng.standard_normal((n, 3, 8, 8)) * 0.3
        self.features[self.labels == 8, 1] += 1.0

    def __len__(self):
        return self.labels.size


def test_training_reduces_loss_and_is_reproducible():
    ds = _Toy()
    cfg = TrainConfig(learning_rate=0.05, batch_size=20, epochs=8, dropout_p=0.0)
    m1 = small_model(C=[3, 8])
    r1 = train(m1, ds, cfg)
    assert r1.train_loss[-1] < r1.train_loss[0]
    assert r1.val_acc[-1] >= 90.0
    m2 = small_model(C=[3, 8])
    r2 = train(m2, ds, cfg)
    assert r1.train_loss == r2.train_loss
    np.testing.assert_array_equal(m1.params["fc3_w"], m2.params["fc3_w"])
    pred = predict_classes(m1, ds.features)
    assert set(pred.tolist()) <= {3, 8}
    cid, probs = predict(m1, ds.features[1])
    assert cid in (3, 8) and probs.sum() == pytest.approx(1.0)
    assert r1.to_csv().splitlines()[0] == "epoch,train_loss,train_acc,val_acc"


def test_training_rejects_unknown_labels():
    with pytest.raises(ValueError):
        train(small_model(C=[1, 2]), _Toy(), TrainConfig(epochs=1))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)


def test_checkpoint_round_trip(tmp_path):
    m = small_model(C=[4, 11, 30])
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert back.class_ids == [4, 11, 30] and back.M == 8 and back.n_filters == 4
    for k in m.params:
        np.testing.assert_array_equal(back.params[k], m.params[k])
    assert checkpoint_to_bytes(back) == path.read_bytes()


def test_checkpoint_rejects_corruption():
    buf = checkpoint_to_bytes(small_model())
    with pytest.raises(FormatError):
        checkpoint_from_bytes(buf[:-8])
    with pytest.raises(FormatError):
        checkpoint_from_bytes(buf + b"\0")
    with pytest.raises(FormatError):
        checkpoint_from_bytes(b"CGDS" + buf[4:])
