import numpy as np
import pytest

from granite.cednet import layers as L
from granite.cednet import model as M
from granite.cednet.layers import LayerDimError, LayerSpec
from granite.cednet.optim import Adam, cyclic_lr
from granite.cednet.train import TrainConfig, train

from conftest import tiny_specs


def _conv_loop(x, w, b, s):
    """Quadruple-loop reference for the flipped-kernel valid convolution."""
    n, _, c_in, k = w.shape
    N, H, W, _ = x.shape
    ho, wo = (H - n) // s + 1, (W - n) // s + 1
    z = np.zeros((N, ho, wo, k))
    for i in range(ho):
        for j in range(wo):
            for a in range(n):
                for c in range(n):
                    z[:, i, j] += x[:, s * i + n - 1 - a, s * j + n - 1 - c] @ w[a, c]
    return z + b


# --- layer examples -----------------------------------------------------------------

def test_output_size_formulas():
    assert L.conv_out(128, 8, 8) == 16
    assert L.maxpool_out(16, 2, 2) == 8
    assert L.tconv_out(5, 2, 2) == 10
    assert L.tconv_out(12, 10, 2) == 32
    with pytest.raises(LayerDimError):
        L.conv_out(10, 4, 4)
    with pytest.raises(LayerDimError):
        L.conv_out(3, 4, 1)


def test_conv_identity():
    x = np.random.default_rng(0).normal(size=(2, 5, 5, 1))
    z = L.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1), 1)
    np.testing.assert_array_equal(z, x)


def test_conv_counting():
    z = L.conv2d(np.ones((1, 3, 3, 1)), np.ones((2, 2, 1, 1)), np.zeros(1), 1)
    np.testing.assert_array_equal(z[0, ..., 0], np.full((2, 2), 4.0))


@pytest.mark.parametrize("n,s,size", [(3, 1, 7), (2, 2, 8), (8, 8, 16), (4, 2, 10)])
def test_conv_matches_loop(n, s, size):
    rng = np.random.default_rng(n * 10 + s)
    x = rng.normal(size=(2, size, size, 3))
    w = rng.normal(size=(n, n, 3, 4))
    b = rng.normal(size=4)
    np.testing.assert_allclose(L.conv2d(x, w, b, s), _conv_loop(x, w, b, s), rtol=1e-6, atol=1e-10)


def test_maxpool_examples():
    out, _ = L.maxpool2d(np.array([[1.0, 2], [3, 4]])[None, ..., None], 2, 2)
    assert out.ravel().tolist() == [4.0]
    x = np.array([[1.0, 0, 0], [0, 5, 0], [2, 0, 1]])[None, ..., None]
    out, _ = L.maxpool2d(x, 2, 1)
    np.testing.assert_array_equal(out[0, ..., 0], [[5, 5], [5, 5]])
    out, arg = L.maxpool2d(np.full((1, 4, 4, 2), 3.0), 2, 2)
    assert np.all(out == 3.0) and np.all(arg == 0)


def test_tconv_identity_and_size():
    y = np.random.default_rng(1).normal(size=(1, 4, 4, 1))
    np.testing.assert_array_equal(L.tconv2d(y, np.ones((1, 1, 1, 1)), np.zeros(1), 1), y)
    out = L.tconv2d(np.ones((1, 5, 5, 2)), np.ones((2, 2, 2, 3)), np.zeros(3), 2)
    assert out.shape == (1, 10, 10, 3)


@pytest.mark.parametrize("n,s,size", [(8, 8, 32), (3, 1, 9), (2, 2, 6), (10, 2, 30)])
def test_tconv_adjoint(n, s, size):
    rng = np.random.default_rng(size)
    x = rng.normal(size=(2, size, size, 3))
    w = rng.normal(size=(n, n, 3, 5))
    cx = L.conv2d(x, w, np.zeros(5), s)
    y = rng.normal(size=cx.shape)
    ty = L.tconv2d(y, w.transpose(0, 1, 3, 2), np.zeros(3), s)
    lhs, rhs = np.vdot(cx, y), np.vdot(x, ty)
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1.0)


def test_layer_rejects_channel_mismatch():
    with pytest.raises(LayerDimError):
        L.conv2d(np.zeros((1, 8, 8, 3)), np.zeros((2, 2, 4, 1)), np.zeros(1), 2)


# --- model ---------------------------------------------------------------------------

def test_dims_chain_and_output():
    m = M.CedModel(seed=0)
    assert m.dims_chain() == [128, 16, 8, 6, 5, 10, 12, 32]
    out = M.forward(m, np.random.default_rng(0).random((2, 128, 128, 4)))
    assert out.shape == (2, 32, 32, 1)
    assert M.forward(m, np.zeros((128, 128, 4))).shape == (32, 32, 1)


def test_bad_input_size():
    with pytest.raises(LayerDimError):
        M.forward(M.CedModel(seed=0), np.zeros((1, 120, 120, 4)))


def test_zero_model_outputs_zero():
    m = M.CedModel(seed=0)
    m.set_parameters([np.zeros_like(p) for p in m.parameters()])
    out = M.forward(m, np.random.default_rng(0).random((1, 128, 128, 4)))
    assert np.all(out == 0)


def test_forward_deterministic():
    x = np.random.default_rng(3).random((2, 128, 128, 4))
    a = M.forward(M.CedModel(seed=4), x)
    b = M.forward(M.CedModel(seed=4), x)
    assert a.tobytes() == b.tobytes()


def test_init_statistics():
    m = M.CedModel(seed=1)
    for (w, b), spec in zip([p for p in m.params if p is not None],
                            [s for s in m.specs if s.kind != "maxpool"]):
        assert np.all(b == 0)
        fan_in = w.shape[0] * w.shape[1] * w.shape[2]
        if w.size >= 4000:
            assert abs(w.var() / (2.0 / fan_in) - 1) < 0.2
    other = M.CedModel(seed=1)
    for p, q in zip(m.parameters(), other.parameters()):
        np.testing.assert_array_equal(p, q)


def test_loss_conventions():
    t = np.random.default_rng(0).random((3, 32, 32, 1))
    assert M.loss_mse(t, t) == 0
    assert M.loss_mse(t + 1, t) == pytest.approx(1024.0)
    assert M.per_pixel(1024.0) == 1.0


def _numeric_grad(model, x, y, h=1e-5):
    out = []
    for p in model.parameters():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            up = M.loss_mse(M.forward(model, x), y)
            p[idx] = old - h
            down = M.loss_mse(M.forward(model, x), y)
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def test_gradient_finite_difference():
    rng = np.random.default_rng(0)
    m = M.CedModel(tiny_specs(), input_size=16, seed=2, dtype=np.float64)
    # give every unit a positive bias so few relus sit at a kink
    m.set_parameters([p + 0.05 if p.ndim == 1 else p for p in m.parameters()])
    x = rng.random((2, 16, 16, 4))
    y = rng.random((2, 8, 8, 1))
    _, grads = M.loss_and_grad(m, x, y)
    num = _numeric_grad(m, x, y)
    for g, n in zip(grads, num):
        scale = max(np.abs(n).max(), 1e-8)
        assert np.abs(g - n).max() / scale < 1e-4


def test_zero_weights_bias_gradient():
    m = M.CedModel(seed=0, dtype=np.float64)
    m.set_parameters([np.zeros_like(p) for p in m.parameters()])
    y = np.random.default_rng(1).random((2, 32, 32, 1))
    _, grads = M.loss_and_grad(m, np.random.default_rng(2).random((2, 128, 128, 4)), y)
    # d loss / d b_last = sum_pixels 2 (0 - y) * tanh'(0), averaged over the batch
    expect = -2.0 * y.reshape(2, -1).sum(1).mean()
    assert grads[-1][0] == pytest.approx(expect)
    assert grads[-1][0] != 0


def test_dead_relu_has_zero_gradient():
    m = M.CedModel(seed=0, dtype=np.float64)
    w, b = m.params[0]
    w[..., 5] = -1.0
    b[5] = -1.0
    x = np.random.default_rng(0).random((2, 128, 128, 4))
    _, grads = M.loss_and_grad(m, x, np.random.default_rng(1).random((2, 32, 32, 1)))
    assert np.all(grads[0][..., 5] == 0) and grads[1][5] == 0


def test_checkpoint_roundtrip(tmp_path):
    m = M.CedModel(seed=7)
    M.save_checkpoint(m, tmp_path / "ck.gtns", epoch=3, val_mse=1.5)
    back, side = M.load_checkpoint(tmp_path / "ck.gtns")
    assert side["epoch"] == 3 and side["seed"] == 7
    for p, q in zip(m.parameters(), back.parameters()):
        np.testing.assert_array_equal(p, q)
    x = np.random.default_rng(0).random((1, 128, 128, 4))
    assert M.forward(m, x).tobytes() == M.forward(back, x).tobytes()


def test_checkpoint_shape_mismatch(tmp_path):
    m = M.CedModel(seed=7)
    M.save_checkpoint(m, tmp_path / "ck.gtns")
    M.save_checkpoint(M.CedModel(tiny_specs(), input_size=16), tmp_path / "tiny.gtns")
    (tmp_path / "tiny.gtns").replace(tmp_path / "ck.gtns")
    with pytest.raises(LayerDimError):
        M.load_checkpoint(tmp_path / "ck.gtns")


# --- optimiser --------------------------------------------------------------------------

def test_adam_zero_grad():
    p = [np.ones(3)]
    opt = Adam(p)
    opt.step(p, [np.zeros(3)], 0.1)
    np.testing.assert_array_equal(p[0], np.ones(3))
    assert opt.step_count == 1


def test_adam_constant_grad_sign_step():
    p = [np.zeros(4)]
    g = np.array([3.0, -0.01, 200.0, -7.0])
    opt = Adam(p)
    lr = 1e-3
    for _ in range(5000):
        before = p[0].copy()
        opt.step(p, [g], lr)
    np.testing.assert_allclose(p[0] - before, -lr * np.sign(g), rtol=1e-4)


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(0)
        p = [rng.normal(size=5)]
        opt = Adam(p)
        for _ in range(50):
            opt.step(p, [np.sin(p[0]) + rng.normal(size=5)], 0.01)
        return p[0]
    assert run().tobytes() == run().tobytes()


def test_cyclic_lr():
    assert cyclic_lr(0, 1e-4, 0.1) == pytest.approx(1e-4)
    assert cyclic_lr(100, 1e-4, 0.1) == pytest.approx(0.1)
    assert cyclic_lr(200, 1e-4, 0.1) == pytest.approx(1e-4)
    assert cyclic_lr(50, 0.0, 1.0) == pytest.approx(0.5)


# --- training -----------------------------------------------------------------------------

def _toy_data(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.random((n, 16, 16, 4))
    y = x[:, ::2, ::2, :1].copy()
    return x, y


def test_train_best_not_worse_than_initial():
    x, y = _toy_data(12, 0)
    xv, yv = _toy_data(4, 1)
    m = M.CedModel(tiny_specs(), input_size=16, seed=0)
    cfg = TrainConfig(batch_size=4, epochs=10, base_lr=1e-3, max_lr=1e-2, cycle=10, patience=10)
    best, hist = train(m, (x, y), (xv, yv), cfg)
    assert hist.epochs[0] == 0 and len(hist.epochs) == 11
    assert M.evaluate_mse(best, xv, yv) <= hist.val_mse[0]
    assert M.evaluate_mse(best, xv, yv) == pytest.approx(hist.best_val)


def test_train_patience_zero():
    x, y = _toy_data(8, 0)
    xv, yv = _toy_data(4, 1)
    m = M.CedModel(tiny_specs(), input_size=16, seed=0)
    # a huge learning rate makes the first epoch worse than the start
    cfg = TrainConfig(batch_size=8, epochs=50, base_lr=5.0, max_lr=5.0, patience=0)
    best, hist = train(m, (x, y), (xv, yv), cfg)
    first_bad = next(i for i in range(1, len(hist.val_mse)) if hist.val_mse[i] >= hist.best_val
                     and hist.best_epoch < i)
    assert hist.stopped_early
    assert hist.epochs[-1] == first_bad


def test_train_deterministic():
    x, y = _toy_data(8, 0)
    xv, yv = _toy_data(4, 1)
    cfg = TrainConfig(batch_size=4, epochs=3, base_lr=1e-3, max_lr=1e-3)
    a, ha = train(M.CedModel(tiny_specs(), input_size=16, seed=0), (x, y), (xv, yv), cfg)
    b, hb = train(M.CedModel(tiny_specs(), input_size=16, seed=0), (x, y), (xv, yv), cfg)
    assert ha.val_mse == hb.val_mse
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.tobytes() == q.tobytes()


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(base_lr=0.2, max_lr=0.1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        LayerSpec("dense", 1, 1)
    with pytest.raises(ValueError):
        LayerSpec("conv", 3, 1, padding=1)
