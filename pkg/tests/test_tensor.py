import numpy as np
import pytest

from terraseg.nn import (Adam, BatchNorm, BilinearUp2, Concat, Conv1x1, Conv3x3, Dense, MaxPool2, OptimState, ReLU,
                         Tanh, Tensor, forward, no_grad, ops, optimizer_step)
from terraseg.nn.checkpoint import load_checkpoint, save_checkpoint
from terraseg.segnet import UNet


def fd_check(fn, tensors, h=1e-5, tol=1e-4, max_entries=40, seed=0):
    """Compare analytic gradients of the scalar ``fn()`` with central differences."""
    for t in tensors:
        t.grad = None
    fn().backward()
    rng = np.random.default_rng(seed)
    for t in tensors:
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, min(max_entries, flat.size), replace=False)
        num = np.empty(len(picks))
        for j, i in enumerate(picks):
            old = flat[i]
            flat[i] = old + h
            up = fn().item()
            flat[i] = old - h
            down = fn().item()
            flat[i] = old
            num[j] = (up - down) / (2 * h)
        ana = t.grad.reshape(-1)[picks]
        err = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-6)
        assert err.max() < tol, (err.max(), ana, num)


def weighted(out_fn, seed=1):
    """Scalar loss sum(out * R) with a fixed random R, so every output matters."""
    r = {}

    def loss():
        out = out_fn()
        if "R" not in r:
            r["R"] = np.random.default_rng(seed).normal(size=out.shape)
        return (out * Tensor(r["R"])).sum()

    return loss


def rand_t(rng, *shape, grad=True):
    return Tensor(rng.normal(size=shape), requires_grad=grad)


# --------------------------------------------------------------------------
# forward semantics


def test_conv1x1_identity():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 5))
    conv = Conv1x1(5, 5)
    conv.weight.data = np.eye(5).reshape(1, 1, 5, 5)
    np.testing.assert_array_equal(forward(conv, Tensor(x)).data, x)


def test_relu_values():
    assert forward(ReLU(), Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_upsample_constant():
    out = forward(BilinearUp2(), Tensor(np.full((1, 3, 5, 2), 4.5))).data
    assert out.shape == (1, 6, 10, 2)
    np.testing.assert_allclose(out, 4.5, rtol=0, atol=1e-15)


def test_pool_then_upsample_constant_identity():
    x = np.full((2, 4, 6, 3), -1.25)
    out = forward(BilinearUp2(), forward(MaxPool2(), Tensor(x)))
    np.testing.assert_allclose(out.data, x, atol=1e-15)


def test_maxpool_rejects_odd():
    with pytest.raises(ValueError):
        forward(MaxPool2(), Tensor(np.zeros((1, 5, 4, 1))))


def test_conv3x3_nested_loop_oracle(rng):
    x = rng.normal(size=(2, 5, 5, 3))
    conv = Conv3x3(3, 4, rng)
    conv.bias.data = rng.normal(size=4)
    out = forward(conv, Tensor(x)).data
    assert out.shape == (2, 5, 5, 4)
    w, b = conv.weight.data, conv.bias.data
    pad = np.zeros((2, 7, 7, 3))
    pad[:, 1:6, 1:6] = x
    want = np.zeros_like(out)
    for n in range(2):
        for i in range(5):
            for j in range(5):
                for o in range(4):
                    s = b[o]
                    for di in range(3):
                        for dj in range(3):
                            for c in range(3):
                                s += pad[n, i + di, j + dj, c] * w[di, dj, c, o]
                    want[n, i, j, o] = s
    np.testing.assert_allclose(out, want, rtol=0, atol=1e-12)


def test_batchnorm_train_moments_and_running_stats(rng):
    bn = BatchNorm(3)
    x = rng.normal(2.0, 3.0, size=(4, 6, 6, 3))
    out = forward(bn, Tensor(x), "train").data
    mu = out.mean(axis=(0, 1, 2))
    var = out.var(axis=(0, 1, 2))
    assert np.abs(mu).max() < 1e-9
    np.testing.assert_allclose(var, 1.0, atol=1e-6 + 1e-5)
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 1, 2)))
    ev = forward(bn, Tensor(x), "eval").data
    want = (x - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
    np.testing.assert_allclose(ev, want, atol=1e-12)


def test_shape_mismatch_errors(rng):
    with pytest.raises(ValueError):
        forward(Dense(3, 2), Tensor(np.zeros((4, 5))))
    with pytest.raises(ValueError):
        forward(BatchNorm(2), Tensor(np.zeros((1, 2, 2, 3))))
    with pytest.raises(ValueError):
        forward(ReLU(), Tensor([1.0]), "predict")


# --------------------------------------------------------------------------
# gradients


def test_backward_without_forward():
    with pytest.raises(RuntimeError):
        Tensor([1.0, 2.0]).backward()


def test_conv1x1_identity_weight_gradient():
    x = np.arange(8, dtype=float).reshape(1, 2, 2, 2)
    conv = Conv1x1(2, 2)
    conv.weight.data = np.eye(2).reshape(1, 1, 2, 2)
    forward(conv, Tensor(x)).sum().backward()
    sums = x.sum(axis=(0, 1, 2))
    np.testing.assert_allclose(conv.weight.grad.reshape(2, 2), np.column_stack([sums, sums]))
    np.testing.assert_allclose(conv.bias.grad, [4.0, 4.0])


def test_zero_upstream_gradient(rng):
    d = Dense(3, 2, rng)
    x = rand_t(rng, 5, 3)
    forward(d, x).backward(np.zeros((5, 2)))
    assert not d.weight.grad.any() and not x.grad.any()


@pytest.mark.parametrize("kind", ["dense", "conv3x3", "conv1x1", "batchnorm", "relu", "tanh", "maxpool2",
                                  "bilinear_up2", "concat"])
def test_layer_gradients(kind, rng):
    if kind == "dense":
        layer, x = Dense(4, 3, rng), rand_t(rng, 6, 4)
        layer.bias.data = rng.normal(size=3)
    elif kind == "conv3x3":
        layer, x = Conv3x3(2, 3, rng), rand_t(rng, 2, 4, 5, 2)
    elif kind == "conv1x1":
        layer, x = Conv1x1(3, 2, rng), rand_t(rng, 2, 3, 3, 3)
    elif kind == "batchnorm":
        layer, x = BatchNorm(3), rand_t(rng, 2, 3, 4, 3)
        layer.gamma.data = rng.uniform(0.5, 1.5, 3)
    elif kind == "relu":
        layer, x = ReLU(), rand_t(rng, 3, 7)
        x.data[np.abs(x.data) < 1e-3] = 0.5
    elif kind == "tanh":
        layer, x = Tanh(), rand_t(rng, 3, 7)
    elif kind == "maxpool2":
        layer, x = MaxPool2(), rand_t(rng, 2, 4, 6, 2)
    elif kind == "bilinear_up2":
        layer, x = BilinearUp2(), rand_t(rng, 1, 3, 4, 2)
    else:
        layer, a, b = Concat(), rand_t(rng, 1, 2, 2, 3), rand_t(rng, 1, 2, 2, 2)
        fd_check(weighted(lambda: forward(layer, [a, b])), [a, b])
        return
    tensors = [x] + list(layer.params().values())
    fd_check(weighted(lambda: forward(layer, x, "train")), tensors)


def test_two_layer_net_all_parameters(rng):
    d1, d2 = Dense(3, 5, rng), Dense(5, 1, rng)
    x = Tensor(rng.normal(size=(8, 3)))
    y = (rng.random(8) > 0.5).astype(float)

    def loss():
        z = forward(d2, ops.tanh(forward(d1, x))).reshape(8)
        return ops.bce_with_logits(z, y).mean()

    fd_check(loss, [d1.weight, d1.bias, d2.weight, d2.bias])


def test_elementwise_ops_gradients(rng):
    a = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4,)), requires_grad=True)

    def loss():
        s = ops.sigmoid(a * b) + ops.exp(b * 0.3) - ops.log(a) + a ** 1.5 / (b * b + 1.0)
        s = s + ops.tabs(b - 0.1) + ops.clamp_min(a - 1.0, 0.0) + ops.relu(b)
        return s[1:, :].mean() + ops.matmul(a, b.reshape(4, 1)).sum()

    b.data[np.abs(b.data - 0.1) < 1e-2] += 0.1
    a.data[np.abs(a.data - 1.0) < 1e-2] += 0.1
    fd_check(loss, [a, b])


def test_mini_unet_gradient(rng):
    model = UNet(3, k=2, c0=2, seed=1)
    x = Tensor(rng.normal(size=(2, 16, 16, 3)))
    y = (rng.random((2, 16, 16, 1)) > 0.7).astype(float)
    params = model.parameters()

    def loss():
        return ops.focal_loss(model(x, "train"), y)

    picks = [params[k] for k in ("encoder.0.conv_a.weight", "encoder.2.bn_b.gamma", "decoder.1.conv_b.weight",
                                 "head_b.weight", "head_b.bias")]
    fd_check(loss, picks, tol=1e-3, max_entries=10)


def test_no_grad_records_nothing(rng):
    d = Dense(2, 2, rng)
    with no_grad():
        out = forward(d, Tensor(np.ones((1, 2))))
    assert not out.requires_grad


# --------------------------------------------------------------------------
# losses


def bce(z, t):
    p = 1 / (1 + np.exp(-z))
    return -(t * np.log(p) + (1 - t) * np.log(1 - p))


def test_focal_reduces_to_half_bce(rng):
    z = rng.normal(size=(4, 5))
    t = (rng.random((4, 5)) > 0.5).astype(float)
    got = ops.focal_loss(Tensor(z), t, gamma_f=0.0, alpha_f=0.5).item()
    assert got == pytest.approx(0.5 * bce(z, t).mean(), abs=1e-12)


def test_focal_confident_correct():
    assert ops.focal_loss(Tensor([20.0]), [1.0]).item() < 1e-8


def test_focal_matches_formula_with_mask(rng):
    z = rng.normal(size=50) * 3
    t = (rng.random(50) > 0.6).astype(float)
    m = rng.random(50) > 0.3
    p = 1 / (1 + np.exp(-z))
    pt = np.where(t == 1, p, 1 - p)
    at = np.where(t == 1, 0.25, 0.75)
    want = (-at * (1 - pt) ** 2 * np.log(pt))[m].mean()
    assert ops.focal_loss(Tensor(z), t, m).item() == pytest.approx(want, abs=1e-12)
    zt = Tensor(z, requires_grad=True)
    fd_check(lambda: ops.focal_loss(zt, t, m, gamma_f=2.0, alpha_f=0.3), [zt])


def test_focal_empty_mask():
    with pytest.raises(ValueError):
        ops.focal_loss(Tensor([0.0]), [1.0], [False])


def test_focal_decreases_in_pt():
    z = np.linspace(-10, 10, 201)
    vals = [ops.focal_loss(Tensor([v]), [1.0]).item() for v in z]
    assert all(a > b for a, b in zip(vals, vals[1:]))


# --------------------------------------------------------------------------
# optimiser


def test_adam_zero_gradient():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    st = OptimState()
    optimizer_step(p, {"w": np.zeros(2)}, st)
    assert p["w"].data.tolist() == [1.0, -2.0] and st.step == 1


def test_adam_quadratic():
    w = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam({"w": w}, lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        ((w - 3.0) * (w - 3.0)).sum().backward()
        opt.step()
    assert abs(w.data[0] - 3.0) < 1e-3


def test_adam_nan_gradient_names_parameter():
    p = {"enc.w": Tensor(np.zeros(2), requires_grad=True)}
    with pytest.raises(FloatingPointError, match="enc.w"):
        optimizer_step(p, {"enc.w": np.array([np.nan, 0.0])}, OptimState())


def test_training_is_deterministic():
    def run():
        rng = np.random.default_rng(5)
        d = Dense(3, 1, rng)
        x, y = rng.normal(size=(16, 3)), rng.normal(size=(16, 1))
        opt = Adam(d.params(), lr=0.01)
        for _ in range(20):
            opt.zero_grad()
            r = forward(d, Tensor(x)) - Tensor(y)
            (r * r).mean().backward()
            opt.step()
        return d.weight.data.copy()

    assert np.array_equal(run(), run())


# --------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(tmp_path, rng):
    model = UNet(4, k=1, c0=2, seed=3)
    for b in model.buffers().values():
        b[...] = rng.random(b.shape)
    save_checkpoint(tmp_path / "m.tsnn", model.architecture(), model.state(), {b"XTRA": b"hello"})
    arch, state, chunks = load_checkpoint(tmp_path / "m.tsnn")
    assert arch["c0"] == 2 and chunks == {b"XTRA": b"hello"}
    for k, v in model.state().items():
        np.testing.assert_array_equal(state[k], v)


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x")
