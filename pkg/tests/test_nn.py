import numpy as np
import numpy.testing as npt
import pytest

from regrow.nn import (
    Adam,
    BatchNorm,
    Param,
    conv2d,
    conv2d_backward,
    conv3d,
    conv3d_backward,
    finite_diff,
    grad_rel_err,
    im2col2d,
    load_checkpoint,
    lr_schedule,
    mae_loss,
    relu,
    save_checkpoint,
    sigmoid,
    tanh,
)


def conv2d_loop(x, kernel, bias):
    h, w, cin = x.shape
    cout = kernel.shape[3]
    out = np.zeros((h, w, cout))
    for r in range(h):
        for c in range(w):
            for o in range(cout):
                s = bias[o]
                for dr in range(3):
                    for dc in range(3):
                        rr, cc = r + dr - 1, c + dc - 1
                        if 0 <= rr < h and 0 <= cc < w:
                            for i in range(cin):
                                s += x[rr, cc, i] * kernel[dr, dc, i, o]
                out[r, c, o] = s
    return out


def conv3d_loop(x, kernel, bias):
    t, h, w, cin = x.shape
    cout = kernel.shape[4]
    out = np.zeros((t, h, w, cout))
    for ti in range(t):
        for r in range(h):
            for c in range(w):
                for o in range(cout):
                    s = bias[o]
                    for dt in range(3):
                        for dr in range(3):
                            for dc in range(3):
                                tt, rr, cc = ti + dt - 1, r + dr - 1, c + dc - 1
                                if 0 <= tt < t and 0 <= rr < h and 0 <= cc < w:
                                    for i in range(cin):
                                        s += x[tt, rr, cc, i] * kernel[dt, dr, dc, i, o]
                    out[ti, r, c, o] = s
    return out


# conv2d ----------------------------------------------------------------------

def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.random((6, 7, 1))
    k = np.zeros((3, 3, 1, 1))
    k[1, 1, 0, 0] = 1.0
    npt.assert_allclose(conv2d(x, k), x)


def test_conv2d_ones_kernel_padding():
    v = 0.7
    x = np.full((5, 5, 1), v)
    k = np.ones((3, 3, 1, 1))
    out = conv2d(x, k)[..., 0]
    assert out[2, 2] == pytest.approx(9 * v)
    assert out[0, 0] == pytest.approx(4 * v)
    assert out[0, 2] == pytest.approx(6 * v)


def test_conv2d_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 5, 2))
    k = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    npt.assert_allclose(conv2d(x, k, b), conv2d_loop(x, k, b), atol=1e-6)


def test_conv2d_linearity():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(2, 4, 4, 2))
    k = rng.normal(size=(3, 3, 2, 2))
    lhs = conv2d(2.5 * x + 0.5 * y, k)
    rhs = 2.5 * conv2d(x, k) + 0.5 * conv2d(y, k)
    npt.assert_allclose(lhs, rhs, atol=1e-12)


def test_conv2d_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        conv2d(np.zeros((4, 4, 3)), np.zeros((3, 3, 2, 1)))


def test_conv2d_backward_fd():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 3, 3, 2))
    k = rng.normal(size=(3, 3, 2, 2))
    b = rng.normal(size=2)
    target = rng.normal(size=(1, 3, 3, 2))

    def loss():
        return mae_loss(conv2d(x, k, b), target)[0]

    _, d = mae_loss(conv2d(x, k, b), target)
    cols = im2col2d(x)
    dx, dk, db = conv2d_backward(d, cols, k, x.shape)
    worst = 0.0
    for arr, grad in ((k, dk), (b, db), (x, dx)):
        flat, gflat = arr.reshape(-1), np.asarray(grad).reshape(-1)
        for i in range(flat.size):
            worst = max(worst, grad_rel_err(gflat[i], finite_diff(loss, flat, i)))
    assert worst < 1e-4, worst


# conv3d ----------------------------------------------------------------------

def test_conv3d_identity_kernel():
    rng = np.random.default_rng(4)
    x = rng.random((4, 5, 5, 1))
    k = np.zeros((3, 3, 3, 1, 1))
    k[1, 1, 1, 0, 0] = 1.0
    npt.assert_allclose(conv3d(x, k), x)


def test_conv3d_constant_center_value():
    v, cin = 0.3, 2
    x = np.full((5, 7, 7, cin), v)
    k = np.ones((3, 3, 3, cin, 1))
    out = conv3d(x, k)
    assert out[2, 3, 3, 0] == pytest.approx(27 * v * cin)


def test_conv3d_matches_loop_oracle():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 5, 5, 2))
    k = rng.normal(size=(3, 3, 3, 2, 1))
    b = rng.normal(size=1)
    npt.assert_allclose(conv3d(x, k, b), conv3d_loop(x, k, b), atol=1e-6)


def test_conv3d_backward_fd():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(1, 3, 4, 4, 2))
    k = rng.normal(size=(3, 3, 3, 2, 1))
    target = rng.normal(size=(1, 3, 4, 4, 1))

    def loss():
        return mae_loss(conv3d(x, k), target)[0]

    _, d = mae_loss(conv3d(x, k), target)
    dx, dk, _db = conv3d_backward(d, x, k)
    worst = 0.0
    for arr, grad in ((k, dk), (x, dx)):
        flat, gflat = arr.reshape(-1), np.asarray(grad).reshape(-1)
        for i in np.random.default_rng(7).choice(flat.size, 24, replace=False):
            worst = max(worst, grad_rel_err(gflat[i], finite_diff(loss, flat, i)))
    assert worst < 1e-4, worst


# batch norm --------------------------------------------------------------------

def test_batchnorm_standardizes():
    rng = np.random.default_rng(8)
    bn = BatchNorm(3, dtype=np.float64)
    x = rng.normal(2.0, 3.0, size=(40, 5, 5, 3))
    y = bn.forward(x, train=True)
    mu = y.mean(axis=(0, 1, 2))
    sd = y.std(axis=(0, 1, 2))
    assert np.abs(mu).max() < 1e-6
    assert np.abs(sd - 1).max() < 1e-4


def test_batchnorm_near_identity_on_standard_input():
    rng = np.random.default_rng(9)
    bn = BatchNorm(2, dtype=np.float64)
    x = rng.normal(size=(5000, 2))
    x = (x - x.mean(axis=0)) / x.std(axis=0)
    y = bn.forward(x, train=True)
    npt.assert_allclose(y, x, atol=1e-4)


def test_batchnorm_constant_channel():
    bn = BatchNorm(1, dtype=np.float64)
    bn.beta.value[:] = 0.25
    x = np.full((10, 4, 4, 1), 3.3)
    y = bn.forward(x, train=True)
    npt.assert_allclose(y, 0.25, atol=1e-12)


def test_batchnorm_infer_is_affine():
    rng = np.random.default_rng(10)
    bn = BatchNorm(2, dtype=np.float64)
    for _ in range(30):
        bn.forward(rng.normal(1.0, 2.0, size=(64, 2)), train=True)
    x = rng.normal(1.0, 2.0, size=(16, 2))
    y1 = bn.forward(x, train=False)
    y2 = bn.forward(2 * x, train=False)
    ivar = 1.0 / np.sqrt(bn.running_var + bn.eps)
    npt.assert_allclose(y2 - y1, x * ivar * bn.gamma.value, rtol=1e-10)


def test_batchnorm_backward_fd():
    rng = np.random.default_rng(11)
    bn = BatchNorm(2, dtype=np.float64)
    x = rng.normal(size=(6, 3, 3, 2))
    target = rng.normal(size=x.shape)

    def loss():
        return mae_loss(bn.forward(x, train=True), target)[0]

    _, d = mae_loss(bn.forward(x, train=True), target)
    bn.gamma.zero_grad()
    bn.beta.zero_grad()
    dx = bn.backward(d)
    worst = 0.0
    for arr, grad in ((x, dx), (bn.gamma.value, bn.gamma.grad), (bn.beta.value, bn.beta.grad)):
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for i in np.random.default_rng(12).choice(flat.size, min(20, flat.size), replace=False):
            worst = max(worst, grad_rel_err(gflat[i], finite_diff(loss, flat, i)))
    assert worst < 1e-4, worst


def test_batchnorm_zero_batch():
    bn = BatchNorm(2)
    with pytest.raises(ValueError):
        bn.forward(np.zeros((0, 2)), train=True)


# activations / loss --------------------------------------------------------------

def test_activation_values():
    assert relu(np.array([-1.0]))[0] == 0.0
    assert sigmoid(np.array([0.0]))[0] == pytest.approx(0.5)
    assert tanh(np.array([0.0]))[0] == 0.0
    assert sigmoid(np.array([-1e4]))[0] == pytest.approx(0.0)


def test_mae_examples():
    x = np.array([1.0, 2.0, 3.0])
    assert mae_loss(x, x)[0] == 0.0
    assert mae_loss(x + 0.5, x)[0] == pytest.approx(0.5)
    rng = np.random.default_rng(13)
    a, b = rng.normal(size=(2, 40))
    expected = sum(abs(ai - bi) for ai, bi in zip(a, b)) / 40
    assert mae_loss(a, b)[0] == pytest.approx(expected)


def test_mae_sign_zero_and_mask():
    a = np.array([1.0, 2.0, 5.0])
    b = np.array([1.0, 1.0, 7.0])
    loss, grad = mae_loss(a, b)
    assert grad[0] == 0.0
    mask = np.array([1.0, 1.0, 0.0])
    loss_m, grad_m = mae_loss(a, b, mask)
    assert loss_m == pytest.approx(0.5)
    assert grad_m[2] == 0.0


# optimizer / schedule --------------------------------------------------------------

def test_adam_decreases_abs():
    p = Param(np.array([1.0]))
    opt = Adam([p])
    p.grad[:] = np.sign(p.value)
    opt.step(0.1)
    assert p.value[0] < 1.0


def test_adam_zero_grad_no_change():
    p = Param(np.array([0.5, -0.25]))
    opt = Adam([p])
    before = p.value.copy()
    opt.step(0.1)
    npt.assert_array_equal(p.value, before)


def test_adam_quadratic_bowl():
    p = Param(np.array([3.0]))
    opt = Adam([p])
    for _ in range(2000):
        p.grad[:] = 2.0 * p.value
        opt.step(0.01)
        if abs(p.value[0]) < 1e-6:
            break
    assert abs(p.value[0]) < 1e-6


def test_lr_schedule():
    assert lr_schedule(0) == pytest.approx(1e-3)
    assert lr_schedule(24) == pytest.approx(1e-3)
    assert lr_schedule(25) == pytest.approx(5e-4)
    assert lr_schedule(99) == pytest.approx(1.25e-4)


# checkpoints -------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(14)
    entries = {
        "cell0.w_x": rng.normal(size=(3, 3, 5, 128)).astype(np.float32),
        "bn0.running_mean": rng.normal(size=32).astype(np.float32),
        "adam.t": np.array([17.0], np.float32),
    }
    path = tmp_path / "model.ckp"
    save_checkpoint(path, entries)
    back = load_checkpoint(path)
    assert sorted(back) == sorted(entries)
    for k in entries:
        npt.assert_array_equal(back[k], entries[k])
    assert path.read_bytes()[:4] == b"CKP1"


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckp"
    path.write_bytes(b"NOPE" + b"\0" * 16)
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)
