"""Minimal dense-tensor layers with hand-derived reverse-mode gradients.

Everything the recurrent forecaster needs: same-padded 3x3 / 3x3x3
convolutions, batch normalization, the usual activations, MAE loss, a
bias-corrected adaptive-moment optimizer, the step-decay learning-rate
schedule, and the CKP1 checkpoint container. Compute is float32 by default;
gradient checks run the same code in float64.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

DEFAULT_DTYPE = np.float32

CKP_MAGIC = b"CKP1"
CKP_VERSION = 1


class Param:
    """A trainable tensor with its gradient and optimizer moments."""

    __slots__ = ("value", "grad", "m", "v")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=DEFAULT_DTYPE):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# convolution


def im2col2d(x: np.ndarray) -> np.ndarray:
    """Gather 3x3 zero-padded patches: (n, h, w, c) -> (n*h*w, 9c)."""
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    cols = np.empty((n, h, w, 9, c), dtype=x.dtype)
    k = 0
    for dr in range(3):
        for dc in range(3):
            cols[:, :, :, k, :] = xp[:, dr : dr + h, dc : dc + w, :]
            k += 1
    return cols.reshape(n * h * w, 9 * c)


def col2im2d(dcols: np.ndarray, n: int, h: int, w: int, c: int) -> np.ndarray:
    """Scatter-add transpose of :func:`im2col2d`."""
    dcols = dcols.reshape(n, h, w, 9, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    k = 0
    for dr in range(3):
        for dc in range(3):
            dxp[:, dr : dr + h, dc : dc + w, :] += dcols[:, :, :, k, :]
            k += 1
    return dxp[:, 1:-1, 1:-1, :]


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Same-padded stride-1 3x3 convolution (zero fill outside the grid).

    ``x`` is (h, w, c_in) or batched (n, h, w, c_in); ``kernel`` is
    (3, 3, c_in, c_out).
    """
    single = x.ndim == 3
    if single:
        x = x[None]
    if kernel.shape[:2] != (3, 3):
        raise ValueError(f"kernel must be 3x3, got {kernel.shape[:2]}")
    if kernel.shape[2] != x.shape[3]:
        raise ValueError(f"kernel expects {kernel.shape[2]} channels, input has {x.shape[3]}")
    n, h, w, cin = x.shape
    cout = kernel.shape[3]
    out = im2col2d(x) @ kernel.reshape(9 * cin, cout)
    if bias is not None:
        out += bias
    out = out.reshape(n, h, w, cout)
    return out[0] if single else out


def conv2d_backward(dout: np.ndarray, cols: np.ndarray, kernel: np.ndarray, x_shape):
    """Gradients of conv2d given the forward's im2col matrix."""
    n, h, w, cin = x_shape
    cout = kernel.shape[3]
    d2 = dout.reshape(n * h * w, cout)
    dkernel = (cols.T @ d2).reshape(kernel.shape)
    dbias = d2.sum(axis=0)
    dx = col2im2d(d2 @ kernel.reshape(9 * cin, cout).T, n, h, w, cin)
    return dx, dkernel, dbias


def _shift_taps(dout: np.ndarray):
    """Per-temporal-tap views of the output gradient: tap dt at source frame
    s contributes to output frame s + 1 - dt."""
    taps = []
    for dt in range(3):
        d = np.zeros_like(dout)
        if dt == 0:
            d[:, :-1] = dout[:, 1:]
        elif dt == 1:
            d[...] = dout
        else:
            d[:, 1:] = dout[:, :-1]
        taps.append(d)
    return taps


def conv3d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Same-padded stride-1 3x3x3 convolution over (t, h, w).

    ``x`` is (t, h, w, c_in) or (n, t, h, w, c_in); ``kernel`` is
    (3, 3, 3, c_in, c_out). Each temporal tap is a 2-D convolution over the
    time-flattened batch, then shifted into place.
    """
    single = x.ndim == 4
    if single:
        x = x[None]
    if kernel.shape[:3] != (3, 3, 3):
        raise ValueError(f"kernel must be 3x3x3, got {kernel.shape[:3]}")
    if kernel.shape[3] != x.shape[4]:
        raise ValueError(f"kernel expects {kernel.shape[3]} channels, input has {x.shape[4]}")
    n, t, h, w, cin = x.shape
    cout = kernel.shape[4]
    cols = im2col2d(x.reshape(n * t, h, w, cin))
    out = np.zeros((n, t, h, w, cout), dtype=x.dtype)
    for dt in range(3):
        y = (cols @ kernel[dt].reshape(9 * cin, cout)).reshape(n, t, h, w, cout)
        if dt == 0:
            out[:, 1:] += y[:, :-1]
        elif dt == 1:
            out += y
        else:
            out[:, :-1] += y[:, 1:]
    if bias is not None:
        out += bias
    return out[0] if single else out


def conv3d_backward(dout: np.ndarray, x: np.ndarray, kernel: np.ndarray):
    """Gradients of conv3d; regathers the input patches."""
    single = x.ndim == 4
    if single:
        x = x[None]
        dout = dout[None]
    n, t, h, w, cin = x.shape
    cout = kernel.shape[4]
    cols = im2col2d(x.reshape(n * t, h, w, cin))
    dkernel = np.empty_like(kernel)
    dcols = np.zeros_like(cols)
    for dt, d in enumerate(_shift_taps(dout)):
        d2 = d.reshape(-1, cout)
        dkernel[dt] = (cols.T @ d2).reshape(3, 3, cin, cout)
        dcols += d2 @ kernel[dt].reshape(9 * cin, cout).T
    dbias = dout.reshape(-1, cout).sum(axis=0)
    dx = col2im2d(dcols, n * t, h, w, cin).reshape(x.shape)
    if single:
        dx = dx[0]
    return dx, dkernel, dbias


# ---------------------------------------------------------------------------
# batch normalization


class BatchNorm:
    """Per-channel batch normalization over all leading axes.

    Train mode normalizes with batch statistics and refreshes the running
    averages with momentum 0.9; infer mode is a pure affine map using the
    running averages.
    """

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5, dtype=DEFAULT_DTYPE):
        self.gamma = Param(np.ones(channels, dtype=dtype))
        self.beta = Param(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self._cache = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if x.shape[:-1] == () or x.size == 0:
            raise ValueError("batch normalization needs a nonempty batch")
        red = tuple(range(x.ndim - 1))
        if train:
            mu = x.mean(axis=red)
            var = x.var(axis=red)
            ivar = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mu) * ivar
            self.running_mean = (
                self.momentum * self.running_mean + (1 - self.momentum) * mu
            ).astype(self.running_mean.dtype)
            self.running_var = (
                self.momentum * self.running_var + (1 - self.momentum) * var
            ).astype(self.running_var.dtype)
            self._cache = (xhat, ivar, red)
        else:
            ivar = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean) * ivar
            self._cache = None
        return self.gamma.value * xhat + self.beta.value

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward requires a preceding train-mode forward")
        xhat, ivar, red = self._cache
        self.gamma.grad += (dout * xhat).sum(axis=red)
        self.beta.grad += dout.sum(axis=red)
        dxhat = dout * self.gamma.value
        m = dxhat.mean(axis=red)
        mx = (dxhat * xhat).mean(axis=red)
        return ivar * (dxhat - m - xhat * mx)

    def params(self):
        return [self.gamma, self.beta]


# ---------------------------------------------------------------------------
# activations and loss


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dout, out):
    return dout * (out > 0)


def sigmoid(x):
    # Clipping at 60 keeps exp in range; the tail error is below float32 eps.
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


def tanh(x):
    return np.tanh(x)


def mae_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None):
    """Mean absolute error and its gradient wrt pred; sign(0) contributes 0."""
    diff = pred - target
    if mask is not None:
        diff = diff * mask
        n = int(np.count_nonzero(mask))
        if n == 0:
            raise ValueError("mask excludes every element")
    else:
        n = diff.size
    loss = float(np.abs(diff).sum() / n)
    grad = np.sign(diff) / n
    return loss, grad.astype(pred.dtype)


# ---------------------------------------------------------------------------
# optimization


class Adam:
    """Bias-corrected adaptive-moment updates applied in place."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p in self.params:
            g = p.grad
            p.m += (1 - self.beta1) * (g - p.m)
            p.v += (1 - self.beta2) * (g * g - p.v)
            p.value -= (lr / b1c) * p.m / (np.sqrt(p.v / b2c) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def lr_schedule(epoch: int, lr0: float = 1e-3, decay: float = 0.5, step: int = 25) -> float:
    """Step decay: lr0 * decay^(epoch // step)."""
    return lr0 * decay ** (epoch // step)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, entries: dict[str, np.ndarray]) -> None:
    """Write named float32 tensors into the CKP1 container (sorted by name)."""
    with open(path, "wb") as f:
        f.write(CKP_MAGIC)
        f.write(struct.pack("<II", CKP_VERSION, len(entries)))
        for name in sorted(entries):
            arr = np.ascontiguousarray(entries[name], dtype="<f4")
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != CKP_MAGIC:
        raise ValueError(f"bad checkpoint magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CKP_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        if off + 4 * n > len(blob):
            raise ValueError(f"checkpoint truncated in entry {name!r}")
        out[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape).copy()
        off += 4 * n
    return out


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff(f, arr: np.ndarray, index, h: float = 1e-5) -> float:
    """Central finite difference of scalar-valued ``f`` wrt one array entry."""
    old = arr[index]
    arr[index] = old + h
    fp = f()
    arr[index] = old - h
    fm = f()
    arr[index] = old
    return (fp - fm) / (2.0 * h)


def grad_rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
