"""ConvLSTM forecaster: gate cells, the 32/128/64 stack with batch norm and a
Conv3D head, teacher-forced training, and autoregressive 20-frame rollout."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import (
    Adam,
    BatchNorm,
    Param,
    conv2d,
    glorot,
    im2col2d,
    lr_schedule,
    mae_loss,
    relu,
    relu_backward,
    sigmoid,
)
from .preprocess import SampleTensor
from .raster import step_month

FILTER_COUNTS = (32, 128, 64)
OBSERVED_FRAMES = 5
FORECAST_FRAMES = 20


def _gather3x3(xpad: np.ndarray, out: np.ndarray, hh: int, ww: int) -> None:
    """Fill ``out`` (n, h, w, 9, c) with the 3x3 neighborhoods of a padded grid."""
    k = 0
    for dr in range(3):
        for dc in range(3):
            out[..., k, :] = xpad[:, dr : dr + hh, dc : dc + ww, :]
            k += 1


def _scatter3x3(dcols: np.ndarray, dxpad: np.ndarray, hh: int, ww: int) -> None:
    """Adjoint of :func:`_gather3x3`; accumulates into a zeroed padded buffer."""
    k = 0
    for dr in range(3):
        for dc in range(3):
            dxpad[:, dr : dr + hh, dc : dc + ww, :] += dcols[..., k, :]
            k += 1


def _sigmoid_(z: np.ndarray) -> None:
    """In-place logistic; exp overflow saturates cleanly to 0."""
    np.negative(z, out=z)
    np.exp(z, out=z)
    z += 1.0
    np.reciprocal(z, out=z)


class _SeqWorkspace:
    """Reusable per-shape buffers for one cell's sequence pass."""

    def __init__(self, n, t_len, hh, ww, cin, F, dtype):
        nhw = n * hh * ww
        joint = cin + F
        self.pad = np.zeros((n, hh + 2, ww + 2, joint), dtype=dtype)
        self.cols = np.empty((t_len, nhw, 9 * joint), dtype=dtype)
        self.gates = np.empty((t_len, nhw, 4 * F), dtype=dtype)
        self.c = np.empty((t_len, nhw, F), dtype=dtype)
        self.tc = np.empty((t_len, nhw, F), dtype=dtype)
        self.tmp_f = np.empty((nhw, F), dtype=dtype)
        self.dz = np.empty((nhw, 4 * F), dtype=dtype)
        self.dcols = np.empty((nhw, 9 * joint), dtype=dtype)
        self.dpad = np.empty((n, hh + 2, ww + 2, joint), dtype=dtype)
        self.dh_next = np.empty((nhw, F), dtype=dtype)
        self.djoint = np.zeros((9 * joint, 4 * F), dtype=dtype)


class ConvLSTMCell:
    """One convolutional LSTM layer; gate order (i, f, g, o), forget bias 1.

    The input and hidden convolutions run as a single joint matmul per
    timestep over an im2col patch matrix that is cached for the backward
    pass; all step-local buffers live in a reusable workspace.
    """

    def __init__(self, in_channels: int, filters: int, rng: np.random.Generator, dtype=np.float32):
        self.in_channels = in_channels
        self.filters = filters
        self.w_x = Param(glorot(rng, (3, 3, in_channels, 4 * filters), 9 * in_channels, 9 * 4 * filters, dtype))
        self.w_h = Param(glorot(rng, (3, 3, filters, 4 * filters), 9 * filters, 9 * 4 * filters, dtype))
        b = np.zeros(4 * filters, dtype=dtype)
        b[filters : 2 * filters] = 1.0
        self.b = Param(b)
        self._ws: dict[tuple, _SeqWorkspace] = {}
        self._cache = None

    def params(self):
        return [self.w_x, self.w_h, self.b]

    def _joint_kernel(self) -> np.ndarray:
        cin, F = self.in_channels, self.filters
        joint = np.concatenate([self.w_x.value, self.w_h.value], axis=2)
        return joint.reshape(9 * (cin + F), 4 * F)

    def step(self, x, h_prev, c_prev):
        """Single inference-mode gate update on (n, h, w, c) tensors."""
        F = self.filters
        n, hh, ww, cin = x.shape
        z = im2col2d(x) @ self.w_x.value.reshape(9 * cin, 4 * F)
        z += im2col2d(h_prev) @ self.w_h.value.reshape(9 * F, 4 * F)
        z += self.b.value
        i = sigmoid(z[:, :F])
        f = sigmoid(z[:, F : 2 * F])
        g = np.tanh(z[:, 2 * F : 3 * F])
        o = sigmoid(z[:, 3 * F :])
        c = f * c_prev.reshape(-1, F) + i * g
        tc = np.tanh(c)
        h = o * tc
        shape = (n, hh, ww, F)
        return h.reshape(shape), c.reshape(shape), tc

    def _workspace(self, n, t_len, hh, ww, dtype) -> _SeqWorkspace:
        key = (n, t_len, hh, ww, dtype)
        ws = self._ws.get(key)
        if ws is None:
            # keep at most one live workspace per cell; shapes only vary on
            # the trailing partial batch
            if len(self._ws) > 2:
                self._ws.clear()
            ws = _SeqWorkspace(n, t_len, hh, ww, self.in_channels, self.filters, dtype)
            self._ws[key] = ws
        return ws

    def forward_sequence(self, x_seq: np.ndarray, need_dx: bool = True) -> np.ndarray:
        """Run the cell over (n, t, h, w, c_in) from zero states; caches for BPTT."""
        n, t_len, hh, ww, cin = x_seq.shape
        F = self.filters
        dtype = x_seq.dtype
        nhw = n * hh * ww
        ws = self._workspace(n, t_len, hh, ww, dtype)
        wj = self._joint_kernel()
        h_seq = np.empty((n, t_len, hh, ww, F), dtype=dtype)
        ws.pad[:, 1:-1, 1:-1, cin:] = 0.0  # h_0 = 0
        with np.errstate(over="ignore"):
            for t in range(t_len):
                ws.pad[:, 1:-1, 1:-1, :cin] = x_seq[:, t]
                cols = ws.cols[t]
                _gather3x3(ws.pad, cols.reshape(n, hh, ww, 9, cin + F), hh, ww)
                z = ws.gates[t]
                np.matmul(cols, wj, out=z)
                z += self.b.value
                _sigmoid_(z[:, : 2 * F])
                np.tanh(z[:, 2 * F : 3 * F], out=z[:, 2 * F : 3 * F])
                _sigmoid_(z[:, 3 * F :])
                i, f = z[:, :F], z[:, F : 2 * F]
                g, o = z[:, 2 * F : 3 * F], z[:, 3 * F :]
                c = ws.c[t]
                np.multiply(i, g, out=c)
                if t > 0:
                    np.multiply(f, ws.c[t - 1], out=ws.tmp_f)
                    c += ws.tmp_f
                np.tanh(c, out=ws.tc[t])
                hv = h_seq[:, t]
                np.multiply(
                    o.reshape(n, hh, ww, F), ws.tc[t].reshape(n, hh, ww, F), out=hv
                )
                ws.pad[:, 1:-1, 1:-1, cin:] = hv
        self._cache = (x_seq.shape, ws, need_dx)
        return h_seq

    def backward_sequence(self, dh_seq: np.ndarray):
        """BPTT through the cached forward pass; accumulates parameter grads.

        Returns the input-sequence gradient, or None when the forward ran
        with need_dx=False.
        """
        if self._cache is None:
            raise RuntimeError("backward without forward")
        x_shape, ws, need_dx = self._cache
        n, t_len, hh, ww, cin = x_shape
        F = self.filters
        nhw = n * hh * ww
        wj_t = np.ascontiguousarray(self._joint_kernel().T)

        dx_seq = np.empty(x_shape, dtype=dh_seq.dtype) if need_dx else None
        db = np.zeros_like(self.b.value)
        ws.djoint[...] = 0.0
        dc = np.zeros((nhw, F), dtype=dh_seq.dtype)
        ws.dh_next[...] = 0.0
        dz = ws.dz
        for t in range(t_len - 1, -1, -1):
            z = ws.gates[t]
            i, f = z[:, :F], z[:, F : 2 * F]
            g, o = z[:, 2 * F : 3 * F], z[:, 3 * F :]
            tc = ws.tc[t]
            dh = dh_seq[:, t].reshape(nhw, F) + ws.dh_next
            do = dz[:, 3 * F :]
            np.multiply(dh, tc, out=do)
            dh *= o
            dh *= 1.0 - tc * tc
            dc += dh
            np.multiply(dc, g, out=dz[:, :F])
            dz[:, :F] *= i * (1.0 - i)
            dg = dz[:, 2 * F : 3 * F]
            np.multiply(dc, i, out=dg)
            dg *= 1.0 - g * g
            df = dz[:, F : 2 * F]
            if t > 0:
                np.multiply(dc, ws.c[t - 1], out=df)
                df *= f * (1.0 - f)
            else:
                df[...] = 0.0
            do *= o * (1.0 - o)
            dc *= f
            db += dz.sum(axis=0)
            ws.djoint += ws.cols[t].T @ dz
            np.matmul(dz, wj_t, out=ws.dcols)
            ws.dpad[...] = 0.0
            _scatter3x3(ws.dcols.reshape(n, hh, ww, 9, cin + F), ws.dpad, hh, ww)
            np.copyto(
                ws.dh_next.reshape(n, hh, ww, F), ws.dpad[:, 1:-1, 1:-1, cin:]
            )
            if need_dx:
                dx_seq[:, t] = ws.dpad[:, 1:-1, 1:-1, :cin]

        djoint = ws.djoint.reshape(3, 3, cin + F, 4 * F)
        self.w_x.grad += djoint[:, :, :cin]
        self.w_h.grad += djoint[:, :, cin:]
        self.b.grad += db
        self._cache = None
        return dx_seq


class _HeadWorkspace:
    def __init__(self, n, t_len, hh, ww, c, dtype):
        self.cols = np.empty((t_len, n * hh * ww, 9 * c), dtype=dtype)
        self.dpad = np.empty((n, hh + 2, ww + 2, c), dtype=dtype)


class Conv3DHead:
    """Single-filter 3x3x3 same-padded head over the hidden sequence.

    Evaluated frame by frame so the patch buffers stay cache-sized; the
    temporal taps are shifted into place afterwards. Identical math to
    :func:`regrow.nn.conv3d`.
    """

    def __init__(self, in_channels: int, rng: np.random.Generator, dtype=np.float32):
        self.in_channels = in_channels
        self.kernel = Param(glorot(rng, (3, 3, 3, in_channels, 1), 27 * in_channels, 27, dtype))
        self.bias = Param(np.zeros(1, dtype=dtype))
        self._ws: dict[tuple, _HeadWorkspace] = {}
        self._cache = None

    def params(self):
        return [self.kernel, self.bias]

    def _workspace(self, n, t_len, hh, ww, dtype):
        key = (n, t_len, hh, ww, dtype)
        ws = self._ws.get(key)
        if ws is None:
            if len(self._ws) > 2:
                self._ws.clear()
            ws = _HeadWorkspace(n, t_len, hh, ww, self.in_channels, dtype)
            self._ws[key] = ws
        return ws

    def forward(self, h_seq: np.ndarray) -> np.ndarray:
        n, t_len, hh, ww, c = h_seq.shape
        ws = self._workspace(n, t_len, hh, ww, h_seq.dtype)
        k2 = self.kernel.value.reshape(3, 9 * c, 1)
        out = np.zeros((n, t_len, hh, ww, 1), dtype=h_seq.dtype)
        for t in range(t_len):
            ws.cols[t] = im2col2d(np.ascontiguousarray(h_seq[:, t]))
            for dt in range(3):
                ot = t + 1 - dt
                if 0 <= ot < t_len:
                    out[:, ot] += (ws.cols[t] @ k2[dt]).reshape(n, hh, ww, 1)
        out += self.bias.value
        self._cache = (h_seq.shape, ws)
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward without forward")
        (n, t_len, hh, ww, c), ws = self._cache
        nhw = n * hh * ww
        k2 = self.kernel.value.reshape(3, 9 * c)
        dk2 = np.zeros((3, 9 * c), dtype=dout.dtype)
        # time-major gradient so the temporal taps become block slices
        dmaj = np.ascontiguousarray(dout.transpose(1, 0, 2, 3, 4)).reshape(t_len, nhw)
        dcols_all = np.zeros((t_len, nhw, 9 * c), dtype=dout.dtype)
        spans = ((slice(0, t_len - 1), slice(1, t_len)),
                 (slice(0, t_len), slice(0, t_len)),
                 (slice(1, t_len), slice(0, t_len - 1)))
        for dt, (src, tgt) in enumerate(spans):
            dvec = dmaj[tgt].reshape(-1)
            dk2[dt] = ws.cols[src].reshape(-1, 9 * c).T @ dvec
            dcols_all[src] += dmaj[tgt][:, :, None] * k2[dt]
        dh = np.empty((n, t_len, hh, ww, c), dtype=dout.dtype)
        for t in range(t_len):
            ws.dpad[...] = 0.0
            _scatter3x3(dcols_all[t].reshape(n, hh, ww, 9, c), ws.dpad, hh, ww)
            dh[:, t] = ws.dpad[:, 1:-1, 1:-1, :]
        self.kernel.grad += dk2.reshape(self.kernel.value.shape)
        self.bias.grad += dout.sum(axis=(0, 1, 2, 3))
        self._cache = None
        return dh


class ConvLSTMModel:
    """Three ConvLSTM layers (32, 128, 64 filters), batch norm + ReLU between
    them, and a linear 3x3x3 single-filter head over the hidden sequence."""

    def __init__(self, in_channels: int = 5, filters=FILTER_COUNTS, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.in_channels = in_channels
        self.filters = tuple(filters)
        self.dtype = dtype
        self.cells = []
        prev = in_channels
        for f in self.filters:
            self.cells.append(ConvLSTMCell(prev, f, rng, dtype))
            prev = f
        self.bn = [BatchNorm(self.filters[0], dtype=dtype), BatchNorm(self.filters[1], dtype=dtype)]
        self.head = Conv3DHead(self.filters[2], rng, dtype)
        self._cache = None

    def named_params(self) -> dict[str, Param]:
        out: dict[str, Param] = {}
        for li, cell in enumerate(self.cells):
            out[f"cell{li}.w_x"] = cell.w_x
            out[f"cell{li}.w_h"] = cell.w_h
            out[f"cell{li}.b"] = cell.b
        for bi, bn in enumerate(self.bn):
            out[f"bn{bi}.gamma"] = bn.gamma
            out[f"bn{bi}.beta"] = bn.beta
        out["head.kernel"] = self.head.kernel
        out["head.bias"] = self.head.bias
        return out

    def params(self):
        return list(self.named_params().values())

    def state_entries(self) -> dict[str, np.ndarray]:
        entries = {name: p.value.copy() for name, p in self.named_params().items()}
        for bi, bn in enumerate(self.bn):
            entries[f"bn{bi}.running_mean"] = bn.running_mean.copy()
            entries[f"bn{bi}.running_var"] = bn.running_var.copy()
        return entries

    def load_state(self, entries: dict[str, np.ndarray]) -> None:
        for name, p in self.named_params().items():
            arr = np.asarray(entries[name], dtype=self.dtype)
            if arr.shape != p.value.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.value.shape}")
            p.value[...] = arr
        for bi, bn in enumerate(self.bn):
            bn.running_mean[...] = np.asarray(entries[f"bn{bi}.running_mean"], dtype=self.dtype)
            bn.running_var[...] = np.asarray(entries[f"bn{bi}.running_var"], dtype=self.dtype)

    def forward(self, batch: np.ndarray, train: bool = True) -> np.ndarray:
        """Teacher-forced pass: consume frames 0..T-2, emit T-1 one-step-ahead
        predictions (position t predicts frame t+1; the last position runs
        against the zero-padded temporal frontier, same as rollout)."""
        if batch.ndim != 5:
            raise ValueError(f"batch must be 5-D, got {batch.shape}")
        if batch.shape[1] < 2:
            raise ValueError("need at least 2 timesteps")
        if batch.shape[4] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {batch.shape[4]}")
        x = np.ascontiguousarray(batch[:, :-1], dtype=self.dtype)
        h1 = self.cells[0].forward_sequence(x, need_dx=False)
        a1 = relu(self.bn[0].forward(h1, train))
        h2 = self.cells[1].forward_sequence(a1)
        a2 = relu(self.bn[1].forward(h2, train))
        h3 = self.cells[2].forward_sequence(a2)
        pred = self.head.forward(h3)
        self._cache = (a1, a2) if train else None
        return pred

    def backward(self, dpred: np.ndarray) -> None:
        if self._cache is None:
            raise RuntimeError("backward requires a train-mode forward")
        a1, a2 = self._cache
        dh3 = self.head.backward(dpred)
        da2 = self.cells[2].backward_sequence(dh3)
        dh2 = self.bn[1].backward(relu_backward(da2, a2))
        da1 = self.cells[1].backward_sequence(dh2)
        dh1 = self.bn[0].backward(relu_backward(da1, a1))
        self.cells[0].backward_sequence(dh1)
        self._cache = None

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()


def _head_last_frame(model: ConvLSTMModel, h_prev, h_last) -> np.ndarray:
    """Head output at the newest sequence position (future tap is zero padding)."""
    k = model.head.kernel.value
    out = conv2d(h_last, k[1], model.head.bias.value)
    if h_prev is not None:
        out += conv2d(h_prev, k[0])
    return out


def _infer_step(model: ConvLSTMModel, x, states):
    """One inference-mode step through the stack; states is [(h, c), ...]."""
    a = x
    new_states = []
    for li, cell in enumerate(model.cells):
        h, c, _tc = cell.step(a, states[li][0], states[li][1])
        new_states.append((h, c))
        a = h
        if li < 2:
            bn = model.bn[li]
            ivar = 1.0 / np.sqrt(bn.running_var + bn.eps)
            a = relu(bn.gamma.value * ((a - bn.running_mean) * ivar) + bn.beta.value)
    return a, new_states


@dataclass
class ExogenousPolicy:
    """persistence+season rollout inputs: EVI tracks the predicted ratio, LST
    and PRECIP repeat their first observed same-calendar-month frame, the
    fire mask stays frozen."""

    channels: tuple[str, ...]
    months: np.ndarray            # month index per absolute step
    lst_by_month: np.ndarray      # (n, 12, h, w)
    precip_by_month: np.ndarray   # (n, 12, h, w)
    firemask: np.ndarray          # (n, h, w)
    evi_factor: float = 0.9

    @classmethod
    def from_series(cls, data: np.ndarray, channels, start_month: int) -> "ExogenousPolicy":
        """Build from observed (n, t, h, w, c) series with t covering >= 12 months."""
        channels = tuple(channels)
        n, t_len = data.shape[:2]
        months = np.array([step_month(start_month, t) for t in range(t_len)])
        first: dict[int, int] = {}
        for t, m in enumerate(months):
            first.setdefault(int(m), t)
        if len(first) < 12:
            raise ValueError(f"series covers only {len(first)} calendar months, need 12")
        order = [first[m] for m in range(12)]
        lst = data[..., channels.index("LST")][:, order]
        precip = data[..., channels.index("PRECIP")][:, order]
        fmask = data[:, OBSERVED_FRAMES - 1, :, :, channels.index("FIREMASK")]
        return cls(channels, months, lst, precip, fmask)

    def frame(self, t: int, ndvi_pred: np.ndarray) -> np.ndarray:
        m = int(self.months[t]) if t < len(self.months) else (int(self.months[0]) + t) % 12
        n, hh, ww = ndvi_pred.shape
        x = np.empty((n, hh, ww, len(self.channels)), dtype=ndvi_pred.dtype)
        x[..., self.channels.index("NDVI")] = ndvi_pred
        x[..., self.channels.index("EVI")] = np.clip(self.evi_factor * ndvi_pred, 0.0, 1.0)
        x[..., self.channels.index("LST")] = self.lst_by_month[:, m]
        x[..., self.channels.index("PRECIP")] = self.precip_by_month[:, m]
        x[..., self.channels.index("FIREMASK")] = self.firemask
        return x


def rollout_forecast(
    model,
    observed: np.ndarray,
    exog: ExogenousPolicy,
    horizon: int = FORECAST_FRAMES,
) -> np.ndarray:
    """Warm up on 5 observed frames, then autoregress ``horizon`` NDVI frames.

    ``observed`` is (n, 5, h, w, c) (a single (5, h, w, c) series is
    accepted); the predicted ratio feeds back as the next NDVI input while
    the other channels follow ``exog``. Returns (n, horizon, h, w).
    """
    single = observed.ndim == 4
    if single:
        observed = observed[None]
    if observed.shape[1] < OBSERVED_FRAMES:
        raise ValueError(f"need {OBSERVED_FRAMES} observed frames, got {observed.shape[1]}")
    observed = np.ascontiguousarray(observed[:, :OBSERVED_FRAMES], dtype=model.dtype)
    n, _, hh, ww, _ = observed.shape

    states = [
        (
            np.zeros((n, hh, ww, f), dtype=model.dtype),
            np.zeros((n, hh, ww, f), dtype=model.dtype),
        )
        for f in model.filters
    ]
    h3_prev = None
    h3_last = None
    for t in range(OBSERVED_FRAMES):
        h3_prev = h3_last
        h3_last, states = _infer_step(model, observed[:, t], states)

    preds = np.empty((n, horizon, hh, ww), dtype=model.dtype)
    for step in range(horizon):
        t_target = OBSERVED_FRAMES + step
        y = _head_last_frame(model, h3_prev, h3_last)[..., 0]
        preds[:, step] = y
        if step < horizon - 1:
            x_next = exog.frame(t_target, y)
            h3_prev = h3_last
            h3_last, states = _infer_step(model, x_next, states)
    if not np.isfinite(preds).all():
        raise FloatingPointError("rollout produced non-finite values")
    return preds[0] if single else preds


@dataclass
class TrainResult:
    epochs: list[dict] = field(default_factory=list)
    best_val: float = np.inf
    best_epoch: int = -1

    @property
    def train_curve(self):
        return [row["train_mae"] for row in self.epochs]

    @property
    def val_curve(self):
        return [row["val_mae"] for row in self.epochs]


def _eval_mae(model, data: np.ndarray, target_channel: int, chunk: int = 32) -> float:
    total, count = 0.0, 0
    for s in range(0, data.shape[0], chunk):
        batch = data[s : s + chunk]
        pred = model.forward(batch, train=False)
        target = batch[:, 1:, :, :, target_channel : target_channel + 1]
        total += float(np.abs(pred - target).sum())
        count += pred.size
    return total / count


def train(
    model: ConvLSTMModel,
    train_samples: SampleTensor,
    val_samples: SampleTensor,
    epochs: int = 100,
    batch_size: int = 8,
    seed: int = 0,
    lr0: float = 1e-3,
    decay: float = 0.5,
    lr_step: int = 25,
    log=None,
) -> TrainResult:
    """Teacher-forced training with adaptive-moment steps and the step-decay
    schedule; keeps the best-validation parameter snapshot and restores it."""
    if train_samples.n_samples == 0:
        raise ValueError("empty training set")
    overlap = set(train_samples.fire_ids) & set(val_samples.fire_ids)
    if overlap:
        raise ValueError(f"train/val fires overlap: {sorted(overlap)}")
    target_channel = train_samples.channels.index("NDVI")
    x_train = np.ascontiguousarray(train_samples.data, dtype=model.dtype)
    x_val = np.ascontiguousarray(val_samples.data, dtype=model.dtype)

    rng = np.random.default_rng(seed)
    optim = Adam(model.params())
    result = TrainResult()
    best_state = None
    initial_val = None

    for epoch in range(epochs):
        lr = lr_schedule(epoch, lr0=lr0, decay=decay, step=lr_step)
        perm = rng.permutation(x_train.shape[0])
        loss_sum, n_seen = 0.0, 0
        for s in range(0, perm.size, batch_size):
            batch = x_train[perm[s : s + batch_size]]
            pred = model.forward(batch, train=True)
            target = batch[:, 1:, :, :, target_channel : target_channel + 1]
            loss, dpred = mae_loss(pred, target)
            model.zero_grad()
            model.backward(dpred)
            optim.step(lr)
            loss_sum += loss * batch.shape[0]
            n_seen += batch.shape[0]
        train_mae = loss_sum / n_seen
        val_mae = _eval_mae(model, x_val, target_channel) if x_val.size else train_mae
        row = {"epoch": epoch, "lr": lr, "train_mae": train_mae, "val_mae": val_mae}
        result.epochs.append(row)
        if log is not None:
            log(row)
        if initial_val is None:
            initial_val = val_mae
        if val_mae > 10.0 * max(initial_val, 1e-12):
            raise RuntimeError(
                f"training diverged at epoch {epoch}: val MAE {val_mae:.4g} "
                f"exceeds 10x the initial {initial_val:.4g}"
            )
        if val_mae < result.best_val:
            result.best_val = val_mae
            result.best_epoch = epoch
            best_state = model.state_entries()
    if best_state is not None:
        model.load_state(best_state)
    return result
