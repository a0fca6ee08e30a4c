"""Minimal numpy layer engine with exact backward passes.

Activations are laid out batch x channel x freq x time. Every layer keeps what
it needs from the last forward call, so ``backward`` must follow ``forward``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

FULL = "full"
PADDINGS = ("valid", "same_time_only", "same_both")

# stream offsets for independent generators derived from one seed
STREAM_INIT = 0
STREAM_DROPOUT = 1
STREAM_SHUFFLE = 2
STREAM_CROP = 3


class ShapeError(ValueError):
    pass


def make_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(stream,)))


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    weight_decay: float = 1e-4
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


def he_init(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)


def _same_pads(k: int) -> tuple[int, int]:
    # trailing side takes the extra zero for even extents
    lead = (k - 1) // 2
    return lead, k - 1 - lead


class Layer:
    """Base layer: parameters live in ``params``; ``grads`` mirrors its keys."""

    decay = ()  # parameter names subject to weight decay

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def zero_grad(self):
        # zero in place so callers holding references to the arrays stay valid
        for k, v in self.params.items():
            g = self.grads.get(k)
            if g is None or g.shape != v.shape or g.dtype != v.dtype:
                self.grads[k] = np.zeros_like(v)
            else:
                g.fill(0)


class Conv2D(Layer):
    decay = ("W",)

    def __init__(self, in_channels, n_filters, m, n, padding="valid", dtype=np.float32,
                 rng=None):
        super().__init__()
        if m < 1 or n < 1:
            raise ValueError("filter extents must be >= 1")
        if padding not in PADDINGS:
            raise ValueError(f"unknown padding {padding!r}")
        self.m, self.n, self.padding = m, n, padding
        shape = (n_filters, in_channels, m, n)
        if rng is None:
            W = np.zeros(shape, dtype)
        else:
            W = he_init(shape, in_channels * m * n, rng, dtype)
        self.params = {"W": W, "b": np.zeros(n_filters, dtype)}
        self.need_input_grad = True
        self.zero_grad()

    def out_shape(self, shape):
        C, M, N = shape
        F, Cw = self.params["W"].shape[:2]
        if C != Cw:
            raise ShapeError(f"conv expects {Cw} input channels, got {C}")
        Mo = M if self.padding == "same_both" else M - self.m + 1
        No = N if self.padding != "valid" else N - self.n + 1
        if Mo < 1 or No < 1:
            raise ShapeError(f"filter {self.m}x{self.n} does not fit input {M}x{N}")
        return F, Mo, No

    def _freq_pads(self):
        return _same_pads(self.m) if self.padding == "same_both" else (0, 0)

    def forward(self, x, train=False, cache=None):
        return conv_forward([self], x, cache)[0]

    def _tap_slices(self, N, No):
        """Pairs (output slice, Z slice) per time tap; padding is implicit."""
        if self.padding == "valid":
            return [(slice(0, No), slice(j, j + No)) for j in range(self.n)]
        lead, _ = _same_pads(self.n)
        pairs = []
        for j in range(self.n):
            s = j - lead
            if s >= 0:
                pairs.append((slice(0, N - s), slice(s, N)))
            else:
                pairs.append((slice(-s, N), slice(0, N + s)))
        return pairs

    def backward(self, dy):
        return conv_backward([self], [dy])


def _columns(x, m, pads, cache):
    """Frequency-only im2col: rows (b, mo, t), columns (c, k). Shared through ``cache``."""
    top, bottom = pads
    key = (id(x), m, top, bottom)
    if cache is not None and key in cache:
        return cache[key]
    xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (0, 0))) if top or bottom else x
    win = sliding_window_view(xp, m, axis=2)  # B, C, Mo, N, m
    B, C, Mo, N, _ = win.shape
    cols = win.transpose(0, 2, 3, 1, 4).reshape(B * Mo * N, C * m)
    if cache is not None:
        cache[key] = cols
    return cols


def conv_forward(convs, x, cache=None):
    """Run convolutions that share input, filter height and padding with one GEMM.

    Time taps are folded into the GEMM output rows (filter-major, one
    (batch*freq, time) plane per tap and filter) and then shift-added, so only
    the frequency axis is unrolled.
    """
    first = convs[0]
    if any(c.m != first.m or c.padding != first.padding for c in convs):
        raise ValueError("grouped convolutions must share filter height and padding")
    B, C, M, N = x.shape
    shapes = [c.out_shape((C, M, N)) for c in convs]
    Mo = shapes[0][1]
    cols = _columns(x, first.m, first._freq_pads(), cache)
    # rows of Wg: (layer, tap, filter); columns: (channel, freq tap)
    Wg = np.concatenate([c.params["W"].transpose(3, 0, 1, 2).reshape(-1, C * first.m)
                         for c in convs], axis=0)
    Z = (Wg @ cols.T).reshape(-1, B * Mo, N)

    outs, start = [], 0
    for c, (F, _, No) in zip(convs, shapes):
        out = np.zeros((F, B * Mo, No), dtype=Z.dtype)
        for j, (dst, src) in enumerate(c._tap_slices(N, No)):
            out[:, :, dst] += Z[start + j * F:start + (j + 1) * F, :, src]
        out += c.params["b"][:, None, None]
        outs.append(np.ascontiguousarray(out.reshape(F, B, Mo, No).transpose(1, 0, 2, 3)))
        start += c.n * F
    state = (x.shape, cols, Wg)
    for c in convs:
        c._cache = state
    return outs


def conv_backward(convs, dys):
    """Backward of a :func:`conv_forward` group; returns the summed input gradient or None."""
    (B, C, M, N), cols, Wg = convs[0]._cache
    m = convs[0].m
    Mo = dys[0].shape[2]
    dZ = np.zeros((Wg.shape[0], B * Mo, N), dtype=dys[0].dtype)
    start = 0
    for c, dy in zip(convs, dys):
        F, No = dy.shape[1], dy.shape[3]
        c.grads["b"] += dy.sum(axis=(0, 2, 3))
        d = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(F, B * Mo, No)
        for j, (dst, src) in enumerate(c._tap_slices(N, No)):
            dZ[start + j * F:start + (j + 1) * F, :, src] = d[:, :, dst]
        start += c.n * F
    dZ = dZ.reshape(Wg.shape[0], -1)
    dW = dZ @ cols
    start = 0
    for c, dy in zip(convs, dys):
        F = dy.shape[1]
        c.grads["W"] += dW[start:start + c.n * F].reshape(c.n, F, C, m).transpose(1, 2, 3, 0)
        start += c.n * F
    if not any(c.need_input_grad for c in convs):
        return None

    dcols = (dZ.T @ Wg).reshape(B, Mo, N, C, m)
    top, bottom = convs[0]._freq_pads()
    dxp = np.zeros((B, C, M + top + bottom, N), dtype=dZ.dtype)
    for k in range(m):
        dxp[:, :, k:k + Mo, :] += dcols[..., k].transpose(0, 3, 1, 2)
    return dxp[:, :, top:top + M, :]


class MaxPool2D(Layer):
    def __init__(self, pool_m=1, pool_n=1, truncate=False):
        super().__init__()
        for p in (pool_m, pool_n):
            if p != FULL and (not isinstance(p, int) or p < 1):
                raise ValueError(f"pool extent must be >= 1 or FULL, got {p!r}")
        self.pool_m, self.pool_n, self.truncate = pool_m, pool_n, truncate

    def extents(self, M, N):
        pm = M if self.pool_m == FULL else self.pool_m
        pn = N if self.pool_n == FULL else self.pool_n
        return pm, pn

    def out_shape(self, shape):
        C, M, N = shape
        pm, pn = self.extents(M, N)
        if not self.truncate and (M % pm or N % pn):
            raise ShapeError(f"pool {pm}x{pn} does not divide feature map {M}x{N}")
        if M // pm < 1 or N // pn < 1:
            raise ShapeError(f"pool {pm}x{pn} larger than feature map {M}x{N}")
        return C, M // pm, N // pn

    def forward(self, x, train=False):
        B, C, M, N = x.shape
        _, Mo, No = self.out_shape((C, M, N))
        pm, pn = self.extents(M, N)
        w = x[:, :, :Mo * pm, :No * pn].reshape(B, C, Mo, pm, No, pn)
        w = w.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Mo, No, pm * pn)
        idx = w.argmax(axis=-1)  # first occurrence on ties
        self._cache = (x.shape, idx, pm, pn)
        return np.take_along_axis(w, idx[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        (B, C, M, N), idx, pm, pn = self._cache
        Mo, No = idx.shape[2:]
        dw = np.zeros((B, C, Mo, No, pm * pn), dtype=dy.dtype)
        np.put_along_axis(dw, idx[..., None], dy[..., None], axis=-1)
        dw = dw.reshape(B, C, Mo, No, pm, pn).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros((B, C, M, N), dtype=dy.dtype)
        dx[:, :, :Mo * pm, :No * pn] = dw.reshape(B, C, Mo * pm, No * pn)
        return dx


class BatchNorm(Layer):
    """Per-channel batch normalisation over batch and spatial axes."""

    def __init__(self, channels, momentum=0.9, epsilon=1e-5, dtype=np.float32):
        super().__init__()
        if not 0 < momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        self.momentum, self.epsilon = momentum, epsilon
        self.params = {"gamma": np.ones(channels, dtype), "beta": np.zeros(channels, dtype)}
        self.buffers = {"running_mean": np.zeros(channels, dtype),
                        "running_var": np.ones(channels, dtype)}
        self.zero_grad()

    @staticmethod
    def _axes(x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _bcast(self, v, x):
        return v if x.ndim == 2 else v[None, :, None, None]

    def forward(self, x, train=False):
        axes = self._axes(x)
        gamma, beta = self.params["gamma"], self.params["beta"]
        if train:
            count = x.size // x.shape[1]
            if count < 2:
                raise ShapeError("batch norm needs at least 2 values per channel in train mode")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            mom = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm[...] = mom * rm + (1 - mom) * mean
            rv[...] = mom * rv + (1 - mom) * var * count / (count - 1)
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - self._bcast(mean, x)) * self._bcast(inv, x)
        self._cache = (xhat, inv, train)
        return (self._bcast(gamma, x) * xhat + self._bcast(beta, x)).astype(x.dtype, copy=False)

    def backward(self, dy):
        xhat, inv, train = self._cache
        axes = self._axes(dy)
        self.grads["gamma"] += (dy * xhat).sum(axis=axes)
        self.grads["beta"] += dy.sum(axis=axes)
        dxhat = dy * self._bcast(self.params["gamma"], dy)
        if not train:
            return dxhat * self._bcast(inv, dy)
        count = dy.size // dy.shape[1]
        s1 = self._bcast(dxhat.sum(axis=axes), dy)
        s2 = self._bcast((dxhat * xhat).sum(axis=axes), dy)
        return (count * dxhat - s1 - xhat * s2) * self._bcast(inv, dy) / count


class ELU(Layer):
    def forward(self, x, train=False):
        neg = x <= 0
        expm = np.expm1(np.minimum(x, 0))
        self._cache = (neg, expm)
        return np.where(neg, expm, x)

    def backward(self, dy):
        neg, expm = self._cache
        return np.where(neg, dy * (expm + 1), dy)


class Dropout(Layer):
    """Inverted dropout; identity at inference."""

    def __init__(self, p, rng=None):
        super().__init__()
        if not 0 <= p < 1:
            raise ValueError("dropout probability must lie in [0, 1)")
        self.p = p
        self.rng = rng

    def forward(self, x, train=False):
        if not train or self.p == 0:
            self._mask = None
            return x
        keep = (self.rng.random(x.shape) >= self.p).astype(x.dtype)
        self._mask = keep / x.dtype.type(1 - self.p)
        return x * self._mask

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask


class Flatten(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


class Dense(Layer):
    decay = ("W",)

    def __init__(self, n_in, n_out, dtype=np.float32, rng=None):
        super().__init__()
        W = np.zeros((n_out, n_in), dtype) if rng is None else he_init((n_out, n_in), n_in, rng, dtype)
        self.params = {"W": W, "b": np.zeros(n_out, dtype)}
        self.zero_grad()

    def forward(self, x, train=False):
        W = self.params["W"]
        if x.shape[-1] != W.shape[1]:
            raise ShapeError(f"dense expects {W.shape[1]} inputs, got {x.shape[-1]}")
        self._x = x
        return x @ W.T + self.params["b"]

    def backward(self, dy):
        self.grads["W"] += dy.T @ self._x
        self.grads["b"] += dy.sum(axis=0)
        return dy @ self.params["W"]


# --- functional forms ----------------------------------------------------------

def conv2d(x, W, b=None, padding="valid"):
    """Single-example cross-correlation: C x M x N input, F x C x m x n filters."""
    W = np.asarray(W)
    x = np.asarray(x, dtype=W.dtype)
    if x.ndim != 3:
        raise ShapeError("conv2d expects a C x M x N input")
    layer = Conv2D(W.shape[1], W.shape[0], W.shape[2], W.shape[3], padding, dtype=W.dtype)
    layer.params["W"] = W
    if b is not None:
        layer.params["b"] = np.asarray(b, dtype=W.dtype)
    return layer.forward(x[None])[0]


def maxpool(x, pool_m, pool_n, truncate=False):
    x = np.asarray(x)
    squeeze = x.ndim == 2
    x4 = x[None, None] if squeeze else x[None]
    out = MaxPool2D(pool_m, pool_n, truncate).forward(x4)[0]
    return out[0] if squeeze else out


def elu(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def dense(x, W, b):
    W = np.asarray(W)
    x = np.asarray(x, dtype=W.dtype)
    if x.shape[-1] != W.shape[1] or len(b) != W.shape[0]:
        raise ShapeError("dense weight/bias/input dimensions disagree")
    return W @ x + np.asarray(b, dtype=W.dtype)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softmax_xent(logits, target):
    """Mean cross-entropy over the batch, and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    target = np.asarray(target, dtype=logits.dtype)
    single = logits.ndim == 1
    z = np.atleast_2d(logits)
    t = np.atleast_2d(target)
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -(t * logp).sum(axis=1)
    grad = (np.exp(logp) - t) / len(z)
    if single:
        return float(loss[0]), grad[0]
    return float(loss.mean()), grad


def sigmoid_bce(logits, targets):
    """Per-example sum of binary cross-entropies, averaged over the batch."""
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=logits.dtype)
    single = logits.ndim == 1
    z = np.atleast_2d(logits)
    t = np.atleast_2d(targets)
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    grad = (sigmoid(z) - t) / len(z)
    if single:
        return float(per.sum()), grad[0]
    return float(per.sum(axis=1).mean()), grad


def sgd_step(params, grads, cfg: SgdConfig, decay=None):
    """In-place SGD update ``w -= lr * (g + wd * w)``.

    ``decay`` is an iterable of booleans parallel to ``params``; entries marked
    False (biases, batch-norm scale/shift) skip weight decay. Default: decay all.
    """
    if decay is None:
        decay = [True] * len(params)
    for w, g, d in zip(params, grads, decay):
        if w.shape != g.shape:
            raise ShapeError(f"parameter {w.shape} and gradient {g.shape} disagree")
        lr = w.dtype.type(cfg.learning_rate)
        if d and cfg.weight_decay:
            w -= lr * (g + w.dtype.type(cfg.weight_decay) * w)
        else:
            w -= lr * g
    return params


# --- containers and gradient checking -------------------------------------------

class Sequential:
    """Chain of layers ending in a loss; the minimal model-fragment interface."""

    def __init__(self, layers, loss="softmax", rng=None):
        self.layers = list(layers)
        self.loss_kind = loss
        self.rng = rng

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def loss(self, logits, targets):
        fn = softmax_xent if self.loss_kind == "softmax" else sigmoid_bce
        return fn(logits, targets)

    def named_layers(self):
        return [(f"{i}.{type(layer).__name__.lower()}", layer)
                for i, layer in enumerate(self.layers)]

    def zero_grad(self):
        for _, layer in self.named_layers():
            layer.zero_grad()


@dataclass
class GradcheckRow:
    layer: str
    n_checked: int
    max_rel_error: float
    passed: bool
    n_kinks: int = 0  # entries skipped because every step straddled a kink


@dataclass
class GradcheckReport:
    rows: list[GradcheckRow]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.rows), default=0.0)

    def to_dict(self):
        return {"tolerance": self.tolerance, "passed": self.passed,
                "max_rel_error": self.max_rel_error,
                "layers": [vars(r) for r in self.rows]}


KINK_TOLERANCE = 0.1


def rel_error(analytic, numeric, floor=1e-5):
    """Error relative to the finite-difference value, with an absolute floor."""
    return np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)


def gradcheck(model, x, targets, tolerance=1e-4, step=1e-5, max_per_tensor=None,
              seed=0, grad_hook=None) -> GradcheckReport:
    """Compare analytic parameter gradients with central differences.

    The model must expose ``forward``, ``backward``, ``loss``, ``named_layers``
    and ``zero_grad``; it should hold float64 parameters. Dropout masks are held
    fixed across evaluations by restoring the model's generator state. When
    ``max_per_tensor`` is set, a seeded random subset of entries is checked.
    ``grad_hook`` may rewrite analytic gradients (used to test the detector).

    Max-pool switches make the loss piecewise smooth. An entry whose two
    one-sided differences disagree is retried with a 10x and 100x smaller step;
    if the interval still straddles a kink the entry is skipped and counted.
    """
    rng_state = model.rng.bit_generator.state if getattr(model, "rng", None) else None
    saved = [{k: v.copy() for k, v in layer.buffers.items()} for _, layer in model.named_layers()]

    def restore():
        if rng_state is not None:
            model.rng.bit_generator.state = rng_state
        for (_, layer), buf in zip(model.named_layers(), saved):
            for k, v in buf.items():
                layer.buffers[k][...] = v

    def loss_at():
        restore()
        loss, _ = model.loss(model.forward(x, train=True), targets)
        return loss

    restore()
    model.zero_grad()
    logits = model.forward(x, train=True)
    _, dlogits = model.loss(logits, targets)
    model.backward(dlogits)

    pick = np.random.default_rng(seed)
    rows = []
    for name, layer in model.named_layers():
        if not layer.params:
            continue
        worst, checked, kinks = 0.0, 0, 0
        for pname, w in layer.params.items():
            analytic = layer.grads[pname].copy()
            if grad_hook is not None:
                analytic = grad_hook(name, pname, analytic)
            flat = w.reshape(-1)
            idx = np.arange(flat.size)
            if max_per_tensor is not None and flat.size > max_per_tensor:
                idx = np.sort(pick.choice(flat.size, max_per_tensor, replace=False))
            for i in idx:
                orig = flat[i]
                mid = loss_at()
                numeric = None
                for scale in (1.0, 0.1, 0.01):
                    h = step * scale * max(1.0, abs(orig))
                    flat[i] = orig + h
                    up = loss_at()
                    flat[i] = orig - h
                    down = loss_at()
                    flat[i] = orig
                    if rel_error((up - mid) / h, (mid - down) / h, 1e-3) < KINK_TOLERANCE:
                        numeric = (up - down) / (2 * h)
                        break
                if numeric is None:
                    kinks += 1
                    continue
                worst = max(worst, float(rel_error(analytic.reshape(-1)[i], numeric)))
                checked += 1
        rows.append(GradcheckRow(name, checked, worst, worst < tolerance, kinks))
    restore()
    return GradcheckReport(rows, tolerance)
