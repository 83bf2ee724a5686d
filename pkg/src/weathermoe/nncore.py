"""Small deterministic layer toolkit with hand-written backward passes.

Tensors are plain numpy arrays in NCHW order (a leading batch axis is
always present inside layers). Parameters are float32 by default; every
layer also runs in float64, which is what the gradient checks use.
"""

from __future__ import annotations

import copy
import hashlib
import io
import struct
from collections import OrderedDict
from typing import Callable, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32
NORM_EPS = 1e-5

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix64(z):
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *keys: int) -> int:
    """Mix ``keys`` into ``seed``; used for per-frame / per-stream seeds."""
    s = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    for k in keys:
        with np.errstate(over="ignore"):
            s = _mix64(s ^ _mix64(np.uint64(k & 0xFFFFFFFFFFFFFFFF) + _GAMMA))
    return int(s)


class Rng:
    """SplitMix64 stream.

    Output ``i`` (1-based) is ``mix64(seed + i * 0x9E3779B97F4A7C15)``, so
    draws are counter-based and vectorize without changing the stream.
    Floats take the top 53 bits; normals use Box-Muller on pairs.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * _GAMMA
        return _mix64(z)

    def random(self, size=None) -> np.ndarray | float:
        n = 1 if size is None else int(np.prod(size))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (2.0**-53)
        return float(u[0]) if size is None else u.reshape(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        u = self.random(size)
        return low + (high - low) * u

    def normal(self, loc=0.0, scale=1.0, size=None):
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - self.random(m)
        u2 = self.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        z = loc + scale * z
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, low: int, high: int, size=None):
        u = self.random(size)
        out = low + np.floor(u * (high - low)).astype(np.int64)
        return int(out) if size is None else np.minimum(out, high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.random(n), kind="stable")

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        if replace:
            return self.integers(0, n, size)
        return self.permutation(n)[:size]

    def spawn(self, *keys: int) -> "Rng":
        return Rng(derive_seed(self.seed, *keys))


class Param:
    """A trainable array with its gradient accumulator and momentum buffer."""

    __slots__ = ("value", "grad", "velocity")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = np.zeros_like(value)
        self.velocity = np.zeros_like(value)

    def zero_grad(self) -> None:
        self.grad[...] = 0


# ---------------------------------------------------------------- functional


def _check_4d(x: np.ndarray, name: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{name}: expected NCHW input, got shape {x.shape}")


def conv2d_forward(x, weight, bias, stride=1, pad=0):
    """Returns (out, cols); ``cols`` is the im2col matrix kept for backward."""
    _check_4d(x, "conv2d")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d: input shape {x.shape} does not match kernel shape {weight.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel must be spatially odd, got {weight.shape}")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be >= 1 and pad >= 0")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: input shape {x.shape} too small for kernel shape {weight.shape}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    out = weight.reshape(o, -1) @ cols
    out = out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.reshape(1, o, 1, 1)
    return np.ascontiguousarray(out), cols


def conv2d_backward(grad, x_shape, cols, weight, stride=1, pad=0):
    n, c, h, w = x_shape
    o, _, kh, kw = weight.shape
    _, _, ho, wo = grad.shape
    g2 = grad.transpose(1, 0, 2, 3).reshape(o, -1)
    dw = (g2 @ cols.T).reshape(weight.shape)
    db = grad.sum(axis=(0, 2, 3), dtype=np.float64).astype(grad.dtype)
    dcols = (weight.reshape(o, -1).T @ g2).reshape(c, kh, kw, n, ho, wo)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=grad.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                dcols[:, i, j].transpose(1, 0, 2, 3)
            )
    dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
    return dx, dw, db


def depthwise_forward(x, weight, bias, stride=1, pad=0):
    _check_4d(x, "depthwise_conv2d")
    n, c, h, w = x.shape
    if weight.shape[0] != c or weight.shape[1] != 1:
        raise ValueError(f"depthwise_conv2d: input shape {x.shape} does not match kernel shape {weight.shape}")
    k = weight.shape[2]
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.einsum("nchwij,cij->nchw", win, weight[:, 0])
    if bias is not None:
        out = out + bias.reshape(1, c, 1, 1)
    return out, win


def depthwise_backward(grad, x_shape, win, weight, stride=1, pad=0):
    n, c, h, w = x_shape
    k = weight.shape[2]
    _, _, ho, wo = grad.shape
    dw = np.einsum("nchwij,nchw->cij", win, grad)[:, None]
    db = grad.sum(axis=(0, 2, 3), dtype=np.float64).astype(grad.dtype)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=grad.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                grad * weight[:, 0, i, j].reshape(1, c, 1, 1)
            )
    dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
    return dx, dw, db


def normalize_forward(x, scale, shift, eps=NORM_EPS):
    """Per-sample, per-channel standardization over space, then affine.

    The variance is floored at ``eps`` so constant channels map to ``shift``.
    """
    _check_4d(x, "normalize")
    if scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ValueError(f"normalize: scale/shift shapes {scale.shape}/{shift.shape} vs input {x.shape}")
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=(2, 3), keepdims=True)
    var = ((x64 - mean) ** 2).mean(axis=(2, 3), keepdims=True)
    floored = var < eps
    std = np.sqrt(np.maximum(var, eps))
    xhat = ((x64 - mean) / std).astype(x.dtype)
    out = xhat * scale.reshape(1, -1, 1, 1) + shift.reshape(1, -1, 1, 1)
    return out, (xhat, std.astype(x.dtype), floored)


def normalize_backward(grad, cache, scale):
    xhat, std, floored = cache
    dscale = (grad * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(grad.dtype)
    dshift = grad.sum(axis=(0, 2, 3), dtype=np.float64).astype(grad.dtype)
    dxhat = grad * scale.reshape(1, -1, 1, 1)
    m1 = dxhat.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(grad.dtype)
    m2 = (dxhat * xhat).mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(grad.dtype)
    m2 = np.where(floored, 0, m2).astype(grad.dtype)
    dx = (dxhat - m1 - xhat * m2) / std
    return dx, dscale, dshift


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(grad, probs, axis=-1):
    return probs * (grad - (grad * probs).sum(axis=axis, keepdims=True))


def log_softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch; returns (loss, dlogits)."""
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n = logits.shape[0]
    lp = log_softmax(logits.astype(np.float64))
    loss = -lp[np.arange(n), labels].mean()
    grad = np.exp(lp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), (grad / n).astype(logits.dtype)


def smooth_l1_loss(pred, target, beta: float = 1.0):
    """Summed smooth-L1; returns (loss, dpred)."""
    d = (pred - target).astype(np.float64)
    ad = np.abs(d)
    loss = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta).sum()
    grad = np.where(ad < beta, d / beta, np.sign(d))
    return float(loss), grad.astype(pred.dtype)


def _softplus(x):
    return np.logaddexp(0.0, x)


def focal_loss(logits, targets, alpha: float = 0.25, gamma: float = 2.0):
    """Summed binary focal loss on logits; returns (loss, dlogits)."""
    x = logits.astype(np.float64)
    t = targets.astype(np.float64)
    p = 1.0 / (1.0 + np.exp(-x))
    log_p = -_softplus(-x)
    log_q = -_softplus(x)
    q = 1.0 - p
    pos = -alpha * q**gamma * log_p
    neg = -(1.0 - alpha) * p**gamma * log_q
    loss = (t * pos + (1.0 - t) * neg).sum()
    gpos = alpha * q**gamma * (gamma * p * log_p - q)
    gneg = (1.0 - alpha) * p**gamma * (p - gamma * q * log_q)
    grad = t * gpos + (1.0 - t) * gneg
    return float(loss), grad.astype(logits.dtype)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


# -------------------------------------------------------------------- layers


class Layer:
    """Base class: ``forward`` caches what ``backward`` needs."""

    def __init__(self):
        self._cache = None

    def __call__(self, x):
        return self.forward(x)

    def params(self) -> "OrderedDict[str, Param]":
        return OrderedDict()

    def _need_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called without a cached forward pass")
        return self._cache

    def clear(self) -> None:
        self._cache = None

    def zero_grad(self) -> None:
        for p in self.params().values():
            p.zero_grad()

    def astype(self, dtype) -> "Layer":
        for p in self.params().values():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
            p.velocity = np.zeros_like(p.value)
        return self


def _he(rng: Rng, shape, fan_in):
    return (rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)).astype(DTYPE)


class Conv2d(Layer):
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, pad=None, rng: Rng | None = None):
        super().__init__()
        self.stride = stride
        self.pad = kernel // 2 if pad is None else pad
        shape = (out_ch, in_ch, kernel, kernel)
        w = _he(rng, shape, in_ch * kernel * kernel) if rng is not None else np.zeros(shape, DTYPE)
        self.weight = Param(w)
        self.bias = Param(np.zeros(out_ch, DTYPE))

    def params(self):
        return OrderedDict(weight=self.weight, bias=self.bias)

    def forward(self, x):
        out, cols = conv2d_forward(x, self.weight.value, self.bias.value, self.stride, self.pad)
        self._cache = (x.shape, cols)
        return out

    def backward(self, grad):
        x_shape, cols = self._need_cache()
        dx, dw, db = conv2d_backward(grad, x_shape, cols, self.weight.value, self.stride, self.pad)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class DepthwiseConv2d(Layer):
    def __init__(self, channels, kernel=3, stride=1, pad=None, rng: Rng | None = None):
        super().__init__()
        self.stride = stride
        self.pad = kernel // 2 if pad is None else pad
        shape = (channels, 1, kernel, kernel)
        w = _he(rng, shape, kernel * kernel) if rng is not None else np.zeros(shape, DTYPE)
        self.weight = Param(w)
        self.bias = Param(np.zeros(channels, DTYPE))

    def params(self):
        return OrderedDict(weight=self.weight, bias=self.bias)

    def forward(self, x):
        out, win = depthwise_forward(x, self.weight.value, self.bias.value, self.stride, self.pad)
        self._cache = (x.shape, win)
        return out

    def backward(self, grad):
        x_shape, win = self._need_cache()
        dx, dw, db = depthwise_backward(grad, x_shape, win, self.weight.value, self.stride, self.pad)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class Normalize(Layer):
    """Instance-style normalization with a learned per-channel affine."""

    def __init__(self, channels, eps=NORM_EPS):
        super().__init__()
        self.eps = eps
        self.scale = Param(np.ones(channels, DTYPE))
        self.shift = Param(np.zeros(channels, DTYPE))

    def params(self):
        return OrderedDict(scale=self.scale, shift=self.shift)

    def forward(self, x):
        out, cache = normalize_forward(x, self.scale.value, self.shift.value, self.eps)
        self._cache = cache
        return out

    def backward(self, grad):
        dx, ds, dsh = normalize_backward(grad, self._need_cache(), self.scale.value)
        self.scale.grad += ds
        self.shift.grad += dsh
        return dx


class ReLU(Layer):
    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, grad):
        return grad * self._need_cache()


class GlobalAvgPool(Layer):
    def forward(self, x):
        _check_4d(x, "global_average_pool")
        self._cache = x.shape
        return x.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)

    def backward(self, grad):
        n, c, h, w = self._need_cache()
        return np.broadcast_to(grad[:, :, None, None] / (h * w), (n, c, h, w)).astype(grad.dtype)


class Linear(Layer):
    def __init__(self, in_features, out_features, rng: Rng | None = None):
        super().__init__()
        shape = (out_features, in_features)
        w = (rng.normal(0.0, np.sqrt(1.0 / in_features), size=shape).astype(DTYPE)
             if rng is not None else np.zeros(shape, DTYPE))
        self.weight = Param(w)
        self.bias = Param(np.zeros(out_features, DTYPE))

    def params(self):
        return OrderedDict(weight=self.weight, bias=self.bias)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.weight.value.shape[1]:
            raise ValueError(f"linear: input shape {x.shape} does not match weight shape {self.weight.value.shape}")
        self._cache = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, grad):
        x = self._need_cache()
        self.weight.grad += grad.T @ x
        self.bias.grad += grad.sum(axis=0, dtype=np.float64).astype(grad.dtype)
        return grad @ self.weight.value


class Sequential(Layer):
    def __init__(self, *layers: Layer):
        super().__init__()
        self.layers = list(layers)

    def params(self):
        out = OrderedDict()
        for i, layer in enumerate(self.layers):
            for name, p in layer.params().items():
                out[f"{i}.{name}"] = p
        return out

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        self._cache = True
        return x

    def backward(self, grad):
        self._need_cache()
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def clear(self):
        self._cache = None
        for layer in self.layers:
            layer.clear()

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self


def children(layer: Layer):
    """Direct sub-layers held as attributes or in attribute lists."""
    for value in vars(layer).values():
        if isinstance(value, Layer):
            yield value
        elif isinstance(value, list):
            yield from (v for v in value if isinstance(v, Layer))


def detached(layer: Layer) -> Layer:
    """Structural copy sharing Param objects, with its own activation caches.

    Used for inference so a frozen model is never written to.
    """
    clone = copy.copy(layer)
    clone._cache = None
    for name, value in vars(layer).items():
        if isinstance(value, Layer):
            setattr(clone, name, detached(value))
        elif isinstance(value, list) and any(isinstance(v, Layer) for v in value):
            setattr(clone, name, [detached(v) if isinstance(v, Layer) else v for v in value])
    return clone


def relu_pattern(*layers: Layer) -> bytes:
    """Packed on/off masks of every ReLU reached from ``layers`` during their last forward pass."""
    out = []
    stack = list(layers)[::-1]
    while stack:
        layer = stack.pop()
        if isinstance(layer, ReLU) and layer._cache is not None:
            out.append(np.packbits(layer._cache).tobytes())
        stack.extend(list(children(layer))[::-1])
    return b"".join(out)


class DepthwiseSeparableBlock(Sequential):
    """depthwise conv -> norm -> pointwise conv -> norm -> ReLU."""

    def __init__(self, in_ch, out_ch, stride=1, rng: Rng | None = None):
        super().__init__(
            DepthwiseConv2d(in_ch, 3, stride, rng=rng),
            Normalize(in_ch),
            Conv2d(in_ch, out_ch, 1, 1, 0, rng=rng),
            Normalize(out_ch),
            ReLU(),
        )


# ------------------------------------------------------------- spec-level API


def _as_batch(x):
    x = np.asarray(x)
    return (x[None], True) if x.ndim == 3 else (x, False)


def conv2d(x, params, stride: int = 1, pad: int = 0):
    """Convolve a CxHxW (or NCHW) array; ``params`` is a Conv2d or (weight, bias)."""
    w, b = (params.weight.value, params.bias.value) if isinstance(params, Conv2d) else params
    xb, squeeze = _as_batch(x)
    out, _ = conv2d_forward(xb, w, b, stride, pad)
    return out[0] if squeeze else out


def normalize(x, scale, shift, eps: float = NORM_EPS):
    xb, squeeze = _as_batch(x)
    out, _ = normalize_forward(xb, np.asarray(scale), np.asarray(shift), eps)
    return out[0] if squeeze else out


def depthwise_separable_block(x, block: DepthwiseSeparableBlock):
    xb, squeeze = _as_batch(x)
    out = block.forward(xb)
    return out[0] if squeeze else out


def relu(x):
    return np.maximum(x, 0)


def linear(x, params: Linear):
    return params.forward(np.atleast_2d(x))


def global_average_pool(x):
    xb, squeeze = _as_batch(x)
    out = xb.mean(axis=(2, 3))
    return out[0] if squeeze else out


def sgd_step(params: Iterable[Param], lr: float, momentum: float = 0.9) -> None:
    """v <- momentum * v + g; w <- w - lr * v."""
    for p in params:
        p.velocity *= momentum
        p.velocity += p.grad
        p.value -= np.asarray(lr, dtype=p.value.dtype) * p.velocity


# ------------------------------------------------------ checkpoint container

MAGIC = b"WMOECKPT"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1"),
           5: np.dtype("<i4"), 6: np.dtype("<u8")}
_CODES = {v.newbyteorder("="): k for k, v in _DTYPES.items()}


def _dtype_code(a: np.ndarray) -> int:
    key = a.dtype.newbyteorder("=")
    if key not in _CODES:
        raise TypeError(f"unsupported dtype for container: {a.dtype}")
    return _CODES[key]


def dump_tensors(tensors: "dict[str, np.ndarray]") -> bytes:
    """Serialize named arrays.

    Layout (little-endian): 8-byte magic ``WMOECKPT``, u32 version, u32
    count; per entry: u16 name length, utf-8 name, u8 dtype code, u8 ndim,
    ndim x u32 extents, raw data in C order.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr)
        code = _dtype_code(a)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(a.astype(_DTYPES[code], copy=False).tobytes())
    return buf.getvalue()


def load_tensors(data: bytes) -> "OrderedDict[str, np.ndarray]":
    if data[:8] != MAGIC:
        raise ValueError("not a tensor container (bad magic)")
    version, count = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise ValueError(f"unsupported container version {version}")
    off = 16
    out = OrderedDict()
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + ln].decode("utf-8")
        off += ln
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(data, dt, count=nbytes // dt.itemsize, offset=off).reshape(shape).astype(
            dt.newbyteorder("="))
        off += nbytes
    if off != len(data):
        raise ValueError("trailing bytes in tensor container")
    return out


def save_tensors(path, tensors) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_tensors(tensors))


def read_tensors(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        return load_tensors(fh.read())


def state_dict(layer: Layer, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((prefix + k, p.value.copy()) for k, p in layer.params().items())


def load_state(layer: Layer, tensors, prefix: str = "") -> None:
    for k, p in layer.params().items():
        src = tensors[prefix + k]
        if src.shape != p.value.shape:
            raise ValueError(f"checkpoint tensor {prefix + k} has shape {src.shape}, expected {p.value.shape}")
        p.value = src.astype(p.value.dtype).copy()
        p.grad = np.zeros_like(p.value)
        p.velocity = np.zeros_like(p.value)


def param_hash(layer: Layer) -> str:
    return hashlib.sha256(dump_tensors(state_dict(layer))).hexdigest()


# ------------------------------------------------------- finite differences


class KinkCrossed(RuntimeError):
    """A finite-difference probe moved some ReLU input across zero."""


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-3,
                 guard: Callable[[], bytes] | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. array ``x`` (mutated in place, restored).

    With ``guard`` (e.g. ``lambda: relu_pattern(net)``), every probe must
    leave the activation pattern of the unperturbed point intact; otherwise
    the difference straddles a kink and ``KinkCrossed`` is raised.
    """
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    base = None
    if guard is not None:
        f()
        base = guard()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        if guard is not None and guard() != base:
            flat[i] = old
            raise KinkCrossed(f"probe +h on element {i}")
        flat[i] = old - h
        fm = f()
        if guard is not None and guard() != base:
            flat[i] = old
            raise KinkCrossed(f"probe -h on element {i}")
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic, numeric, floor: float = 1e-7) -> float:
    """||a - n|| / max(||a||, ||n||, floor).

    The floor keeps gradients that are exactly zero in theory (a bias feeding
    a normalization) from turning finite-difference noise into a ratio of 1.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    den = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / den)


def check_layer_gradients(layer: Layer, x: np.ndarray, rng: Rng, h: float = 1e-3) -> float:
    """Max relative error of input and parameter gradients of ``layer``.

    Uses the scalar probe ``sum(layer(x) * R)`` with a fixed random ``R``.
    Raises ``KinkCrossed`` when the instance sits within ``h`` of a ReLU kink.
    """
    x = x.astype(np.float64)
    out = layer.forward(x)
    probe = rng.normal(size=out.shape)
    layer.zero_grad()
    dx = layer.backward(probe.astype(out.dtype))

    def f():
        return float((layer.forward(x) * probe).sum())

    def guard():
        return relu_pattern(layer)

    errs = [relative_error(dx, numeric_grad(f, x, h, guard))]
    analytic = {k: p.grad.copy() for k, p in layer.params().items()}
    for k, p in layer.params().items():
        errs.append(relative_error(analytic[k], numeric_grad(f, p.value, h, guard)))
    return max(errs)
