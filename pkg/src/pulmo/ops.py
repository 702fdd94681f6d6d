"""Differentiable operations over :class:`~pulmo.tensor.Tensor`.

Image tensors are N x C x H x W. Convolutions are cross-correlations computed
as one GEMM over an im2col buffer.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, UsageError
from .tensor import Tensor, as_tensor, make_result

# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "mul")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    return make_result(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.data.dtype),)

    return make_result(np.asarray(x.data.mean(), dtype=x.data.dtype), (x,), backward, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return make_result(x.data.reshape(shape), (x,), backward, "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Entries ``[start, stop)`` along axis 1 (channels of a feature map, input
    channels of a conv weight)."""

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return make_result(np.ascontiguousarray(x.data[:, start:stop]), (x,), backward, "channel_slice")


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _col2im(dcols: np.ndarray, xp_shape, kh, kw, stride, ho, wo) -> np.ndarray:
    n, c, hp, wp = xp_shape
    dcols = dcols.reshape(c, kh, kw, n, ho, wo)
    dxt = np.zeros((c, n, hp, wp), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
    return dxt.transpose(1, 0, 2, 3)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise DimensionError(f"conv2d channel axis mismatch: input C={c}, weight Cin={cin}")
    if stride < 1 or padding < 0:
        raise UsageError(f"bad stride/padding {stride}/{padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding} (axes H, W)")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} does not match Cout={cout}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if kh == 1 and kw == 1 and stride == 1:
        cols = xp.transpose(1, 0, 2, 3).reshape(c, -1)
    else:
        cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = wmat.T @ g2
            if kh == 1 and kw == 1 and stride == 1:
                gxp = dcols.reshape(c, n, xp.shape[2], xp.shape[3]).transpose(1, 0, 2, 3)
            else:
                gxp = _col2im(dcols, xp.shape, kh, kw, stride, ho, wo)
            gx = np.ascontiguousarray(gxp[:, :, padding : padding + h, padding : padding + w])
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv2d")


def up_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-2 transpose convolution with a 2x2 kernel; weight is Cin x Cout x 2 x 2."""
    if weight.ndim != 4 or weight.shape[2:] != (2, 2):
        raise UsageError(f"up_conv2d supports only 2x2 kernels, got weight shape {weight.shape}")
    if x.ndim != 4:
        raise DimensionError(f"up_conv2d expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    cin, cout = weight.shape[:2]
    if cin != c:
        raise DimensionError(f"up_conv2d channel axis mismatch: input C={c}, weight Cin={cin}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} does not match Cout={cout}")

    xm = x.data.transpose(1, 0, 2, 3).reshape(c, -1)  # C x NHW
    wm = weight.data.reshape(c, cout * 4)  # C x (Cout*2*2)
    y = (wm.T @ xm).reshape(cout, 2, 2, n, h, w)
    out = y.transpose(3, 0, 4, 1, 5, 2).reshape(n, cout, 2 * h, 2 * w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gy = g.reshape(n, cout, h, 2, w, 2).transpose(1, 3, 5, 0, 2, 4).reshape(cout * 4, -1)
        gw = (xm @ gy.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = np.ascontiguousarray((wm @ gy).reshape(c, n, h, w).transpose(1, 0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "up_conv2d")


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Gradient goes to the first row-major maximum."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2d needs even spatial extents, got H={h}, W={w}")
    ho, wo = h // 2, w // 2
    win = x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        return (gw.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return make_result(out, (x,), backward, "maxpool2d")


def upsample_nearest2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward, "upsample_nearest2x")


def global_avg_pool(x: Tensor) -> Tensor:
    """N x C x H x W -> N x C."""
    n, c, h, w = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.data.dtype),)

    return make_result(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_result(x.data * pos, (x,), lambda g: (g * pos,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return make_result(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    if x.ndim < 2:
        raise DimensionError(f"softmax over channels needs a channel axis, got shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, (x,), backward, "softmax")


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "softmax_channels": softmax}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise UsageError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# normalization / regularization / affine
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1) -> "BatchNormState":
        return cls(np.zeros(channels, np.float32), np.ones(channels, np.float32), momentum)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str = "train",
    eps: float = 1e-5,
) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match C={c}")
    m = n * h * w
    gb = gamma.data[None, :, None, None]
    if mode == "train":
        if m < 2:
            raise DimensionError(f"batchnorm2d in train mode needs N*H*W >= 2, got {m}")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        mom = state.momentum
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mu
        state.running_var[...] = (1 - mom) * state.running_var + mom * var * (m / (m - 1))
    elif mode == "eval":
        mu = state.running_mean.astype(x.data.dtype)
        var = state.running_var.astype(x.data.dtype)
    else:
        raise UsageError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    inv = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gb + beta.data[None, :, None, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gb
            if mode == "train":
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward, "batchnorm2d")


def concat_channels(*tensors: Tensor) -> Tensor:
    if not tensors:
        raise UsageError("concat_channels needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise DimensionError(f"concat_channels: shape {t.shape} incompatible with {ref} (batch/spatial axes)")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=1)

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return make_result(out, tensors, backward, "concat_channels")


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"dense: bias {bias.shape} does not match K={weight.shape[1]}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "dense")


def dropout(x: Tensor, rate: float, mode: str = "train", rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) so eval is the identity."""
    if not 0.0 <= rate < 1.0:
        raise UsageError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    if mode != "train":
        raise UsageError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if rng is None:
        raise UsageError("train-mode dropout needs an explicit rng")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

_CLAMP = 1e-7


def binary_cross_entropy(pred: Tensor, target) -> Tensor:
    """Mean per-element BCE on probabilities (clamped to [1e-7, 1-1e-7]).

    The gradient is evaluated at the clamped probability and not zeroed at the
    clamp, so saturated wrong pixels keep pulling.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != pred.shape:
        raise DimensionError(f"binary_cross_entropy: target {t.shape} vs prediction {pred.shape}")
    t = t.astype(pred.data.dtype)
    p = np.clip(pred.data, _CLAMP, 1.0 - _CLAMP)
    loss = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean()
    n = p.size

    def backward(g):
        return ((g / n) * (p - t) / (p * (1.0 - p)),)

    return make_result(np.asarray(loss, dtype=pred.data.dtype), (pred,), backward, "binary_cross_entropy")


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean over the batch of -log softmax(logits)[target]; target holds class indices."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target).astype(np.int64).reshape(-1)
    if logits.ndim != 2 or t.shape[0] != logits.shape[0]:
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape} vs targets {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= logits.shape[1]):
        raise UsageError(f"class targets must lie in [0, {logits.shape[1]})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nb = logits.shape[0]
    rows = np.arange(nb)
    loss = (logsum - z[rows, t]).mean()

    def backward(g):
        s = np.exp(z - logsum[:, None])
        s[rows, t] -= 1.0
        return (s * (g / nb),)

    return make_result(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward, "softmax_cross_entropy")


def loss(prediction: Tensor, target, kind: str) -> Tensor:
    if kind == "binary_ce_on_probabilities":
        return binary_cross_entropy(prediction, target)
    if kind == "softmax_ce_on_logits":
        return softmax_cross_entropy(prediction, target)
    raise UsageError(f"unknown loss kind {kind!r}")
