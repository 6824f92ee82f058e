"""Forward primitives with their reverse-mode rules.

Every function takes Tensors (or array-likes for constant operands) and returns a
Tensor; when any input is tracked the result is recorded on that tape together
with a closure computing the input gradients from the output gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, record


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return record(
        "mul",
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return record(
        "div",
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return record("scale", x.data * c, (x,), lambda g: (g * c,))


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", np.asarray(out), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return record("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(xs, axis: int = 1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ref = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(ref) or any(o != r for i, (o, r) in enumerate(zip(other, ref)) if i != axis % len(ref)):
            raise ValueError(f"concat: shapes {xs[0].shape} and {x.shape} differ off axis {axis}")
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return record("concat", np.concatenate([x.data for x in xs], axis=axis), xs, lambda g: np.split(g, splits, axis=axis))


def chunk(x, parts: int, axis: int = -1) -> list[Tensor]:
    """Split ``x`` into ``parts`` equal pieces along ``axis``."""
    x = as_tensor(x)
    axis = axis % x.ndim
    if x.shape[axis] % parts:
        raise ValueError(f"chunk: axis {axis} of {x.shape} is not divisible into {parts} parts")
    size = x.shape[axis] // parts
    shape = x.shape
    out = []
    for i in range(parts):
        index = [slice(None)] * x.ndim
        index[axis] = slice(i * size, (i + 1) * size)
        index = tuple(index)

        def backward(g, index=index):
            full = np.zeros(shape)
            full[index] = g
            return (full,)

        out.append(record("chunk", x.data[index].copy(), (x,), backward))
    return out


# ---------------------------------------------------------------------------
# activations


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return record("softmax", s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def dropout(x, p: float, rng: np.random.Generator | None, mode: str = "train") -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if mode != "train" or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs the run's seeded generator")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return record("dropout", x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# convolution and pooling


def _pad_hw(a: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x, w, b, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with an (O, I, k, k) kernel, plus per-channel bias."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, i, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {w.shape}")
    if c != i:
        raise ValueError(f"conv2d: input {x.shape} has {c} channels but kernel {w.shape} expects {i}")
    if b.shape != (o,):
        raise ValueError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: need stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    span_h, span_w = h + 2 * pad - k, wd + 2 * pad - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ValueError(f"conv2d: input {x.shape} with k={k} pad={pad} stride={stride} gives a non-integral output extent")
    ho, wo = span_h // stride + 1, span_w // stride + 1

    xp = _pad_hw(x.data, pad)
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]  # n c ho wo k k
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * k * k)
    wmat = w.data.reshape(o, c * k * k)
    out = (cols @ wmat.T).transpose(0, 3, 1, 2) + b.data[None, :, None, None]

    wdata = w.data

    def backward(g):
        gt = g.transpose(0, 2, 3, 1)  # n ho wo o
        dw = np.tensordot(gt, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(o, c, k, k)
        db = g.sum(axis=(0, 2, 3))
        dxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                contrib = np.tensordot(g, wdata[:, :, di, dj], axes=([1], [0]))  # n ho wo c
                dxp[:, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride] += contrib.transpose(0, 3, 1, 2)
        dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
        return dx, dw, db

    return record("conv2d", np.ascontiguousarray(out), (x, w, b), backward)


def conv_transpose2d(x, w, b, stride: int = 2) -> Tensor:
    """Exact x2 upsampling transposed convolution with an (I, O, 2, 2) kernel."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv_transpose2d: expected 4-d input and kernel, got {x.shape} and {w.shape}")
    i, o, k, k2 = w.shape
    if stride != 2 or k != 2 or k2 != 2:
        raise ValueError(f"conv_transpose2d: only stride 2 with a 2x2 kernel is supported, got stride={stride} kernel={w.shape}")
    n, c, h, wd = x.shape
    if c != i:
        raise ValueError(f"conv_transpose2d: input {x.shape} has {c} channels but kernel {w.shape} expects {i}")
    if b.shape != (o,):
        raise ValueError(f"conv_transpose2d: bias {b.shape} does not match kernel {w.shape}")

    xd, wdata = x.data, w.data
    # out[n, o, 2h+p, 2w+q] = sum_c x[n, c, h, w] * W[c, o, p, q]
    y = np.tensordot(xd, wdata, axes=([1], [0]))  # n h w o p q
    out = y.transpose(0, 3, 1, 4, 2, 5).reshape(n, o, 2 * h, 2 * wd) + b.data[None, :, None, None]

    def backward(g):
        g6 = g.reshape(n, o, h, 2, wd, 2)  # n o h p w q
        dx = np.tensordot(g6, wdata, axes=([1, 3, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        dw = np.tensordot(xd, g6, axes=([0, 2, 3], [0, 2, 4]))  # c o p q
        db = g.sum(axis=(0, 2, 3))
        return dx, dw, db

    return record("conv_transpose2d", np.ascontiguousarray(out), (x, w, b), backward)


def _windows(a: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = a.shape
    return a.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)


def _unwindows(a: np.ndarray, k: int) -> np.ndarray:
    n, c, hh, ww, _ = a.shape
    return a.reshape(n, c, hh, ww, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hh * k, ww * k)


def _check_pool(op: str, x: Tensor, k: int, stride: int) -> None:
    if x.ndim != 4:
        raise ValueError(f"{op}: expected NCHW input, got {x.shape}")
    if k != stride:
        raise ValueError(f"{op}: only non-overlapping windows (k == stride) are supported, got k={k} stride={stride}")
    if x.shape[2] % stride or x.shape[3] % stride:
        raise ValueError(f"{op}: extents {x.shape[2:]} are not divisible by stride {stride}")


def max_pool2d(x, k: int = 2, stride: int = 2) -> Tensor:
    """Windowed maximum; ties route the gradient to the first index in row-major order."""
    x = as_tensor(x)
    _check_pool("max_pool2d", x, k, stride)
    win = _windows(x.data, k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros(win.shape)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        return (_unwindows(gw, k),)

    return record("max_pool2d", out, (x,), backward)


def avg_pool2d(x, k: int = 2, stride: int = 2) -> Tensor:
    x = as_tensor(x)
    _check_pool("avg_pool2d", x, k, stride)
    out = _windows(x.data, k).mean(axis=-1)
    kk = k * k
    return record(
        "avg_pool2d",
        out,
        (x,),
        lambda g: (_unwindows(np.repeat(g[..., None] / kk, kk, axis=-1), k),),
    )


def global_avg_pool(x) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    return mean(as_tensor(x), axis=(2, 3))


# ---------------------------------------------------------------------------
# normalization


@dataclass
class RunningStats:
    """Per-channel running mean/variance used by batch_norm in eval mode."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int) -> RunningStats:
        return cls(np.zeros(channels), np.ones(channels))


def batch_norm(x, gamma, beta, eps: float = 1e-5, mode: str = "train", running: RunningStats | None = None) -> Tensor:
    """Per-channel normalization over (N, H, W).

    Train mode normalizes with batch statistics and, when ``running`` is given,
    folds them into its running averages. Eval mode uses ``running``.
    """
    if eps <= 0:
        raise ValueError(f"batch_norm: eps must be positive, got {eps}")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ValueError(f"batch_norm: input {x.shape} incompatible with gamma {gamma.shape} / beta {beta.shape}")
    c = x.shape[1]
    gd = gamma.data[None, :, None, None]
    if mode == "train":
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        if running is not None:
            unbiased = var.reshape(c) * (m / (m - 1) if m > 1 else 1.0)
            mom = running.momentum
            running.mean = (1 - mom) * running.mean + mom * mu.reshape(c)
            running.var = (1 - mom) * running.var + mom * unbiased

        def backward(g):
            dxhat = g * gd
            dx = inv * (dxhat - dxhat.mean(axis=(0, 2, 3), keepdims=True) - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
            return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    elif mode == "eval":
        if running is None:
            raise ValueError("batch_norm: eval mode needs running statistics")
        mu = running.mean[None, :, None, None]
        inv = 1.0 / np.sqrt(running.var[None, :, None, None] + eps)
        xhat = (x.data - mu) * inv

        def backward(g):
            return g * gd * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    else:
        raise ValueError(f"batch_norm: mode must be 'train' or 'eval', got {mode!r}")
    out = xhat * gd + beta.data[None, :, None, None]
    return record("batch_norm", out, (x, gamma, beta), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine transform."""
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be positive, got {eps}")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: input {x.shape} incompatible with gamma {gamma.shape} / beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    red = tuple(range(x.ndim - 1))

    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return record("layer_norm", xhat * gd + beta.data, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# transformer pieces


def linear(x, w, b) -> Tensor:
    """Position-wise affine map ``x @ w + b`` with w of shape (in, out)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"linear: input {x.shape}, weight {w.shape} and bias {b.shape} are incompatible")
    xd, wd = x.data, w.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, wd.shape[0])

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        return (g2 @ wd.T).reshape(xd.shape), x2.T @ g2, g2.sum(axis=0)

    return record("linear", (x2 @ wd + b.data).reshape(*lead, wd.shape[1]), (x, w, b), backward)


def attention(q, k, v, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention over (B, T, D) token groups."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 3 or q.shape != k.shape or k.shape != v.shape:
        raise ValueError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} must share a (B, T, D) shape")
    bsz, t, d = q.shape
    if heads < 1 or d % heads:
        raise ValueError(f"attention: embedding dim {d} is not divisible by {heads} heads")
    dh = d // heads
    sc = 1.0 / np.sqrt(dh)

    def split(a):
        return a.reshape(bsz, t, heads, dh).transpose(0, 2, 1, 3)

    def merge(a):
        return a.transpose(0, 2, 1, 3).reshape(bsz, t, d)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    s = (qh @ kh.transpose(0, 1, 3, 2)) * sc
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = merge(p @ vh)

    def backward(g):
        gh = split(g)
        dv = p.transpose(0, 1, 3, 2) @ gh
        dp = gh @ vh.transpose(0, 1, 3, 2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * sc
        return merge(ds @ kh), merge(ds.transpose(0, 1, 3, 2) @ qh), merge(dv)

    return record("attention", out, (q, k, v), backward)


def _partition(a: np.ndarray, win: int, shift: int) -> np.ndarray:
    n, c, h, w = a.shape
    if shift:
        a = np.roll(a, (-shift, -shift), axis=(2, 3))
    a = a.reshape(n, c, h // win, win, w // win, win).transpose(0, 2, 4, 3, 5, 1)
    return a.reshape(n * (h // win) * (w // win), win * win, c)


def _merge(a: np.ndarray, shape: tuple[int, int, int, int], win: int, shift: int) -> np.ndarray:
    n, c, h, w = shape
    a = a.reshape(n, h // win, w // win, win, win, c).transpose(0, 5, 1, 3, 2, 4).reshape(n, c, h, w)
    if shift:
        a = np.roll(a, (shift, shift), axis=(2, 3))
    return a


def _check_windows(op: str, shape, win: int, shift: int) -> None:
    if len(shape) != 4:
        raise ValueError(f"{op}: expected NCHW shape, got {shape}")
    if win < 1 or shape[2] % win or shape[3] % win:
        raise ValueError(f"{op}: extents {tuple(shape[2:])} are not divisible by window {win}")
    if not 0 <= shift < win:
        raise ValueError(f"{op}: shift must satisfy 0 <= shift < {win}, got {shift}")


def window_partition(x, win: int, shift: int = 0) -> Tensor:
    """Cyclically roll by ``-shift`` then cut into (N*windows, win*win, C) row-major token groups."""
    x = as_tensor(x)
    _check_windows("window_partition", x.shape, win, shift)
    shape = x.shape
    return record(
        "window_partition",
        _partition(x.data, win, shift),
        (x,),
        lambda g: (_merge(g, shape, win, shift),),
    )


def window_merge(tokens, shape: tuple[int, int, int, int], win: int, shift: int = 0) -> Tensor:
    """Inverse of :func:`window_partition` for an NCHW target ``shape``."""
    tokens = as_tensor(tokens)
    shape = tuple(int(s) for s in shape)
    _check_windows("window_merge", shape, win, shift)
    n, c, h, w = shape
    expected = (n * (h // win) * (w // win), win * win, c)
    if tokens.shape != expected:
        raise ValueError(f"window_merge: tokens {tokens.shape} do not match target {shape} (expected {expected})")
    return record(
        "window_merge",
        _merge(tokens.data, shape, win, shift),
        (tokens,),
        lambda g: (_partition(g, win, shift),),
    )


__all__ = [
    "RunningStats",
    "add",
    "attention",
    "avg_pool2d",
    "batch_norm",
    "chunk",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "div",
    "dropout",
    "global_avg_pool",
    "layer_norm",
    "linear",
    "max_pool2d",
    "mean",
    "mul",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "softmax",
    "sub",
    "sum",
    "transpose",
    "window_merge",
    "window_partition",
]
