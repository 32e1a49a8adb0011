"""Differentiable primitives.

Every function accepts ``Tensor`` or array-like inputs and returns a
``Tensor``.  Elementwise ops broadcast like numpy; gradients are summed back
to the operand shapes.
"""

from __future__ import annotations

import builtins

import numpy as np

from .autograd import Tensor, default_dtype, make_result


class ShapeError(ValueError):
    pass


def _t(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=default_dtype()))


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic ------------------------------------------------

def add(a, b):
    a, b = _t(a), _t(b)
    _check_broadcast(a, b, "add")
    return make_result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = _t(a), _t(b)
    _check_broadcast(a, b, "sub")
    return make_result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = _t(a), _t(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _t(a), _t(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward)


def neg(a):
    a = _t(a)
    return make_result(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    """``a ** p`` for a constant real exponent."""
    a = _t(a)
    p = float(p)
    out = a.data**p
    return make_result(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def sqrt(a):
    a = _t(a)
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,))


def exp(a):
    a = _t(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a):
    a = _t(a)
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,))


def log10(a):
    a = _t(a)
    scale = 1.0 / np.log(10.0)
    return make_result(np.log10(a.data), (a,), lambda g: (g * scale / a.data,))


def maximum(a, floor):
    """Elementwise ``max(a, floor)`` with a constant floor; the gradient
    passes only where ``a`` exceeds the floor."""
    a = _t(a)
    keep = a.data > floor
    out = np.where(keep, a.data, np.asarray(floor, dtype=a.dtype))
    return make_result(out, (a,), lambda g: (g * keep,))


# -- activations -----------------------------------------------------------

def _sigmoid(x):
    # tanh form: no overflow for large |x|
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def sigmoid(a):
    a = _t(a)
    out = _sigmoid(a.data)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = _t(a)
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),))


def swish(a):
    """x * sigmoid(x)."""
    a = _t(a)
    s = _sigmoid(a.data)
    out = a.data * s
    return make_result(out, (a,), lambda g: (g * (s + out * (1.0 - s)),))


def relu(a):
    a = _t(a)
    keep = a.data > 0
    return make_result(a.data * keep, (a,), lambda g: (g * keep,))


def glu(a, axis=-1):
    """Gated linear unit: first half times sigmoid of the second half."""
    a = _t(a)
    n = a.shape[axis]
    if n % 2:
        raise ShapeError(f"glu: axis {axis} of shape {a.shape} has odd length")
    value, gate = split(a, 2, axis=axis)
    return mul(value, sigmoid(gate))


# -- reductions ------------------------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = sorted(ax % len(shape) for ax in axes)
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False):
    a = _t(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return make_result(
        out, (a,), lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)),)
    )


def mean(a, axis=None, keepdims=False):
    a = _t(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(out.size, 1)
    return make_result(
        out,
        (a,),
        lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / count,),
    )


def dot(a, b, axis=-1):
    return sum(mul(a, b), axis=axis)


def l2_norm(a, axis=None):
    return sqrt(sum(mul(a, a), axis=axis))


# -- linear algebra --------------------------------------------------------

def matmul(a, b):
    a, b = _t(a), _t(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if a.ndim == 1:
        raise ShapeError(f"matmul: left operand must be at least 2-D, got {a.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            if b.ndim == 2:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    if b.ndim == 2 and a.ndim > 2:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + b.shape[-1:])
    else:
        out = a.data @ b.data
    return make_result(out, (a, b), backward)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with weight stored as [in, out]."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def einsum(subscripts, a, b):
    """Two-operand einsum whose gradient is again a two-operand einsum.

    Every index of each operand must appear in the output or in the other
    operand, and no operand may repeat an index.
    """
    a, b = _t(a), _t(b)
    ins, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if len(set(s)) != len(s) or any(c not in out_sub and c not in other for c in s):
            raise ValueError(f"einsum: unsupported subscripts {subscripts!r}")
    try:
        out = np.einsum(subscripts, a.data, b.data, optimize=True)
    except ValueError as err:
        raise ShapeError(f"einsum {subscripts!r}: shapes {a.shape} and {b.shape}: {err}") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.einsum(f"{out_sub},{sb}->{sa}", g, b.data, optimize=True)
        if b.requires_grad:
            gb = np.einsum(f"{out_sub},{sa}->{sb}", g, a.data, optimize=True)
        return ga, gb

    return make_result(out, (a, b), backward)


# -- shape manipulation ----------------------------------------------------

def reshape(a, shape):
    a = _t(a)
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    a = _t(a)
    inverse = np.argsort(axes)
    return make_result(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),)
    )


def getitem(a, idx):
    a = _t(a)

    items = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, np.integer, builtins.slice)) or i is None or i is Ellipsis for i in items)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_result(a.data[idx], (a,), backward)


def concat(tensors, axis=-1):
    tensors = [_t(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return make_result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def split(a, parts, axis=-1):
    a = _t(a)
    n = a.shape[axis]
    step = n // parts
    out = []
    for i in range(parts):
        sl = [builtins.slice(None)] * a.ndim
        sl[axis] = builtins.slice(i * step, (i + 1) * step)
        out.append(getitem(a, tuple(sl)))
    return out


def unfold(a, size, axis=-2, left=None, window_last=False):
    """Sliding windows along ``axis``.

    Window ``t`` covers input positions ``t - left .. t - left + size - 1``;
    out-of-range positions read zero.  ``left = size - 1`` (the default)
    gives causal windows ending at ``t``.  The new window axis goes right
    after ``axis``, or last when ``window_last`` is set.
    """
    a = _t(a)
    if left is None:
        left = size - 1
    right = size - 1 - left
    axis = axis % a.ndim
    n = a.shape[axis]
    pad = [(0, 0)] * a.ndim
    pad[axis] = (left, right)
    padded = np.pad(a.data, pad)
    win = np.lib.stride_tricks.sliding_window_view(padded, size, axis=axis)
    win_axis = a.ndim if window_last else axis + 1
    if not window_last:
        win = np.moveaxis(win, -1, win_axis)
    out = np.ascontiguousarray(win)

    def backward(g):
        full = np.zeros(padded.shape, dtype=g.dtype)
        gw = np.ascontiguousarray(np.moveaxis(g, win_axis, 0))
        dst = [builtins.slice(None)] * a.ndim
        for k in range(size):
            dst[axis] = builtins.slice(k, k + n)
            full[tuple(dst)] += gw[k]
        keep = [builtins.slice(None)] * a.ndim
        keep[axis] = builtins.slice(left, left + n)
        return (full[tuple(keep)],)

    return make_result(out, (a,), backward)


# -- normalisation and attention helpers -----------------------------------

def softmax(a, axis=-1, mask=None):
    """Softmax along ``axis``.  Positions where ``mask`` is False get zero
    probability; every softmax row must keep at least one position."""
    a = _t(a)
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), backward)


def normalize(a, axis=-1, eps=1e-5):
    """Zero-mean, unit-variance along ``axis`` (no affine parameters)."""
    a = _t(a)
    mu = a.data.mean(axis=axis, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gom = (g * out).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - out * gom),)

    return make_result(out, (a,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last (channel) axis of each frame."""
    return add(mul(normalize(x, axis=-1, eps=eps), gamma), beta)


def group_norm(x, num_groups, gamma, beta, eps=1e-5):
    """Group norm over the channel axis of each frame independently.

    Statistics never mix frames, so the op is causal along time.
    """
    x = _t(x)
    c = x.shape[-1]
    if c % num_groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {num_groups} groups")
    grouped = reshape(x, x.shape[:-1] + (num_groups, c // num_groups))
    normed = reshape(normalize(grouped, axis=-1, eps=eps), x.shape)
    return add(mul(normed, gamma), beta)


# -- convolutions ----------------------------------------------------------

def conv1d_causal(x, weight, bias=None):
    """Causal 1-D convolution on [B, T, C_in] with weight [K, C_in, C_out].

    Output frame t reads input frames t-K+1 .. t; the last kernel tap is
    aligned with the current frame.
    """
    x, weight = _t(x), _t(weight)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"conv1d_causal: input {x.shape} vs weight {weight.shape}")
    y = einsum("btki,kio->bto", unfold(x, weight.shape[0], axis=1), weight)
    return y if bias is None else add(y, bias)


def depthwise_conv1d_causal(x, weight, bias=None, left=None):
    """Per-channel causal convolution on [B, T, C] with weight [K, C].

    y[t] = sum_k weight[k] * x[t - left + k] with ``left = K - 1`` by
    default; only the non-causal ablation build overrides ``left``.
    """
    x, weight = _t(x), _t(weight)
    if x.ndim != 3 or weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"depthwise_conv1d_causal: input {x.shape} vs weight {weight.shape}")
    k_size = weight.shape[0]
    if left is None:
        left = k_size - 1
    t = x.shape[1]
    xp = np.pad(x.data, ((0, 0), (left, k_size - 1 - left), (0, 0)))
    w = weight.data
    y = np.zeros(x.shape, dtype=np.result_type(x.data, w))
    for k in range(k_size):
        y += xp[:, k:k + t, :] * w[k]

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gp = np.zeros(xp.shape, dtype=g.dtype)
            for k in range(k_size):
                gp[:, k:k + t, :] += g * w[k]
            gx = gp[:, left:left + t, :]
        if weight.requires_grad:
            gw = np.stack([(g * xp[:, k:k + t, :]).sum(axis=(0, 1)) for k in range(k_size)])
        return gx, gw

    out = make_result(y, (x, weight), backward)
    return out if bias is None else add(out, bias)


# -- framing ---------------------------------------------------------------

def frame(a, window, hop):
    """Split the last axis into frames [..., T, window] (rectangular window,
    zero-padded tail).  Adjoint of :func:`overlap_add` with unit gain."""
    a = _t(a)
    n = a.shape[-1]
    num = num_frames(n, window, hop)
    total = (num - 1) * hop + window
    padded = np.zeros(a.shape[:-1] + (total,), dtype=a.dtype)
    padded[..., :n] = a.data
    idx = np.arange(num)[:, None] * hop + np.arange(window)[None, :]
    out = padded[..., idx]

    return make_result(out, (a,), lambda g: (_overlap_sum(g, hop)[..., :n],))


def overlap_add(frames, hop, gain=1.0):
    """Overlap-add [..., T, window] frames into [..., (T-1)*hop + window],
    multiplying the sum by ``gain``."""
    frames = _t(frames)
    num, window = frames.shape[-2:]
    out = _overlap_sum(frames.data, hop)
    out *= gain
    idx = np.arange(num)[:, None] * hop + np.arange(window)[None, :]
    return make_result(out, (frames,), lambda g: (g[..., idx] * gain,))


def _overlap_sum(frames, hop):
    num, window = frames.shape[-2:]
    lead = frames.shape[:-2]
    total = (num - 1) * hop + window
    if window % hop == 0:
        r = window // hop
        chunks = np.zeros(lead + (num - 1 + r, hop), dtype=frames.dtype)
        split_frames = frames.reshape(lead + (num, r, hop))
        for m in range(r):
            chunks[..., m:m + num, :] += split_frames[..., :, m, :]
        return chunks.reshape(lead + (total,))
    out = np.zeros(lead + (total,), dtype=frames.dtype)
    for k in range(num):
        out[..., k * hop:k * hop + window] += frames[..., k, :]
    return out


def num_frames(n, window, hop):
    if n <= 0:
        raise ValueError("cannot frame an empty signal")
    if n <= window:
        return 1
    return -(-(n - window) // hop) + 1
