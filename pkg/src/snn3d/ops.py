"""Differentiable tensor operations.

Convolutions use an explicit im2col matrix and a fixed scatter loop in the
backward pass, so accumulation order (and therefore every result bit) is fixed
for a given shape.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, record


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return record((a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return record((a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record((a, b), ad * bd, lambda g: (g * bd, g * ad))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return record((x,), x.data + x.dtype.type(c), lambda g: (g,))


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return record((x,), x.data * c, lambda g: (g * c,))


def scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of ``x`` by the single-element tensor ``s``."""
    if s.size != 1:
        raise ValueError(f"scale: expected a single-element factor, got shape {s.shape}")
    sv = s.data.reshape(())
    xd = x.data

    def backward(g):
        return g * sv, np.sum(g * xd).reshape(s.shape)

    return record((x, s), xd * sv, backward)


def div_scalar(x: Tensor, s: Tensor) -> Tensor:
    """Divide every element of ``x`` by the single-element tensor ``s``."""
    if s.size != 1:
        raise ValueError(f"div_scalar: expected a single-element divisor, got shape {s.shape}")
    sv = s.data.reshape(())
    out = x.data / sv

    def backward(g):
        return g / sv, (-np.sum(g * out) / sv).reshape(s.shape)

    return record((x, s), out, backward)


def square(x: Tensor) -> Tensor:
    xd = x.data
    return record((x,), xd * xd, lambda g: (2 * g * xd,))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * x.data) + 1)
    return record((x,), out, lambda g: (g * out * (1 - out),))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return record((x,), x.data.reshape(shape).copy(), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return record((x,), out, lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def transpose_time_channel(x: Tensor) -> Tensor:
    """N×T×C×H×W <-> N×C×T×H×W (swap axes 1 and 2)."""
    if x.ndim != 5:
        raise ValueError(f"transpose_time_channel: expected a 5-axis tensor, got shape {x.shape}")
    return transpose(x, (0, 2, 1, 3, 4))


def getitem(x: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing."""
    shape, dtype = x.shape, x.dtype

    def backward(g):
        gx = np.zeros(shape, dtype=dtype)
        gx[key] = g
        return (gx,)

    return record((x,), np.array(x.data[key]), backward)


def select_time(x: Tensor, t: int) -> Tensor:
    """x[:, t] for an N×T×… tensor."""
    return getitem(x, (slice(None), t))


def stack_time(xs: Sequence[Tensor]) -> Tensor:
    """Stack T tensors of shape N×… into N×T×…."""
    if not xs:
        raise ValueError("stack_time: nothing to stack")
    first = xs[0].shape
    for x in xs:
        if x.shape != first:
            raise ValueError(f"stack_time: shape mismatch {first} vs {x.shape}")
    out = np.stack([x.data for x in xs], axis=1)
    n = len(xs)
    return record(tuple(xs), out, lambda g: tuple(g[:, t] for t in range(n)))


def concat_time(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate N×Ta×… and N×Tb×… along the time axis."""
    if a.ndim != b.ndim or a.ndim < 2 or a.shape[:1] + a.shape[2:] != b.shape[:1] + b.shape[2:]:
        raise ValueError(f"concat_time: non-time axes differ, {a.shape} vs {b.shape}")
    ta = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return record((a, b), out, lambda g: (g[:, :ta], g[:, ta:]))


def repeat_time(x: Tensor, T: int) -> Tensor:
    """N×… -> N×T×… with every slice equal to x."""
    out = np.repeat(x.data[:, None], T, axis=1)
    return record((x,), out, lambda g: (g.sum(axis=1),))


def permute_time(x: Tensor, perms: np.ndarray) -> Tensor:
    """out[n, t] = x[n, perms[n, t]] for an N×T×… tensor."""
    perms = np.asarray(perms, dtype=np.intp)
    n, t = x.shape[:2]
    if perms.shape != (n, t):
        raise ValueError(f"permute_time: permutation table {perms.shape} does not match {(n, t)}")
    idx = perms.reshape(perms.shape + (1,) * (x.ndim - 2))
    out = np.take_along_axis(x.data, idx, axis=1)
    inv = np.argsort(perms, axis=1).reshape(idx.shape)
    return record((x,), out, lambda g: (np.take_along_axis(g, inv, axis=1),))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def reduce_mean(x: Tensor, axis: int | Sequence[int]) -> Tensor:
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    nd = x.ndim
    for a in axes:
        if not -nd <= a < nd:
            raise ValueError(f"reduce_mean: axis {a} out of range for shape {x.shape}")
    axes = tuple(sorted(a % nd for a in axes))
    count = int(np.prod([x.shape[a] for a in axes]))
    shape = x.shape
    out = x.data.mean(axis=axes)

    def backward(g):
        g = np.expand_dims(g, axes) / g.dtype.type(count)
        return (np.broadcast_to(g, shape).copy(),)

    return record((x,), out, backward)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return record((x,), np.asarray(x.data.sum()), lambda g: (np.full(shape, g, dtype=g.dtype),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return record((x,), np.asarray(x.data.mean()), lambda g: (np.full(shape, g / n, dtype=g.dtype),))


def avg_pool(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping mean pooling over the last two axes."""
    *lead, h, w = x.shape
    if h % factor or w % factor:
        raise ValueError(f"avg_pool: spatial extent {(h, w)} not divisible by {factor}")
    y = reshape(x, (*lead, h // factor, factor, w // factor, factor))
    return reduce_mean(y, (-3, -1))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x @ weight.T + bias for x of shape N×F and weight G×F."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ wd
        gw = g.T @ xd
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(inputs, out, backward)


def _as_tuple(v, nd: int, label: str) -> tuple[int, ...]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * nd
    v = tuple(int(e) for e in v)
    if len(v) != nd:
        raise ValueError(f"{label}: expected {nd} values, got {v}")
    return v


def _conv(x: Tensor, weight: Tensor, bias: Tensor | None, stride, pad, nd: int, name: str) -> Tensor:
    if x.ndim != nd + 2:
        raise ValueError(f"{name}: expected input with {nd + 2} axes, got shape {x.shape}")
    if weight.ndim != nd + 2:
        raise ValueError(f"{name}: expected kernel with {nd + 2} axes, got shape {weight.shape}")
    n, c = x.shape[:2]
    co, ci = weight.shape[:2]
    if c != ci:
        raise ValueError(f"{name}: input has {c} channels but kernel expects {ci}")
    if bias is not None and bias.shape != (co,):
        raise ValueError(f"{name}: bias {bias.shape} does not match {co} output channels")
    stride = _as_tuple(stride, nd, name + " stride")
    pad = _as_tuple(pad, nd, name + " pad")
    ksize = weight.shape[2:]
    in_ext = x.shape[2:]
    out_ext = []
    for size, k, s, p in zip(in_ext, ksize, stride, pad):
        span = size + 2 * p - k
        if s < 1 or p < 0 or span < 0 or span % s:
            raise ValueError(
                f"{name}: extent {size} with kernel {k}, stride {s}, pad {p} "
                "gives a non-integral or empty output"
            )
        out_ext.append(span // s + 1)
    out_ext = tuple(out_ext)

    xd = x.data
    if any(pad):
        xd = np.pad(xd, [(0, 0), (0, 0)] + [(p, p) for p in pad])
    padded_shape = xd.shape
    spatial = tuple(range(2, 2 + nd))
    win = sliding_window_view(xd, ksize, axis=spatial)
    win = win[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)]
    # N, C, O..., k...  ->  (N*prod(O), C*prod(k))
    order = (0,) + tuple(range(2, 2 + nd)) + (1,) + tuple(range(2 + nd, 2 + 2 * nd))
    cols = np.ascontiguousarray(win.transpose(order)).reshape(n * int(np.prod(out_ext)), -1)
    wmat = weight.data.reshape(co, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(np.moveaxis(out.reshape((n,) + out_ext + (co,)), -1, 1))

    need_x = x.requires_grad

    def backward(g):
        g2 = np.moveaxis(g, 1, -1).reshape(-1, co)
        gw = (g2.T @ cols).reshape(weight.shape)
        gb = g2.sum(axis=0) if bias is not None else None
        gx = None
        if need_x:
            gcols = (g2 @ wmat).reshape((n,) + out_ext + (c,) + tuple(ksize))
            gpad = np.zeros(padded_shape, dtype=g.dtype)
            for offs in np.ndindex(*ksize):
                piece = np.moveaxis(gcols[(Ellipsis,) + offs], -1, 1)
                dst = tuple(slice(o, o + s * (e - 1) + 1, s) for o, s, e in zip(offs, stride, out_ext))
                gpad[(slice(None), slice(None)) + dst] += piece
            crop = tuple(slice(p, p + size) for p, size in zip(pad, in_ext))
            gx = gpad[(slice(None), slice(None)) + crop]
        if bias is None:
            return gx, gw
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(inputs, out, backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, pad=0) -> Tensor:
    """Cross-correlation of N×C×H×W input with a Co×C×kH×kW kernel, zero padded."""
    return _conv(x, weight, bias, stride, pad, 2, "conv2d")


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, pad=0) -> Tensor:
    """Cross-correlation of N×C×T×H×W input with a Co×C×kT×kH×kW kernel, zero padded."""
    return _conv(x, weight, bias, stride, pad, 3, "conv3d")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels, weights=None, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy over the last axis of an N×K tensor.

    ``weights`` (length N) scales each row's contribution; ``reduction`` is
    ``"mean"`` (divide by N) or ``"sum"``.
    """
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy: expected N×K logits, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (n,):
        raise ValueError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: label out of range [0, {k})")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    per_row = logsum - shifted[rows, labels]
    w = np.ones(n, dtype=z.dtype) if weights is None else np.asarray(weights, dtype=z.dtype)
    denom = z.dtype.type(n if reduction == "mean" else 1)
    out = np.asarray((per_row * w).sum() / denom, dtype=z.dtype)

    def backward(g):
        p = np.exp(shifted - logsum[:, None])
        p[rows, labels] -= 1
        return (p * (w / denom)[:, None] * g,)

    return record((logits,), out, backward)


def bce_with_logits(logits: Tensor, targets, reduction: str = "sum") -> Tensor:
    """Binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    if y.shape != z.shape:
        raise ValueError(f"bce_with_logits: targets {y.shape} vs logits {z.shape}")
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    denom = z.dtype.type(z.size if reduction == "mean" else 1)
    out = np.asarray(per.sum() / denom, dtype=z.dtype)

    def backward(g):
        s = 0.5 * (np.tanh(0.5 * z) + 1)
        return ((s - y) * (g / denom),)

    return record((logits,), out, backward)
