"""Differentiable operations on :class:`~depthbench.tensor.Tensor`.

Each op computes its forward value with numpy and registers a backward closure
returning one gradient per parent (``None`` for non-differentiable inputs).
"""
from __future__ import annotations

import hashlib
import itertools
from contextlib import contextmanager
from typing import Iterator, List, Optional, Sequence

import numpy as np
from scipy.special import expit

from .tensor import DTYPE, Tensor, as_tensor

# ---------------------------------------------------------------------------
# branch recording for non-smooth ops
# ---------------------------------------------------------------------------

_branch_log: Optional[List[bytes]] = None


@contextmanager
def record_branches() -> Iterator[List[bytes]]:
    """Collect a digest of the branch taken by every non-smooth op evaluated inside.

    Two evaluations with equal logs lie on the same smooth piece of the program.
    """
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def note_branch(*patterns: np.ndarray) -> None:
    """Record sign masks, argmax indices or bucket indices of a non-smooth op."""
    if _branch_log is not None:
        h = hashlib.blake2b(digest_size=16)
        for p in patterns:
            h.update(np.ascontiguousarray(p).tobytes())
        _branch_log.append(h.digest())


# ---------------------------------------------------------------------------
# elementwise algebra
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data  # non-finite results are rejected by _from_op

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._from_op(x.data * c, (x,), lambda g: (g * c,))


def neg(x: Tensor) -> Tensor:
    return Tensor._from_op(-x.data, (x,), lambda g: (-g,))


def abs(x: Tensor) -> Tensor:  # noqa: A001
    # np.sign gives the 0 subgradient at 0
    note_branch(np.sign(x.data))
    return Tensor._from_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,))


def square(x: Tensor) -> Tensor:
    return Tensor._from_op(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=DTYPE), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def masked_mean(x: Tensor, mask) -> Tensor:
    """Mean of ``x`` over entries where ``mask`` is nonzero."""
    m = np.broadcast_to(np.asarray(mask, dtype=DTYPE), x.shape)
    count = float(m.sum())
    if count <= 0:
        raise ValueError("masked_mean over an empty mask")
    out = np.asarray(np.sum(x.data * m) / count, dtype=DTYPE)
    return Tensor._from_op(out, (x,), lambda g: (g * m / count,))


def reshape(x: Tensor, shape) -> Tensor:
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def bw(g):
        gx = np.zeros_like(x.data)
        if _is_basic_index(index):
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return Tensor._from_op(np.array(out, dtype=DTYPE), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return Tensor._from_op(out, tuple(tensors), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), bw)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    pos = x.data >= 0
    note_branch(pos)
    return Tensor._from_op(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    slope = np.where(x.data >= 0, 1.0, alpha)
    note_branch(slope)
    return Tensor._from_op(x.data * slope, (x,), lambda g: (g * slope,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return Tensor._from_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def swish(x: Tensor) -> Tensor:
    s = expit(x.data)
    return Tensor._from_op(x.data * s, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),))


def activation(x: Tensor, kind: str, alpha: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "swish":
        return swish(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind in ("none", "identity"):
        return x
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# convolution (2-D and 3-D share the im2col path)
# ---------------------------------------------------------------------------


def _conv_out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _window_slices(offset, stride, out_spatial):
    return tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offset, out_spatial))


def _convnd(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int, padding: int, nd: int):
    if x.ndim != nd + 2 or weight.ndim != nd + 2:
        raise ValueError(f"conv{nd}d expects {nd + 2}-D input and weight, got {x.shape}, {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    n, c = x.shape[:2]
    o, ci = weight.shape[:2]
    ksize = weight.shape[2:]
    if ci != c:
        raise ValueError(f"input has {c} channels, weight expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"bias shape {bias.shape} != ({o},)")
    out_sp = tuple(_conv_out_extent(s, k, stride, padding) for s, k in zip(x.shape[2:], ksize))
    if any(s < 1 for s in out_sp):
        raise ValueError(f"non-positive output extent {out_sp}")

    pad = ((0, 0), (0, 0)) + ((padding, padding),) * nd
    xp = np.pad(x.data, pad) if padding else x.data
    offsets = list(itertools.product(*(range(k) for k in ksize)))
    kk = len(offsets)
    p = int(np.prod(out_sp))
    # cols: (C, K, N, *out) -> (C*K, N*P)
    cols = np.empty((c, kk, n) + out_sp, dtype=DTYPE)
    for j, off in enumerate(offsets):
        win = xp[(slice(None), slice(None)) + _window_slices(off, stride, out_sp)]
        cols[:, j] = np.moveaxis(win, 1, 0)
    cols = cols.reshape(c * kk, n * p)
    wm = weight.data.reshape(o, c * kk)
    out = (wm @ cols).reshape((o, n) + out_sp)
    out = np.ascontiguousarray(np.moveaxis(out, 0, 1))
    if bias is not None:
        out += bias.data.reshape((1, o) + (1,) * nd)

    def bw(g):
        gm = np.moveaxis(g, 1, 0).reshape(o, n * p)
        gw = (gm @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0,) + tuple(range(2, nd + 2))) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wm.T @ gm).reshape((c, kk, n) + out_sp)
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            for j, off in enumerate(offsets):
                gxp[(slice(None), slice(None)) + _window_slices(off, stride, out_sp)] += np.moveaxis(
                    gcols[:, j], 0, 1
                )
            if padding:
                gxp = gxp[(slice(None), slice(None)) + (slice(padding, -padding),) * nd]
            gx = gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._from_op(out, parents, bw)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an OIHW kernel."""
    return _convnd(x, weight, bias, stride, padding, 2)


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCDHW input with an OIDHW kernel."""
    return _convnd(x, weight, bias, stride, padding, 3)


# ---------------------------------------------------------------------------
# pooling / resampling
# ---------------------------------------------------------------------------


def maxpool2x2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even spatial extents, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    note_branch(idx)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return Tensor._from_op(out, (x,), bw)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i holds the interpolation weights of output sample i (half-pixel centers)."""
    a = np.zeros((n_out, n_in), dtype=DTYPE)
    ratio = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        a[i, i0] += 1.0 - lam
        a[i, i1] += lam
    return a


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize of the last two axes."""
    if out_h < 1 or out_w < 1:
        raise ValueError("target extents must be positive")
    ah = bilinear_matrix(x.shape[-2], out_h)
    aw = bilinear_matrix(x.shape[-1], out_w)
    out = ah @ x.data @ aw.T

    def bw(g):
        return (ah.T @ g @ aw,)

    return Tensor._from_op(out, (x,), bw)


def upsample_nearest2x(x: Tensor) -> Tensor:
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def bw(g):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)

    return Tensor._from_op(out, (x,), bw)


def pool_and_resample(x: Tensor, mode: str) -> Tensor:
    if mode == "maxpool2x2":
        return maxpool2x2(x)
    if mode == "upsample_bilinear2x":
        return resize_bilinear(x, 2 * x.shape[-2], 2 * x.shape[-1])
    if mode == "upsample_nearest2x":
        return upsample_nearest2x(x)
    raise ValueError(f"unknown resample mode {mode!r}")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel normalization over every axis except 1.

    In training mode ``running_mean``/``running_var`` are updated in place.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,) or running_var.shape != (c,):
        raise ValueError(f"batchnorm parameters do not match channel extent {c}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.size // c
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1) if m > 1 else 1.0)
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if training:
                gx = inv.reshape(bshape) * (
                    dxhat
                    - dxhat.mean(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
                )
            else:
                gx = dxhat * inv.reshape(bshape)
        return gx, gg, gb

    return Tensor._from_op(out, (x, gamma, beta), bw)
