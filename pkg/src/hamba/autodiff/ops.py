"""Differentiable kernels.

Every kernel computes its forward value with numpy and registers an exact
vector-Jacobian product on the active tape.  Broadcasting is deliberately
limited to scalar-with-tensor; anything else needs an explicit
:func:`broadcast_to` or :func:`reshape`.
"""

from __future__ import annotations

import builtins
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

from .tensor import ShapeError, Tensor, make_result


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(x) -> bool:
    return not isinstance(x, Tensor) or x.ndim == 0


def _unscalar(g: np.ndarray, like: Tensor) -> np.ndarray:
    return g if g.shape == like.shape else np.asarray(g.sum()).reshape(like.shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        s = float(b)
        return make_result(a.data + s, (a,), lambda g: (g,), "add")
    if a.shape != b.shape and not (a.ndim == 0 or b.ndim == 0):
        raise ShapeError("add", a.shape, b.shape)
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unscalar(g, a), _unscalar(g, b)), "add")


def sub(a, b) -> Tensor:
    return add(a, neg(b) if isinstance(b, Tensor) else -float(b))


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        s = float(b)
        return make_result(a.data * s, (a,), lambda g: (g * s,), "mul")
    if a.shape != b.shape and not (a.ndim == 0 or b.ndim == 0):
        raise ShapeError("mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unscalar(g * bd, a) if a.requires_grad else None,
                _unscalar(g * ad, b) if b.requires_grad else None)

    return make_result(ad * bd, (a, b), bw, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and not (a.ndim == 0 or b.ndim == 0):
        raise ShapeError("div", a.shape, b.shape)
    out = a.data / b.data

    def bw(g):
        return (_unscalar(g / b.data, a) if a.requires_grad else None,
                _unscalar(-g * out / b.data, b) if b.requires_grad else None)

    return make_result(out, (a, b), bw, "div")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a: Tensor) -> Tensor:
    return make_result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return make_result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = a.data * s
    return make_result(out, (a,), lambda g: (g * (s + out * (1.0 - s)),), "silu")


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    return make_result(out, (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


def gelu(a: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(a.data / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * a.data ** 2) / np.sqrt(2.0 * np.pi)
    return make_result(a.data * cdf, (a,), lambda g: (g * (cdf + a.data * pdf),), "gelu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return make_result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------- shape algebra

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(a.data, axes), (a,),
                       lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def flip(a: Tensor, axis: int) -> Tensor:
    return make_result(np.flip(a.data, axis).copy(), (a,),
                       lambda g: (np.flip(g, axis).copy(),), "flip")


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape) from None
    lead = len(shape) - a.ndim
    expanded = tuple(i + lead for i, n in enumerate(a.shape) if n == 1 and shape[i + lead] != 1)

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        if expanded:
            g = g.sum(axis=tuple(i - lead for i in expanded), keepdims=True)
        return (g,)

    return make_result(out, (a,), bw, "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", ref, t.shape, detail=f"axis={axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_result(out, tuple(tensors), bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError("stack", tensors[0].shape, t.shape)
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return make_result(out, tuple(tensors), bw, "stack")


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list:
    if builtins.sum(sizes) != a.shape[axis]:
        raise ShapeError("split", a.shape, tuple(sizes), detail=f"axis={axis}")
    out, start = [], 0
    for s in sizes:
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + s)
        out.append(index(a, tuple(idx)))
        start += s
    return out


def _is_basic(key) -> bool:
    key = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(None), type(Ellipsis))) for k in key)


def index(a: Tensor, key) -> Tensor:
    out = a.data[key]
    out = np.array(out, dtype=np.float64) if np.ndim(out) == 0 else out.copy()
    basic = _is_basic(key)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return make_result(out, (a,), bw, "index")


# ---------------------------------------------------------------- reductions

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def mean_pool(grid: Tensor) -> Tensor:
    """Average a (..., H, W, C) grid over its two spatial axes."""
    if grid.ndim < 3:
        raise ShapeError("mean_pool", grid.shape, detail="need (..., H, W, C)")
    return mean(grid, axis=(-3, -2))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return make_result(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` applied over the last axis of ``x``; w is (in, out)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError("linear", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError("linear.bias", w.shape, b.shape)
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(out.reshape(lead + (w.shape[1],)), inputs, bw, "linear")


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum whose indices each appear in the output or the other operand."""
    ins, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for own, other in ((sa, sb), (sb, sa)):
        if len(set(own)) != len(own) or any(c not in out_sub and c not in other for c in own):
            raise ValueError(f"einsum: unsupported subscripts {subscripts!r}")
    try:
        out = np.einsum(subscripts, a.data, b.data, optimize=True)
    except ValueError:
        raise ShapeError(f"einsum[{subscripts}]", a.shape, b.shape) from None

    def bw(g):
        ga = np.einsum(f"{out_sub},{sb}->{sa}", g, b.data, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out_sub},{sa}->{sb}", g, a.data, optimize=True) if b.requires_grad else None
        return ga, gb

    return make_result(np.asarray(out, dtype=np.float64), (a, b), bw, f"einsum[{subscripts}]")


# ---------------------------------------------------------------- normalizations

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), bw, "softmax")


def masked_softmax(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to entries where ``mask`` is true.

    Masked-out entries are exactly zero.  Every row needs at least one
    admissible entry.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.shape:
        raise ShapeError("masked_softmax", logits.shape, mask.shape)
    if not np.all(mask.any(axis=-1)):
        raise ValueError("masked_softmax: a row has no admissible entries")
    z = np.where(mask, logits.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_result(out, (logits,), bw, "masked_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("layer_norm", x.shape, gamma.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(x.ndim - 1))
        dxhat = g * gamma.data
        gx = None
        if x.requires_grad:
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(out, (x, gamma, beta), bw, "layer_norm")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over every axis except the last.

    In training mode the batch statistics are used and the running buffers
    are updated in place; in eval mode the running statistics are used.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,):
        raise ShapeError("batch_norm", x.shape, gamma.shape)
    axes = tuple(range(x.ndim - 1))
    n = x.size // c
    if training:
        mu = x.data.mean(axis=axes)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * n / max(n - 1, 1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        xc = x.data - running_mean
        var = running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        dxhat = g * gamma.data
        gx = None
        if x.requires_grad:
            if training:
                gx = inv * (dxhat - dxhat.mean(axis=axes)
                            - xhat * (dxhat * xhat).mean(axis=axes))
            else:
                gx = dxhat * inv
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_result(out, (x, gamma, beta), bw, "batch_norm")


# ---------------------------------------------------------------- convolutions

def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Channels-last 2-D convolution. x: (B, H, W, Cin); w: (kh, kw, Cin, Cout)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError("conv2d", x.shape, w.shape)
    kh, kw, cin, cout = w.shape
    bsz, h, wd, _ = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", x.shape, w.shape, detail="output would be empty")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    if kh == 1 and kw == 1 and stride == 1:
        cols = xp
    else:
        cols = np.concatenate(
            [xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
             for i in range(kh) for j in range(kw)], axis=-1)
    cols2 = cols.reshape(-1, kh * kw * cin)
    wmat = w.data.reshape(-1, cout)
    out = cols2 @ wmat
    if b is not None:
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols2.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(bsz, ho, wo, kh * kw * cin)
            if kh == 1 and kw == 1 and stride == 1:
                gxp = dcols
            else:
                gxp = np.zeros_like(xp)
                k = 0
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += \
                            dcols[..., k * cin:(k + 1) * cin]
                        k += 1
            gx = gxp[:, padding:padding + h, padding:padding + wd, :] if padding else gxp
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(out.reshape(bsz, ho, wo, cout), inputs, bw, "conv2d")


def depthwise_conv1d(x: Tensor, w: Tensor) -> Tensor:
    """Per-channel 'same' convolution along the sequence axis, no bias.

    x: (B, L, C); w: (k, C) with k odd.
    """
    if x.ndim != 3 or w.ndim != 2 or w.shape[1] != x.shape[2] or w.shape[0] % 2 == 0:
        raise ShapeError("depthwise_conv1d", x.shape, w.shape)
    k = w.shape[0]
    pad = k // 2
    length = x.shape[1]
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    out = np.zeros_like(x.data)
    for i in range(k):
        out += xp[:, i:i + length, :] * w.data[i]

    def bw(g):
        gw = np.stack([(g * xp[:, i:i + length, :]).sum(axis=(0, 1)) for i in range(k)])
        gxp = np.zeros_like(xp)
        for i in range(k):
            gxp[:, i:i + length, :] += g * w.data[i]
        return gxp[:, pad:pad + length, :], gw

    return make_result(out, (x, w), bw, "depthwise_conv1d")


# ---------------------------------------------------------------- sampling

def bilinear_weights(frac_row: np.ndarray, frac_col: np.ndarray) -> np.ndarray:
    """Corner weights (top-left, top-right, bottom-left, bottom-right).

    With u the horizontal and v the vertical fraction these are
    (1-u)(1-v), u(1-v), (1-u)v, uv.
    """
    u, v = frac_col, frac_row
    return np.stack([(1 - u) * (1 - v), u * (1 - v), (1 - u) * v, u * v], axis=-1)


def grid_sample(feat: Tensor, coords: Tensor) -> Tensor:
    """Bilinearly sample a (B, H, W, C) grid at (B, J, 2) continuous (row, col) positions.

    Integer coordinates address cell centers; positions are clamped to the
    grid border, and the clamped coordinates receive zero gradient.
    """
    if feat.ndim != 4 or coords.ndim != 3 or coords.shape[2] != 2 or coords.shape[0] != feat.shape[0]:
        raise ShapeError("grid_sample", feat.shape, coords.shape)
    if not np.all(np.isfinite(coords.data)):
        raise ValueError("grid_sample: non-finite sampling coordinates")
    bsz, h, w, c = feat.shape
    r = np.clip(coords.data[..., 0], 0.0, h - 1)
    q = np.clip(coords.data[..., 1], 0.0, w - 1)
    r0 = np.clip(np.floor(r).astype(int), 0, max(h - 2, 0))
    c0 = np.clip(np.floor(q).astype(int), 0, max(w - 2, 0))
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr, fc = r - r0, q - c0
    wts = bilinear_weights(fr, fc)
    bi = np.arange(bsz)[:, None]
    f00, f01 = feat.data[bi, r0, c0], feat.data[bi, r0, c1]
    f10, f11 = feat.data[bi, r1, c0], feat.data[bi, r1, c1]
    out = (wts[..., 0:1] * f00 + wts[..., 1:2] * f01 + wts[..., 2:3] * f10 + wts[..., 3:4] * f11)
    inside_r = (coords.data[..., 0] >= 0) & (coords.data[..., 0] <= h - 1)
    inside_c = (coords.data[..., 1] >= 0) & (coords.data[..., 1] <= w - 1)

    def bw(g):
        gf = None
        if feat.requires_grad:
            gf = np.zeros_like(feat.data)
            for k, (rr, cc) in enumerate(((r0, c0), (r0, c1), (r1, c0), (r1, c1))):
                np.add.at(gf, (np.broadcast_to(bi, rr.shape), rr, cc), g * wts[..., k:k + 1])
        gc = None
        if coords.requires_grad:
            d_fr = (-(1 - fc)[..., None] * f00 - fc[..., None] * f01
                    + (1 - fc)[..., None] * f10 + fc[..., None] * f11)
            d_fc = (-(1 - fr)[..., None] * f00 + (1 - fr)[..., None] * f01
                    - fr[..., None] * f10 + fr[..., None] * f11)
            gc = np.stack([(g * d_fr).sum(-1) * inside_r, (g * d_fc).sum(-1) * inside_c], axis=-1)
        return gf, gc

    return make_result(out, (feat, coords), bw, "grid_sample")


# ---------------------------------------------------------------- rotations

_SERIES_CUTOFF = 1e-3


def _rodrigues_coeffs(theta: np.ndarray):
    """sin(t)/t, (1-cos t)/t^2 and their derivatives divided by t."""
    t2 = theta * theta
    small = theta < _SERIES_CUTOFF
    ts = np.where(small, 1.0, theta)
    a = np.where(small, 1 - t2 / 6 + t2 * t2 / 120, np.sin(ts) / ts)
    b = np.where(small, 0.5 - t2 / 24 + t2 * t2 / 720, (1 - np.cos(ts)) / (ts * ts))
    ca = np.where(small, -1 / 3 + t2 / 30 - t2 * t2 / 840,
                  (ts * np.cos(ts) - np.sin(ts)) / ts ** 3)
    cb = np.where(small, -1 / 12 + t2 / 180 - t2 * t2 / 6720,
                  (ts * np.sin(ts) - 2 * (1 - np.cos(ts))) / ts ** 4)
    return a, b, ca, cb


def skew(v: np.ndarray) -> np.ndarray:
    z = np.zeros(v.shape[:-1])
    x, y, w = v[..., 0], v[..., 1], v[..., 2]
    return np.stack([np.stack([z, -w, y], -1),
                     np.stack([w, z, -x], -1),
                     np.stack([-y, x, z], -1)], -2)


_GENERATORS = skew(np.eye(3))  # (3, 3, 3): skew of each basis vector


def axis_angle_to_matrix(v: Tensor) -> Tensor:
    """Rodrigues' formula on (..., 3) axis-angle vectors, smooth through zero."""
    if v.shape[-1] != 3:
        raise ShapeError("axis_angle_to_matrix", v.shape, detail="last axis must be 3")
    theta = np.sqrt((v.data ** 2).sum(-1))
    a, b, ca, cb = _rodrigues_coeffs(theta)
    k = skew(v.data)
    k2 = k @ k
    out = np.eye(3) + a[..., None, None] * k + b[..., None, None] * k2

    def bw(g):
        gv = np.empty_like(v.data)
        gk = (g * k).sum((-2, -1))
        gk2 = (g * k2).sum((-2, -1))
        for i in range(3):
            e = _GENERATORS[i]
            ek = e @ k + k @ e
            gv[..., i] = (ca * v.data[..., i] * gk + a * (g * e).sum((-2, -1))
                          + cb * v.data[..., i] * gk2 + b * (g * ek).sum((-2, -1)))
        return (gv,)

    return make_result(out, (v,), bw, "axis_angle_to_matrix")


# ---------------------------------------------------------------- selective scan

def expm1_over_z(z: np.ndarray) -> np.ndarray:
    """(e^z - 1)/z with the 3-term series 1 + z/2 + z^2/6 for |z| < 1e-6."""
    small = np.abs(z) < 1e-6
    zs = np.where(small, 1.0, z)
    return np.where(small, 1 + z / 2 + z * z / 6, np.expm1(zs) / zs)


def _dphi(z: np.ndarray) -> np.ndarray:
    """Derivative of (e^z - 1)/z, i.e. (z e^z - e^z + 1)/z^2."""
    out = np.empty_like(z)
    small = np.abs(z) < 1e-3
    zs = z[small]
    out[small] = 0.5 + zs * (1 / 3 + zs * (1 / 8 + zs * (1 / 30 + zs / 144)))
    big = ~small
    zb = z[big]
    out[big] = (zb * np.exp(zb) - np.expm1(zb)) / (zb * zb)
    return out


def selective_scan_kernel(x: Tensor, delta: Tensor, a: Tensor, bmat: Tensor, cmat: Tensor,
                          dskip: Tensor) -> Tensor:
    """Fused S6 recurrence with exact zero-order-hold discretization.

    Shapes: x, delta (B, L, D); a (D, N); bmat, cmat (B, L, N); dskip (D,).
    h_t = exp(delta_t a) h_{t-1} + (delta_t a)^-1 (exp(delta_t a) - 1) delta_t b_t x_t,
    y_t = <c_t, h_t> + dskip * x_t, with h_0 = 0.
    """
    if x.ndim != 3 or delta.shape != x.shape:
        raise ShapeError("selective_scan", x.shape, delta.shape)
    bsz, length, d = x.shape
    if a.ndim != 2 or a.shape[0] != d:
        raise ShapeError("selective_scan.A", x.shape, a.shape)
    n = a.shape[1]
    if bmat.shape != (bsz, length, n) or cmat.shape != (bsz, length, n):
        raise ShapeError("selective_scan.BC", bmat.shape, cmat.shape, detail=f"want {(bsz, length, n)}")
    if dskip.shape != (d,):
        raise ShapeError("selective_scan.D", x.shape, dskip.shape)
    if np.any(delta.data <= 0):
        raise ValueError("selective_scan: step sizes must be positive")

    xd, dl, ad, bd, cd = x.data, delta.data, a.data, bmat.data, cmat.data
    z = dl[..., None] * ad                       # (B, L, D, N)
    abar = np.exp(z)
    phi = expm1_over_z(z)
    bbar = dl[..., None] * phi * bd[:, :, None, :]
    hs = np.empty_like(z)
    h = np.zeros((bsz, d, n))
    for t in range(length):
        h = abar[:, t] * h + bbar[:, t] * xd[:, t, :, None]
        hs[:, t] = h
    y = np.einsum("bldn,bln->bld", hs, cd) + xd * dskip.data

    def bw(gy):
        gc = np.einsum("bld,bldn->bln", gy, hs)
        gdskip = (gy * xd).sum(axis=(0, 1))
        gh = np.empty_like(hs)
        acc = np.zeros((bsz, d, n))
        for t in range(length - 1, -1, -1):
            acc = gy[:, t, :, None] * cd[:, t, None, :] + acc
            gh[:, t] = acc
            acc = acc * abar[:, t]
        hprev = np.concatenate([np.zeros((bsz, 1, d, n)), hs[:, :-1]], axis=1)
        g_abar = gh * hprev
        g_bbar = gh * xd[..., None]
        gx = (gh * bbar).sum(-1) + gy * dskip.data
        gz = g_abar * abar + g_bbar * dl[..., None] * _dphi(z) * bd[:, :, None, :]
        gdelta = (gz * ad).sum(-1) + (g_bbar * phi * bd[:, :, None, :]).sum(-1)
        ga = (gz * dl[..., None]).sum(axis=(0, 1))
        gb = (g_bbar * dl[..., None] * phi).sum(axis=2)
        return gx, gdelta, ga, gb, gc, gdskip

    return make_result(y, (x, delta, a, bmat, cmat, dskip), bw, "selective_scan")
