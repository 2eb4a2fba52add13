"""The fixed differentiable op set used by the model.

Every op takes and returns :class:`Tensor`. Image-like ops accept either an
unbatched ``[C, H, W]`` array or a batched ``[N, C, H, W]`` one.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ContractError, DimensionError, Tensor, make_result

LEAKY_SLOPE = 0.1
LN_EPS = 1e-5


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def _broadcast_check(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- pointwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b)
    ad, bd = a.data, b.data

    def fn(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), fn)


def scale(x: Tensor, c: float) -> Tensor:
    return make_result(x.data * c, (x,), lambda g: (g * c,))


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.maximum(x.data, 0), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return make_result(x.data * factor, (x,), lambda g: (g * factor,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_result(y, (x,), lambda g: (g * y * (1.0 - y),))


def pointwise(x, op: str, y=None, c: Optional[float] = None) -> Tensor:
    """Dispatch by name to one of the elementwise ops."""
    if op == "add":
        return add(x, y)
    if op == "sub":
        return sub(x, y)
    if op == "mul":
        return mul(x, y)
    if op == "scale":
        return scale(x, c)
    if op == "relu":
        return relu(x)
    if op == "leaky_relu":
        return leaky_relu(x, LEAKY_SLOPE if c is None else c)
    if op == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown pointwise op {op!r}")


# ---------------------------------------------------------------- reductions / layout


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        # materialized: zero-stride views push BLAS onto a slow path downstream
        return (np.array(np.broadcast_to(g, shape)),)

    return make_result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis, keepdims), 1.0 / float(count))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return make_result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swapaxes(x: Tensor, a: int = -1, b: int = -2) -> Tensor:
    return make_result(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return make_result(np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
                       lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    n = len(xs)
    return make_result(np.stack([x.data for x in xs], axis=axis), tuple(xs),
                       lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def getitem(x: Tensor, key) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def fn(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, key, g) if _is_advanced(key) else full.__setitem__(key, g)
        return (full,)

    return make_result(np.array(x.data[key]), (x,), fn)


def _is_advanced(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along axis -2: ``x [N, n, D]``, ``idx [N, m]`` -> ``[N, m, D]``."""
    n_batch, n_rows, width = x.shape
    idx = np.asarray(idx, dtype=np.int64)
    out = np.take_along_axis(x.data, idx[:, :, None], axis=1)

    def fn(g):
        m = idx.shape[1]
        flat = (idx + (np.arange(n_batch) * n_rows)[:, None]).ravel()
        scatter = sp.csr_matrix((np.ones(flat.size, dtype=g.dtype), (flat, np.arange(flat.size))),
                                shape=(n_batch * n_rows, n_batch * m))
        return (np.asarray(scatter @ g.reshape(-1, width)).reshape(n_batch, n_rows, width),)

    return make_result(out, (x,), fn)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad @ bd, (a, b), fn)


def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise DimensionError(f"expected [C,H,W] or [N,C,H,W], got {x.shape}")


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           pad: Optional[int] = None) -> Tensor:
    """Zero-padded 2-D cross-correlation."""
    xd, squeeze = _batched(x)
    cout, cin, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractError("conv2d kernels must have odd size")
    if stride not in (1, 2):
        raise ContractError("conv2d stride must be 1 or 2")
    if xd.shape[1] != cin:
        raise DimensionError(f"conv2d input has {xd.shape[1]} channels, weight expects {cin}")
    n, _, h, wd = xd.shape
    ph, pw = ((kh - 1) // 2, (kw - 1) // 2) if pad is None else (pad, pad)
    hp, wp = h + 2 * ph, wd + 2 * pw
    if kh > hp or kw > wp:
        raise DimensionError("conv2d kernel larger than padded input")
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    if squeeze:
        out = out[0]
    inputs = (x, w) if bias is None else (x, w, bias)

    def fn(g):
        g4 = g[None] if squeeze else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = np.ascontiguousarray((g2 @ wmat).reshape(n, ho, wo, cin, kh, kw).transpose(4, 5, 0, 3, 1, 2))
            dxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[i, j]
            gx = dxp[:, :, ph:ph + h, pw:pw + wd]
            if squeeze:
                gx = gx[0]
        if bias is None:
            return gx, gw
        return gx, gw, g4.sum(axis=(0, 2, 3))

    return make_result(out, inputs, fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis with biased variance, then apply the affine map."""
    c = x.shape[-1]
    if c == 0:
        raise DimensionError("layer_norm over an empty channel axis")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("layer_norm affine parameters must have shape [C]")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    gd = gamma.data
    red = tuple(range(xd.ndim - 1))

    def fn(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        ggam = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gbet = g.sum(axis=red) if beta.requires_grad else None
        return gx, ggam, gbet

    return make_result(xhat * gd + beta.data, (x, gamma, beta), fn)


# ---------------------------------------------------------------- sampling


def bilinear_warp(feat: Tensor, flow: Tensor) -> Tensor:
    """Backward warp: ``out(p) = feat(p + flow(p))`` with border clamping.

    ``flow`` channel 0 is the x (column) displacement, channel 1 the y (row)
    displacement, in pixels of ``feat``'s grid.
    """
    fd, squeeze = _batched(feat)
    fl, fsq = _batched(flow)
    n, c, h, w = fd.shape
    if fl.shape != (n, 2, h, w):
        raise DimensionError(f"flow shape {flow.shape} does not match feature {feat.shape}")
    dt = fd.dtype
    gx = np.arange(w, dtype=dt)[None, None, :] + fl[:, 0]
    gy = np.arange(h, dtype=dt)[None, :, None] + fl[:, 1]
    xc = np.clip(gx, 0, w - 1)
    yc = np.clip(gy, 0, h - 1)
    x0 = np.minimum(np.floor(xc), max(w - 2, 0)).astype(np.int64)
    y0 = np.minimum(np.floor(yc), max(h - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (xc - x0).astype(dt)
    wy = (yc - y0).astype(dt)
    hw = h * w
    flat = fd.reshape(n, c, hw)
    idx = [(yy * w + xx).reshape(n, 1, hw) for yy, xx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1))]
    f00, f01, f10, f11 = (np.take_along_axis(flat, i, axis=2).reshape(n, c, h, w) for i in idx)
    ax, ay = wx[:, None], wy[:, None]
    weights = ((1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay)
    out = f00 * weights[0] + f01 * weights[1] + f10 * weights[2] + f11 * weights[3]
    inside_x = ((gx >= 0) & (gx <= w - 1))[:, None]
    inside_y = ((gy >= 0) & (gy <= h - 1))[:, None]

    def fn(g):
        g4 = g[None] if squeeze else g
        gfeat = gflow = None
        if feat.requires_grad:
            base = (np.arange(n * c) * hw).reshape(n, c, 1)
            pos = np.concatenate([np.broadcast_to(i + base, (n, c, hw)).ravel() for i in idx])
            vals = np.concatenate([(g4 * wt).ravel() for wt in weights])
            gfeat = np.bincount(pos, weights=vals, minlength=n * c * hw).astype(dt).reshape(n, c, h, w)
            if squeeze:
                gfeat = gfeat[0]
        if flow.requires_grad:
            dx = ((1 - ay) * (f01 - f00) + ay * (f11 - f10)) * inside_x
            dy = ((1 - ax) * (f10 - f00) + ax * (f11 - f01)) * inside_y
            gflow = np.stack([(g4 * dx).sum(axis=1), (g4 * dy).sum(axis=1)], axis=1)
            if fsq:
                gflow = gflow[0]
        return gfeat, gflow

    return make_result(out[0] if squeeze else out, (feat, flow), fn)


def resize_matrix(n_in: int, n_out: int, scale: Optional[float] = None, dtype=np.float64) -> np.ndarray:
    """Linear-interpolation matrix ``[n_out, n_in]`` with half-pixel centers."""
    s = n_out / n_in if scale is None else scale
    src = (np.arange(n_out) + 0.5) / s - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.minimum(np.floor(src).astype(np.int64), max(n_in - 2, 0))
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def bilinear_resize(x: Tensor, scale: Optional[float] = None, size: Optional[tuple] = None) -> Tensor:
    """Separable bilinear resize of the last two axes (align-corners false).

    Give either ``scale`` (output ``floor(scale * H)``) or an explicit
    ``size=(H_out, W_out)``. Flow values are not rescaled here.
    """
    h, w = x.shape[-2:]
    if size is None:
        if scale is None or scale <= 0:
            raise ContractError("bilinear_resize needs a positive scale or a size")
        ho, wo = int(np.floor(scale * h + 1e-9)), int(np.floor(scale * w + 1e-9))
        sy = sx = scale
    else:
        ho, wo = size
        sy, sx = None, None
    if ho < 1 or wo < 1:
        raise DimensionError("bilinear_resize output would be empty")
    if (ho, wo) == (h, w) and (sy is None or sy == 1):
        return make_result(x.data.copy(), (x,), lambda g: (g,))
    ry = resize_matrix(h, ho, sy, x.dtype)
    rx = resize_matrix(w, wo, sx, x.dtype)
    out = ry @ x.data @ rx.T
    return make_result(out, (x,), lambda g: (ry.T @ g @ rx,))


# ---------------------------------------------------------------- loss


def charbonnier(pred: Tensor, target, eps: float = 1e-3, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean of ``sqrt((pred - target)^2 + eps^2)``.

    With ``mask`` (broadcastable to ``pred``), the mean runs over the
    weighted elements only.
    """
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"charbonnier shapes differ: {pred.shape} vs {target.shape}")
    if eps <= 0:
        raise ContractError("charbonnier eps must be positive")
    d = pred.data - target.data
    root = np.sqrt(d * d + eps * eps)
    if mask is None:
        count = float(d.size)
        val = root.sum() / count
        deriv = d / root / count
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=pred.dtype), d.shape)
        count = float(m.sum())
        if count == 0:
            raise ContractError("charbonnier mask selects no elements")
        val = (root * m).sum() / count
        deriv = d / root * m / count

    def fn(g):
        gp = g * deriv if pred.requires_grad else None
        gt = -g * deriv if target.requires_grad else None
        return gp, gt

    return make_result(np.asarray(val, dtype=pred.dtype), (pred, target), fn)


# ---------------------------------------------------------------- operator sugar

Tensor.__add__ = lambda a, b: add(a, b)
Tensor.__radd__ = lambda a, b: add(b, a)
Tensor.__sub__ = lambda a, b: sub(a, b)
Tensor.__rsub__ = lambda a, b: sub(b, a)
Tensor.__mul__ = lambda a, b: scale(a, b) if np.isscalar(b) else mul(a, b)
Tensor.__rmul__ = lambda a, b: scale(a, b) if np.isscalar(b) else mul(b, a)
Tensor.__truediv__ = lambda a, b: scale(a, 1.0 / b)
Tensor.__neg__ = lambda a: neg(a)
Tensor.__matmul__ = lambda a, b: matmul(a, b)
Tensor.__getitem__ = lambda a, k: getitem(a, k)
Tensor.sum = lambda a, axis=None, keepdims=False: sum_(a, axis, keepdims)
Tensor.mean = lambda a, axis=None, keepdims=False: mean(a, axis, keepdims)
Tensor.reshape = lambda a, *shape: reshape(a, shape[0] if len(shape) == 1 else shape)
Tensor.transpose = lambda a, *axes: transpose(a, axes[0] if len(axes) == 1 else axes)
