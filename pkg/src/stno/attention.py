"""Galerkin-type linear attention and the texture/motion aggregation heads.

Token grids are ``[..., n, C]`` tensors with ``n = H * W`` in row-major
order (y outer, x inner).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .autograd import (
    DimensionError, Tensor, active_tape, layer_norm, matmul, reshape, scale, swapaxes, transpose,
)
from .autograd.ops import LN_EPS
from .autograd.tensor import make_result
from .layers import MLP, LayerNorm, Module

CHUNK_ROWS = 1024


@dataclass
class TokenGrid:
    tokens: Tensor  # [N, n, C]
    height: int
    width: int

    @classmethod
    def from_map(cls, fmap: Tensor) -> "TokenGrid":
        n, c, h, w = fmap.shape
        return cls(transpose(reshape(fmap, (n, c, h * w)), (0, 2, 1)), h, w)

    def to_map(self) -> Tensor:
        n, hw, c = self.tokens.shape
        return reshape(transpose(self.tokens, (0, 2, 1)), (n, c, self.height, self.width))


class AttentionParams(Module):
    """Weights of one kernel-integration block at channel width ``C``."""

    def __init__(self, channels: int, rng: np.random.Generator, mlp_ratio: int = 2):
        c = channels
        bound = np.sqrt(3.0 / c)
        self.w_q = Tensor(rng.uniform(-bound, bound, (c, c)).astype(np.float32), requires_grad=True)
        self.w_k = Tensor(rng.uniform(-bound, bound, (c, c)).astype(np.float32), requires_grad=True)
        self.w_v = Tensor(rng.uniform(-bound, bound, (c, c)).astype(np.float32), requires_grad=True)
        self.ln_k = LayerNorm(c)
        self.ln_v = LayerNorm(c)
        self.texture_mlp = MLP([c, mlp_ratio * c, c], rng)
        self.coord_mlp = MLP([2, c, c], rng)
        # zero last layer: flows start at exactly zero
        self.motion_mlp = MLP([c, mlp_ratio * c, 2], rng, zero_last=True)

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]


def project_qkv(f0: Tensor, f1: Tensor, params: AttentionParams) -> tuple[Tensor, Tensor, Tensor]:
    if f0.shape != f1.shape:
        raise DimensionError(f"token grids differ: {f0.shape} vs {f1.shape}")
    if f0.shape[-1] != params.channels:
        raise DimensionError(f"tokens have {f0.shape[-1]} channels, params expect {params.channels}")
    return matmul(f0, params.w_q), matmul(f1, params.w_k), matmul(f1, params.w_v)


def _unit_ln(c: int, dtype) -> tuple[Tensor, Tensor]:
    return Tensor(np.ones(c, dtype=dtype)), Tensor(np.zeros(c, dtype=dtype))


def _ln_into(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Layer norm over the last axis written into ``out`` (no large temporaries)."""
    np.subtract(x, x.mean(axis=-1, keepdims=True), out=out)
    var = np.einsum("...i,...i->...", out, out)[..., None] / x.shape[-1]
    out *= 1.0 / np.sqrt(var + LN_EPS)
    out *= gamma
    out += beta
    return out


def galerkin_attend(q: Tensor, k: Tensor, v: Tensor, params: Optional[AttentionParams] = None,
                    normalize: bool = True) -> Tensor:
    """``z = Q (LN(K)^T LN(V)) / n``, forming the ``C x C`` product first.

    With ``params=None`` the layer norms use unit scale and zero shift;
    ``normalize=False`` drops them entirely. Without an active tape the
    ``K^T V`` product is accumulated in row chunks so the scratch memory
    stays ``O(C^2)`` regardless of ``n``.
    """
    if not (q.shape == k.shape == v.shape):
        raise DimensionError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    n, c = q.shape[-2], q.shape[-1]
    if n == 0:
        raise DimensionError("galerkin_attend over zero tokens")
    if params is not None:
        lnk, lnv = (params.ln_k.gamma, params.ln_k.beta), (params.ln_v.gamma, params.ln_v.beta)
    else:
        lnk = lnv = _unit_ln(c, q.dtype)

    if active_tape() is None:
        return Tensor(_galerkin_chunked(q.data, k.data, v.data, lnk, lnv, normalize))

    if normalize:
        k = layer_norm(k, *lnk)
        v = layer_norm(v, *lnv)
    kv = matmul(swapaxes(k), v)
    return scale(matmul(q, kv), 1.0 / n)


def _galerkin_chunked(q, k, v, lnk, lnv, normalize: bool) -> np.ndarray:
    n, c = q.shape[-2:]
    dtype = np.result_type(q, k, v)
    kv = np.zeros(q.shape[:-2] + (c, c), dtype=dtype)
    rows = min(n, CHUNK_ROWS)
    # scratch reused across chunks so the working set stays in cache
    kbuf = np.empty(q.shape[:-2] + (rows, c), dtype=dtype)
    vbuf = np.empty_like(kbuf)
    for s in range(0, n, rows):
        kc, vc = k[..., s:s + rows, :], v[..., s:s + rows, :]
        if normalize:
            m = kc.shape[-2]
            kc = _ln_into(kc, lnk[0].data, lnk[1].data, kbuf[..., :m, :])
            vc = _ln_into(vc, lnv[0].data, lnv[1].data, vbuf[..., :m, :])
        kv += np.swapaxes(kc, -1, -2) @ vc
    kv *= 1.0 / n
    return q @ kv


def kernel_integral_oracle(q, k, v, params: Optional[AttentionParams] = None,
                           normalize: bool = True) -> np.ndarray:
    """Direct double sum over channels and positions, one output entry at a time.

    ``out[x, j] = sum_l (sum_xi vhat_j(xi) khat_l(xi) / n) q_l(x)``. Only for
    small, unbatched ``[n, C]`` inputs.
    """
    q, k, v = (np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64) for a in (q, k, v))
    n, c = q.shape
    if params is not None:
        gk, bk = params.ln_k.gamma.data, params.ln_k.beta.data
        gv, bv = params.ln_v.gamma.data, params.ln_v.beta.data
    else:
        gk = gv = np.ones(c)
        bk = bv = np.zeros(c)

    def norm_row(row, g, b):
        if not normalize:
            return list(row)
        m = sum(row) / c
        var = sum((r - m) ** 2 for r in row) / c
        return [(row[i] - m) / np.sqrt(var + LN_EPS) * g[i] + b[i] for i in range(c)]

    kh = [norm_row(k[i], gk, bk) for i in range(n)]
    vh = [norm_row(v[i], gv, bv) for i in range(n)]
    out = np.zeros((n, c))
    for x in range(n):
        for j in range(c):
            total = 0.0
            for l in range(c):
                inner = 0.0
                for xi in range(n):
                    inner += vh[xi][j] * kh[xi][l]
                total += inner / n * q[x, l]
            out[x, j] = total
    return out


def softmax_attend(q, k, v) -> Tensor:
    """Quadratic baseline: row-softmax of ``Q K^T / sqrt(C)`` applied to ``V``."""
    qd, kd, vd = (a.data if isinstance(a, Tensor) else np.asarray(a) for a in (q, k, v))
    c = qd.shape[-1]
    scores = qd @ np.swapaxes(kd, -1, -2)
    scores *= 1.0 / np.sqrt(c)
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return Tensor(scores @ vd)


def positional_grid(h: int, w: int, dtype=np.float32) -> np.ndarray:
    """Pixel centres normalized to [-1, 1], shape ``[h*w, 2]`` as (x, y)."""
    if h < 1 or w < 1:
        raise DimensionError("positional_grid needs h, w >= 1")
    xs = (2 * np.arange(w) + 1) / w - 1
    ys = (2 * np.arange(h) + 1) / h - 1
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1).astype(dtype)


def texture_aggregate(f0: Tensor, f1: Tensor, params: AttentionParams,
                      qkv: Optional[tuple[Tensor, Tensor, Tensor]] = None) -> Tensor:
    """Residual Galerkin aggregation of ``f1`` into ``f0``, then the texture MLP."""
    q0, k1, v1 = qkv if qkv is not None else project_qkv(f0, f1, params)
    return params.texture_mlp(f0 + galerkin_attend(q0, k1, v1, params))


def motion_aggregate(q0: Tensor, k1: Tensor, h: int, w: int, params: AttentionParams) -> Tensor:
    """Per-token displacement ``[..., n, 2]`` in pixels of an ``h x w`` grid.

    Embedded positions are aggregated through the normalized keys; the
    difference to each token's own embedded position is mapped to a
    normalized displacement, then scaled to pixels.
    """
    if q0.shape != k1.shape:
        raise DimensionError(f"q/k shapes differ: {q0.shape} vs {k1.shape}")
    if q0.shape[-2] != h * w:
        raise DimensionError(f"{q0.shape[-2]} tokens do not form a {h}x{w} grid")
    grid = Tensor(positional_grid(h, w, q0.dtype))
    vpos = params.coord_mlp(grid)  # [n, C]
    khat = layer_norm(k1, params.ln_k.gamma, params.ln_k.beta)
    kv = scale(matmul(swapaxes(khat), vpos), 1.0 / (h * w))
    mo = params.motion_mlp(matmul(q0, kv) - vpos)
    to_px = Tensor(np.array([w / 2.0, h / 2.0], dtype=q0.dtype))
    return mo * to_px


def attention_heatmap(z: np.ndarray, h: int, w: int) -> np.ndarray:
    """Per-token L2 norm of ``z [n, C]``, min-max scaled to uint8 ``[h, w]``."""
    mag = np.sqrt((np.asarray(z, dtype=np.float64) ** 2).sum(axis=-1)).reshape(h, w)
    lo, hi = mag.min(), mag.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.zeros((h, w), dtype=np.uint8)
    return np.floor((mag - lo) / (hi - lo) * 255 + 0.5).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts, pos = [], 0
    while len(parts) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        parts.append(data[pos:end])
        pos = end
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise OSError(f"{path}: not an 8-bit binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w).copy()


def dump_attention_map(q: Tensor, k: Tensor, v: Tensor, params: Optional[AttentionParams],
                       h: int, w: int, path=None) -> np.ndarray:
    """Heatmap of the Galerkin output ``z`` for one (unbatched) token grid."""
    z = galerkin_attend(q, k, v, params).data
    if z.ndim == 3:
        z = z[0]
    img = attention_heatmap(z, h, w)
    if path is not None:
        write_pgm(path, img)
    return img
