"""The space-time super-resolution network.

Pipeline: a shared convolutional encoder turns every low-res frame into a
three-level feature pyramid; for each adjacent input pair, a coarse-to-fine
stack of attention blocks refines two-way flows and synthesizes features
at the requested intermediate times; a bidirectional recurrent sweep over
level-0 features mixes information along the sequence; and a coordinate
MLP decodes each fused map at an arbitrary output size.

All maps carry a leading batch axis ``[N, C, H, W]``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .attention import (
    AttentionParams, TokenGrid, attention_heatmap, motion_aggregate, project_qkv, texture_aggregate,
    galerkin_attend,
)
from .autograd import (
    ContractError, DimensionError, Tensor, bilinear_resize, bilinear_warp, concat, conv2d, leaky_relu,
    matmul, relu, reshape, scale, sigmoid, sum_, take_rows, transpose,
)
from .autograd.tensor import no_grad
from .layers import Conv2d, Linear, Module, ResBlock

LEVELS = 3
PAD_MULTIPLE = 4


@dataclass
class ModelConfig:
    channels: list = field(default_factory=lambda: [32, 48, 64])
    residual_blocks: int = 3
    pyramid_levels: int = LEVELS
    iterations: int = 2
    mlp_ratio: int = 2
    decoder_hidden: int = 64

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]
        if self.pyramid_levels != LEVELS:
            raise ContractError(f"pyramid_levels must be {LEVELS}")
        if len(self.channels) != LEVELS:
            raise ContractError(f"need {LEVELS} channel widths, got {self.channels}")
        if self.iterations < 1:
            raise ContractError("iterations must be >= 1")
        if self.residual_blocks < 0 or min(self.channels) < 1:
            raise ContractError("invalid layer sizes")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeaturePyramid:
    levels: list  # level j: [N, C_j, H/2^j, W/2^j]

    def __getitem__(self, j: int) -> Tensor:
        return self.levels[j]

    def __len__(self) -> int:
        return len(self.levels)


@dataclass
class FlowSet:
    """Flows at one pyramid level, in that level's pixel units, ``[N, 2, h, w]`` each."""
    flow01: Tensor
    flow10: Tensor
    flow_t0: Tensor
    flow_t1: Tensor
    t: float

    def as_list(self) -> list[Tensor]:
        return [self.flow01, self.flow10, self.flow_t0, self.flow_t1]


@dataclass
class PropagationState:
    backward: list  # H_b per frame
    forward: list  # H_f per frame
    fused: list  # R per frame


@dataclass
class ForwardResult:
    frames: list  # decoded [N, 3, sH, sW] in temporal order
    interpolated: list  # bool per output frame
    flows: list  # per input pair: per time: list of FlowSet over levels
    state: Optional[PropagationState] = None


def upsample_flow(flow: Tensor, size: tuple) -> Tensor:
    """Resize a flow field and rescale its vectors to the new pixel units."""
    h, w = flow.shape[-2:]
    up = bilinear_resize(flow, size=size)
    factor = Tensor(np.array([size[1] / w, size[0] / h], dtype=flow.dtype).reshape(2, 1, 1))
    return up * factor


def _zeros(like: Tensor, channels: int) -> Tensor:
    n, _, h, w = like.shape
    return Tensor(np.zeros((n, channels, h, w), dtype=like.dtype))


class InputProjection(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c0, c1, c2 = cfg.channels
        self.head = Conv2d(3, c0, 3, rng)
        self.blocks = [ResBlock(c0, rng) for _ in range(cfg.residual_blocks)]
        self.down1 = Conv2d(c0, c1, 3, rng, stride=2)
        self.down2 = Conv2d(c1, c2, 3, rng, stride=2)

    def __call__(self, x: Tensor) -> FeaturePyramid:
        f = leaky_relu(self.head(x))
        for blk in self.blocks:
            f = blk(f)
        f1 = leaky_relu(self.down1(f))
        f2 = leaky_relu(self.down2(f1))
        return FeaturePyramid([f, f1, f2])


class LevelParams(Module):
    """One pyramid level: an attention block per iteration plus the coarse-prior projection."""

    def __init__(self, cfg: ModelConfig, level: int, rng: np.random.Generator):
        c = cfg.channels[level]
        self.blocks = [AttentionParams(c, rng, cfg.mlp_ratio) for _ in range(cfg.iterations)]
        self.prior = Conv2d(cfg.channels[level + 1], c, 1, rng) if level + 1 < LEVELS else None


class Propagation(Module):
    """Backward and forward recurrent branches plus the per-frame fusion."""

    def __init__(self, c: int, rng: np.random.Generator):
        self.back1 = Conv2d(3 * c, c, 3, rng)
        self.back2 = Conv2d(c, c, 3, rng)
        self.fwd1 = Conv2d(3 * c, c, 3, rng)
        self.fwd2 = Conv2d(c, c, 3, rng)
        self.fuse = Conv2d(3 * c, c, 3, rng)
        self.fuse.weight.data *= 0.1

    def tie_branches(self) -> None:
        """Share the backward weights with the forward branch (time-symmetric network)."""
        self.fwd1, self.fwd2 = self.back1, self.back2

    def branch(self, direction: str, x: Tensor, x_nb: Tensor, h_nb: Tensor) -> Tensor:
        c1, c2 = (self.back1, self.back2) if direction == "backward" else (self.fwd1, self.fwd2)
        return leaky_relu(c2(leaky_relu(c1(concat([x, x_nb, h_nb], axis=1)))))


class Decoder(Module):
    """Coordinate MLP on (feature, relative offset, cell size) with a sigmoid output."""

    def __init__(self, c: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(c + 4, hidden, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self.fc3 = Linear(hidden, 3, rng)


def _query_axis(n_feat: int, n_out: int, extent: int):
    """Neighbour indices, bilinear weights and relative offsets along one axis."""
    u = (np.arange(n_out) + 0.5) * extent / n_out - 0.5
    uc = np.clip(u, 0, n_feat - 1)
    i0 = np.minimum(np.floor(uc).astype(np.int64), max(n_feat - 2, 0))
    i1 = np.minimum(i0 + 1, n_feat - 1)
    frac = uc - i0
    return (i0, i1), (1 - frac, frac), (u - i0, u - i1)


def ensemble_weights(h: int, w: int, out_h: int, out_w: int, extent: Optional[tuple] = None) -> np.ndarray:
    """The four blend weights per output pixel, ``[4, out_h, out_w]``."""
    eh, ew = extent or (h, w)
    _, wy, _ = _query_axis(h, out_h, eh)
    _, wx, _ = _query_axis(w, out_w, ew)
    return np.stack([np.outer(wy[a], wx[b]) for a in (0, 1) for b in (0, 1)])


class STNO(Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.encoder = InputProjection(cfg, rng)
        self.levels = [LevelParams(cfg, j, rng) for j in range(LEVELS)]
        self.propagation = Propagation(cfg.channels[0], rng)
        self.decoder = Decoder(cfg.channels[0], cfg.decoder_hidden, rng)
        self.record_attention = False
        self.attention_maps: list = []

    # ------------------------------------------------------------ encoder

    def input_projection(self, frame: Tensor) -> FeaturePyramid:
        x = frame if frame.ndim == 4 else reshape(frame, (1,) + frame.shape)
        h, w = x.shape[-2:]
        if x.shape[1] != 3:
            raise DimensionError(f"expected 3-channel frames, got {x.shape}")
        if h % PAD_MULTIPLE or w % PAD_MULTIPLE:
            raise ContractError(f"frame size {h}x{w} is not a multiple of {PAD_MULTIPLE}")
        return self.encoder(x)

    # ------------------------------------------------------------ motion

    def coarse_to_fine_step(self, g0: Tensor, g1: Tensor, flow01: Tensor, flow10: Tensor,
                            ts: Sequence[float], ft_prior: list, params: AttentionParams,
                            tag=None):
        """One refinement of both flows and the per-time intermediate features.

        Returns ``(te01, te10, flow01, flow10, ft)``: the aggregated features
        for frames 0 and 1 (in their own coordinates), the residually updated
        flows and one intermediate feature map per entry of ``ts``.
        """
        n, c, h, w = g0.shape
        g1w = bilinear_warp(g1, flow01)
        g0w = bilinear_warp(g0, flow10)
        t0, t0w = TokenGrid.from_map(g0), TokenGrid.from_map(g0w)
        t1, t1w = TokenGrid.from_map(g1), TokenGrid.from_map(g1w)
        q0, k1, v1 = project_qkv(t0.tokens, t1w.tokens, params)
        q1, k0, v0 = project_qkv(t1.tokens, t0w.tokens, params)
        if self.record_attention and tag is not None:
            with no_grad():
                z = galerkin_attend(q0, k1, v1, params).data[0]
            self.attention_maps.append((tag, attention_heatmap(z, h, w)))
        te01 = TokenGrid(texture_aggregate(t0.tokens, t1w.tokens, params, (q0, k1, v1)), h, w).to_map()
        te10 = TokenGrid(texture_aggregate(t1.tokens, t0w.tokens, params, (q1, k0, v0)), h, w).to_map()
        d01 = TokenGrid(motion_aggregate(q0, k1, h, w, params), h, w).to_map()
        d10 = TokenGrid(motion_aggregate(q1, k0, h, w, params), h, w).to_map()
        flow01 = flow01 + d01
        flow10 = flow10 + d10
        ft = []
        for t, prior in zip(ts, ft_prior):
            blend = scale(bilinear_warp(te01, scale(flow10, t)), 1 - t) + \
                scale(bilinear_warp(te10, scale(flow01, 1 - t)), t)
            ft.append(blend if prior is None else prior + blend)
        return te01, te10, flow01, flow10, ft

    def kernel_integration(self, p0: FeaturePyramid, p1: FeaturePyramid, t):
        """Coarse-to-fine integration for one input pair.

        ``t`` is a time in [0, 1] or a sequence of times. Returns
        ``(ft_pyramids, flowsets)`` with one entry per time; each flowset is
        a list over levels (level 0 first).
        """
        ts = [float(t)] if np.isscalar(t) else [float(x) for x in t]
        for x in ts:
            if not 0.0 <= x <= 1.0:
                raise ContractError(f"time {x} outside [0, 1]")
        flow01 = flow10 = None
        ft: list = [None] * len(ts)
        ft_levels = [[None] * LEVELS for _ in ts]
        flow_levels = [[None] * LEVELS for _ in ts]
        for j in reversed(range(LEVELS)):
            g0, g1 = p0[j], p1[j]
            size = g0.shape[-2:]
            lp = self.levels[j]
            if flow01 is None:
                flow01, flow10 = _zeros(g0, 2), _zeros(g0, 2)
            else:
                flow01, flow10 = upsample_flow(flow01, size), upsample_flow(flow10, size)
                ft = [lp.prior(bilinear_resize(f, size=size)) for f in ft]
            for it, params in enumerate(lp.blocks):
                g0, g1, flow01, flow10, ft = self.coarse_to_fine_step(
                    g0, g1, flow01, flow10, ts, ft, params, tag=(j, it))
            for k, x in enumerate(ts):
                ft_levels[k][j] = ft[k]
                flow_levels[k][j] = FlowSet(flow01, flow10, scale(flow10, x), scale(flow01, 1 - x), x)
        return [FeaturePyramid(f) for f in ft_levels], flow_levels

    # ------------------------------------------------------------ propagation

    def propagate_bidirectional(self, feats: list, steps: list) -> PropagationState:
        """Recurrent sweeps over level-0 features ordered in time.

        ``steps[i] = (flow01, flow10, tau_a, tau_b)`` describes the move from
        frame ``i`` to ``i + 1``: the level-0 flows of the input pair holding
        both frames and their times inside that pair. Neighbour displacements
        follow the linear-motion rule, ``(tau_b - tau_a) * flow01`` forward in
        time and ``(tau_b - tau_a) * flow10`` backward.
        """
        m = len(feats)
        if m < 2:
            raise ContractError("propagation needs at least 2 frames")
        if len(steps) != m - 1:
            raise ContractError(f"{m} frames need {m - 1} steps, got {len(steps)}")
        c = feats[0].shape[1]
        prop = self.propagation
        hb = [None] * m
        for i in reversed(range(m)):
            if i == m - 1:
                x_nb = h_nb = _zeros(feats[i], c)
            else:
                f01, _, ta, tb = steps[i]
                fl = scale(f01, tb - ta)
                x_nb, h_nb = bilinear_warp(feats[i + 1], fl), bilinear_warp(hb[i + 1], fl)
            hb[i] = prop.branch("backward", feats[i], x_nb, h_nb)
        hf = [None] * m
        for i in range(m):
            if i == 0:
                x_nb = h_nb = _zeros(feats[i], c)
            else:
                _, f10, ta, tb = steps[i - 1]
                fl = scale(f10, tb - ta)
                x_nb, h_nb = bilinear_warp(feats[i - 1], fl), bilinear_warp(hf[i - 1], fl)
            hf[i] = prop.branch("forward", feats[i], x_nb, h_nb)
        fused = [feats[i] + prop.fuse(concat([feats[i], hb[i], hf[i]], axis=1)) for i in range(m)]
        return PropagationState(hb, hf, fused)

    # ------------------------------------------------------------ decoder

    def spatial_modulate(self, r: Tensor, out_h: int, out_w: int, extent: Optional[tuple] = None,
                         queries: Optional[np.ndarray] = None) -> Tensor:
        """Decode ``r [N, C, h, w]`` to ``[N, 3, out_h, out_w]``.

        Each output pixel blends the MLP predictions of its four nearest
        feature centres with bilinear weights. ``extent`` is the size of
        the valid (unpadded) region of ``r`` that the output covers. With
        ``queries`` (flat output-pixel indices) only those pixels are
        decoded and the result is ``[N, 3, len(queries)]``.
        """
        n, c, h, w = r.shape
        eh, ew = extent or (h, w)
        if out_h < eh or out_w < ew:
            raise ContractError(f"cannot decode {eh}x{ew} features to smaller {out_h}x{out_w}")
        dec = self.decoder
        dt = r.dtype
        (ys, wy, oy), (xs, wx, ox) = _query_axis(h, out_h, eh), _query_axis(w, out_w, ew)
        qy, qx = np.divmod(np.arange(out_h * out_w) if queries is None else np.asarray(queries), out_w)
        m = qy.size
        cell = np.broadcast_to(np.array([eh / out_h, ew / out_w]), (m, 2))
        idx, coords, weights = [], [], []
        for a in (0, 1):
            for b in (0, 1):
                idx.append(ys[a][qy] * w + xs[b][qx])
                coords.append(np.column_stack([oy[a][qy], ox[b][qx], cell, np.ones(m)]))
                weights.append(wy[a][qy] * wx[b][qx])
        idx = np.concatenate(idx)
        coord = Tensor(np.concatenate(coords).astype(dt))  # [4m, 5]: offset, cell, 1
        blend = Tensor(np.concatenate(weights).astype(dt)[:, None])  # [4m, 1]

        tokens = transpose(reshape(r, (n, c, h * w)), (0, 2, 1))
        feat_proj = matmul(tokens, dec.fc1.weight[:c])  # [N, hw, hidden] at feature resolution
        w_coord = concat([dec.fc1.weight[c:], reshape(dec.fc1.bias, (1, -1))], axis=0)
        hid = relu(take_rows(feat_proj, np.broadcast_to(idx, (n, 4 * m))) + matmul(coord, w_coord))
        hid = relu(dec.fc2(hid))
        rgb = sigmoid(dec.fc3(hid)) * blend  # [N, 4m, 3]
        rgb = transpose(sum_(reshape(rgb, (n, 4, m, 3)), axis=1), (0, 2, 1))
        return rgb if queries is not None else reshape(rgb, (n, 3, out_h, out_w))

    # ------------------------------------------------------------ full pass

    def forward(self, lr_frames: Sequence, times: Sequence[float] = (0.5,), scale_factor: float = 4.0,
                keep_state: bool = False, queries: Optional[np.ndarray] = None) -> ForwardResult:
        """Super-resolve ``lr_frames`` and synthesize ``times`` between each adjacent pair.

        Frames are ``[3, H, W]`` or batched ``[N, 3, H, W]`` tensors. The
        output holds every input frame and each synthesized frame in
        temporal order, decoded at ``floor(scale_factor * H)``; ``queries``
        restricts decoding to those flat output pixels (see ``spatial_modulate``).
        """
        if len(lr_frames) < 2:
            raise ContractError("forward needs at least 2 input frames")
        if not 1.0 <= scale_factor <= 8.0:
            raise ContractError(f"scale {scale_factor} outside [1, 8]")
        times = sorted(float(t) for t in times)
        frames = [f if isinstance(f, Tensor) else Tensor(np.asarray(f, dtype=np.float32)) for f in lr_frames]
        frames = [f if f.ndim == 4 else reshape(f, (1,) + f.shape) for f in frames]
        shape = frames[0].shape
        if any(f.shape != shape for f in frames):
            raise DimensionError("input frames differ in shape")
        n, _, h, w = shape
        ph, pw = -h % PAD_MULTIPLE, -w % PAD_MULTIPLE
        if ph or pw:
            frames = [Tensor(np.pad(f.data, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")) for f in frames]
        k = len(frames)
        # one encoder call over all frames
        pyr = self.input_projection(concat(frames, axis=0))
        pyrs = [FeaturePyramid([lvl[i * n:(i + 1) * n] for lvl in pyr.levels]) for i in range(k)]

        feats, steps, interp, all_flows = [], [], [], []
        for i in range(k - 1):
            ft, flows = self.kernel_integration(pyrs[i], pyrs[i + 1], times or [0.5])
            all_flows.append(flows)
            f01, f10 = flows[0][0].flow01, flows[0][0].flow10
            feats.append(pyrs[i][0])
            interp.append(False)
            prev = 0.0
            for t, f in zip(times, ft):
                steps.append((f01, f10, prev, t))
                feats.append(f[0])
                interp.append(True)
                prev = t
            steps.append((f01, f10, prev, 1.0))
        feats.append(pyrs[-1][0])
        interp.append(False)
        state = self.propagate_bidirectional(feats, steps)
        out_h, out_w = int(np.floor(scale_factor * h + 1e-9)), int(np.floor(scale_factor * w + 1e-9))
        decoded = [self.spatial_modulate(r, out_h, out_w, (h, w), queries) for r in state.fused]
        return ForwardResult(decoded, interp, all_flows, state if keep_state else None)

    __call__ = forward
