"""Synthetic video with analytic motion.

A scene is a continuous function of (x, y, time): a band-limited background
sliding at a small global velocity, with rigid textured sprites composited
on top. Frames can be sampled at any time and any resolution, and the flow
of the visible surface between two times is known exactly.

Coordinates are in high-resolution pixels with pixel ``j`` centred at
``x = j``; time is measured in high-resolution frames.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .autograd import ContractError


class SpecError(ValueError):
    """A scene violates its geometric invariants."""


@dataclass
class Texture:
    base: list  # rgb in [0, 1]
    waves: list  # rows of (fx, fy, phase, amp_r, amp_g, amp_b); frequencies in cycles/px

    def evaluate(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = np.empty((3,) + x.shape)
        out[:] = np.asarray(self.base).reshape((3,) + (1,) * x.ndim)
        for fx, fy, phase, ar, ag, ab in self.waves:
            s = np.sin(2 * np.pi * (fx * x + fy * y) + phase)
            out[0] += ar * s
            out[1] += ag * s
            out[2] += ab * s
        return out


@dataclass
class Sprite:
    shape: str  # "rect" | "disc"
    size: list  # rect: (half_w, half_h); disc: (radius, radius)
    texture: Texture
    position: list  # centre (x, y) at time 0
    velocity: list  # px / frame
    rotation: float = 0.0  # rad / frame

    @property
    def bound_radius(self) -> float:
        return float(np.hypot(*self.size)) if self.shape == "rect" else float(self.size[0])

    def centre(self, tau: float) -> np.ndarray:
        return np.asarray(self.position) + np.asarray(self.velocity) * tau

    def to_local(self, x, y, tau):
        cx, cy = self.centre(tau)
        th = self.rotation * tau
        dx, dy = x - cx, y - cy
        c, s = np.cos(th), np.sin(th)
        return c * dx + s * dy, -s * dx + c * dy

    def to_world(self, lx, ly, tau):
        cx, cy = self.centre(tau)
        th = self.rotation * tau
        c, s = np.cos(th), np.sin(th)
        return cx + c * lx - s * ly, cy + s * lx + c * ly

    def signed_distance(self, lx, ly) -> np.ndarray:
        if self.shape == "disc":
            return np.hypot(lx, ly) - self.size[0]
        qx, qy = np.abs(lx) - self.size[0], np.abs(ly) - self.size[1]
        outside = np.hypot(np.maximum(qx, 0), np.maximum(qy, 0))
        return outside + np.minimum(np.maximum(qx, qy), 0)


@dataclass
class SceneSpec:
    seed: int
    height: int
    width: int
    background: Texture
    bg_velocity: list = field(default_factory=lambda: [0.0, 0.0])
    sprites: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        d = json.loads(text)
        d["background"] = Texture(**d["background"])
        d["sprites"] = [Sprite(**{**s, "texture": Texture(**s["texture"])}) for s in d["sprites"]]
        return cls(**d)

    def check(self, t_end: float) -> None:
        """Raise SpecError unless every sprite stays inside the frame on [0, t_end]."""
        for i, sp in enumerate(self.sprites):
            r = sp.bound_radius
            for tau in (0.0, t_end):
                cx, cy = sp.centre(tau)
                if cx - r < 0 or cy - r < 0 or cx + r > self.width - 1 or cy + r > self.height - 1:
                    raise SpecError(f"sprite {i} leaves the frame at time {tau}")
            if np.hypot(*sp.velocity) > 8.0:
                raise SpecError(f"sprite {i} moves faster than 8 px/frame")


@dataclass
class DataConfig:
    hr_size: int = 64
    lr_factor: int = 4
    n_frames: int = 3
    v_max: float = 6.0
    bg_v_max: float = 1.0
    sprites_min: int = 1
    sprites_max: int = 3
    max_rotation: float = 0.0
    count: int = 4000


# ---------------------------------------------------------------- rendering


def _sample_grid(spec: SceneSpec, out_h: int, out_w: int, region=None):
    """Scene coordinates of the pixel centres of an ``out_h x out_w`` raster.

    ``region = (y0, x0, h, w)`` selects a window in high-res pixel units
    (edges, not centres); default is the whole frame.
    """
    y0, x0, h, w = region if region is not None else (0, 0, spec.height, spec.width)
    ys = y0 + (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = x0 + (np.arange(out_w) + 0.5) * w / out_w - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return gx, gy, max(h / out_h, w / out_w)


def render_points(spec: SceneSpec, tau: float, gx: np.ndarray, gy: np.ndarray, px: float = 1.0) -> np.ndarray:
    bx, by = spec.bg_velocity
    img = spec.background.evaluate(gx - bx * tau, gy - by * tau)
    for sp in spec.sprites:
        lx, ly = sp.to_local(gx, gy, tau)
        alpha = np.clip(0.5 - sp.signed_distance(lx, ly) / px, 0.0, 1.0)
        sel = alpha > 0
        if not sel.any():
            continue
        a = alpha[sel]
        img[:, sel] = img[:, sel] * (1 - a) + sp.texture.evaluate(lx[sel], ly[sel]) * a
    return np.clip(img, 0.0, 1.0)


def render_frame(spec: SceneSpec, tau: float, out_h: Optional[int] = None, out_w: Optional[int] = None,
                 region=None) -> np.ndarray:
    """``[3, out_h, out_w]`` frame at time ``tau``; edges anti-aliased over one output pixel."""
    out_h = out_h or spec.height
    out_w = out_w or spec.width
    gx, gy, px = _sample_grid(spec, out_h, out_w, region)
    return render_points(spec, tau, gx, gy, px)


def render_sequence(spec: SceneSpec, n_frames: int, h: Optional[int] = None, w: Optional[int] = None,
                    times: Optional[Sequence[float]] = None) -> np.ndarray:
    """Frames at times ``0 .. n_frames-1`` (or the given ``times``), ``[F, 3, H, W]``."""
    if n_frames < 3:
        raise ContractError("render_sequence needs at least 3 frames")
    h, w = h or spec.height, w or spec.width
    if h % 8 or w % 8:
        raise ContractError("frame size must be a multiple of 8")
    times = list(range(n_frames)) if times is None else list(times)
    spec.check(max(max(times), n_frames - 1))
    return np.stack([render_frame(spec, tau, h, w) for tau in times]).astype(np.float32)


def surface_ids(spec: SceneSpec, tau: float, gx, gy) -> np.ndarray:
    """Index of the topmost sprite covering each point (coverage >= 1/2), or -1."""
    ids = np.full(np.shape(gx), -1, dtype=np.int64)
    for i, sp in enumerate(spec.sprites):
        lx, ly = sp.to_local(gx, gy, tau)
        ids[sp.signed_distance(lx, ly) <= 0] = i
    return ids


def analytic_flow(spec: SceneSpec, t0: float, t1: float, h: Optional[int] = None,
                  w: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Displacement of the surface visible at ``t0`` to its position at ``t1``.

    Returns ``(flow [2, H, W], occluded [H, W] bool)``. A pixel is occluded
    when its surface point is hidden by another surface at ``t1`` or has
    left the sampled frame.
    """
    h, w = h or spec.height, w or spec.width
    gx, gy, _ = _sample_grid(spec, h, w)
    ids = surface_ids(spec, t0, gx, gy)
    bx, by = spec.bg_velocity
    nx = gx + bx * (t1 - t0)
    ny = gy + by * (t1 - t0)
    for i, sp in enumerate(spec.sprites):
        sel = ids == i
        if not sel.any():
            continue
        lx, ly = sp.to_local(gx[sel], gy[sel], t0)
        nx[sel], ny[sel] = sp.to_world(lx, ly, t1)
    flow = np.stack([nx - gx, ny - gy]).astype(np.float32)
    if t0 == t1:
        return np.zeros_like(flow), np.zeros((h, w), dtype=bool)
    sx, sy = spec.width / w, spec.height / h  # scene px per sample px
    flow[0] /= sx
    flow[1] /= sy
    occluded = surface_ids(spec, t1, nx, ny) != ids
    lo_x, hi_x = -0.5 + 0.5 * sx, spec.width - 0.5 - 0.5 * sx
    lo_y, hi_y = -0.5 + 0.5 * sy, spec.height - 0.5 - 0.5 * sy
    occluded |= (nx < lo_x) | (nx > hi_x) | (ny < lo_y) | (ny > hi_y)
    return flow, occluded


# ---------------------------------------------------------------- bicubic


def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    return np.where(x <= 1, (a + 2) * x3 - (a + 3) * x2 + 1,
                    np.where(x < 2, a * x3 - 5 * a * x2 + 8 * a * x - 4 * a, 0.0))


@lru_cache(maxsize=64)
def bicubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Catmull-Rom resampling matrix ``[n_out, n_in]``, half-pixel phase, edge clamped.

    When shrinking, the kernel is stretched by the shrink factor (anti-aliased).
    """
    scale = n_out / n_in
    stretch = 1.0 / scale if scale < 1 else 1.0
    support = 2 * stretch
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        centre = (i + 0.5) / scale - 0.5
        taps = np.arange(int(np.floor(centre - support)) + 1, int(np.ceil(centre + support)))
        wts = _cubic((centre - taps) / stretch)
        wts /= wts.sum()
        np.add.at(m[i], np.clip(taps, 0, n_in - 1), wts)
    m.flags.writeable = False
    return m


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    img = np.asarray(img)
    ry = bicubic_matrix(img.shape[-2], out_h)
    rx = bicubic_matrix(img.shape[-1], out_w)
    return (ry @ img.astype(np.float64) @ rx.T).astype(img.dtype if img.dtype.kind == "f" else np.float64)


def bicubic_downsample(img: np.ndarray, factor: int = 4) -> np.ndarray:
    h, w = img.shape[-2:]
    if h % factor or w % factor:
        raise ContractError(f"{h}x{w} is not divisible by {factor}")
    return bicubic_resize(img, h // factor, w // factor)


# ---------------------------------------------------------------- samples


FLOW_KEYS = ("flow01", "flow10", "flow_t0", "flow_t1")


@dataclass
class SyntheticSample:
    """Input pair plus supervision around an intermediate time ``t``.

    ``hr_frames`` holds the targets for (frame 0, time t, frame 1) at the
    output scale; ``lr_frames`` the low-res inputs for frames 0 and 1. Flows
    and occlusion masks are at the full high-res size, in high-res pixels.
    """
    hr_frames: np.ndarray  # [3, 3, H, W]
    lr_frames: np.ndarray  # [2, 3, h, w]
    flows: dict  # key -> [2, Hf, Wf]
    occlusions: dict  # key -> [Hf, Wf] bool
    t: float
    scale: float
    spec: Optional[SceneSpec] = None

    @property
    def valid_masks(self) -> np.ndarray:
        return np.stack([~self.occlusions[k] for k in FLOW_KEYS]).astype(np.float32)

    @property
    def flow_stack(self) -> np.ndarray:
        return np.concatenate([self.flows[k] for k in FLOW_KEYS]).astype(np.float32)


def random_texture(rng: np.random.Generator, octaves: Sequence[float], amp: float,
                   waves_per_octave: int = 3) -> Texture:
    base = rng.uniform(0.25, 0.75, 3)
    waves = []
    for f in octaves:
        for _ in range(waves_per_octave):
            ang = rng.uniform(0, np.pi)
            freq = f * rng.uniform(0.7, 1.3)
            a = amp * rng.uniform(0.4, 1.0) * rng.choice([-1, 1], 3) * rng.uniform(0.5, 1.0, 3)
            waves.append([freq * np.cos(ang), freq * np.sin(ang), rng.uniform(0, 2 * np.pi), *a])
    return Texture(base=base.tolist(), waves=np.asarray(waves).tolist())


def _draw_velocity(rng: np.random.Generator, vmax: float, cap: float) -> list:
    while True:
        v = rng.uniform(-vmax, vmax, 2)
        if np.hypot(*v) <= cap:
            return v.tolist()


def random_scene(seed, cfg: DataConfig = DataConfig()) -> SceneSpec:
    rng = np.random.default_rng(seed)
    size = cfg.hr_size
    t_end = cfg.n_frames - 1
    background = random_texture(rng, octaves=(0.02, 0.045), amp=0.08)
    bg_v = _draw_velocity(rng, cfg.bg_v_max, cfg.bg_v_max)
    sprites = []
    for _ in range(int(rng.integers(cfg.sprites_min, cfg.sprites_max + 1))):
        for _attempt in range(100):
            shape = "rect" if rng.random() < 0.5 else "disc"
            if shape == "rect":
                dims = rng.uniform(0.09, 0.18, 2) * size
            else:
                dims = np.full(2, rng.uniform(0.1, 0.19) * size)
            vel = _draw_velocity(rng, cfg.v_max, 8.0)
            r = float(np.hypot(*dims)) if shape == "rect" else float(dims[0])
            lo = np.array([r, r]) - np.minimum(np.array(vel) * t_end, 0)
            hi = np.array([size - 1 - r] * 2) - np.maximum(np.array(vel) * t_end, 0)
            if np.all(hi > lo):
                pos = rng.uniform(lo, hi)
                break
        else:
            continue
        rot = float(rng.uniform(-cfg.max_rotation, cfg.max_rotation)) if cfg.max_rotation else 0.0
        tex = random_texture(rng, octaves=(0.06, 0.12, 0.2), amp=0.07)
        sprites.append(Sprite(shape, dims.tolist(), tex, pos.tolist(), vel, rot))
    spec = SceneSpec(int(seed) if np.isscalar(seed) else 0, size, size, background, bg_v, sprites)
    spec.check(t_end)
    return spec


def make_sample(spec: SceneSpec, t: float = 0.5, scale: float = 4.0, lr_factor: int = 4,
                span: float = 2.0, crop: Optional[tuple] = None) -> SyntheticSample:
    """Build the supervised triple for input frames at times 0 and ``span``.

    ``crop = (y, x, size)`` in low-res pixels selects a square window; the
    output-scale targets are rendered directly for that window.
    """
    if not 0 <= t <= 1:
        raise ContractError("t must lie in [0, 1]")
    H, W = spec.height, spec.width
    taus = (0.0, t * span, span)
    hr_full = [render_frame(spec, tau) for tau in taus]
    lr = np.stack([bicubic_downsample(hr_full[0], lr_factor), bicubic_downsample(hr_full[2], lr_factor)])
    flows, occ = {}, {}
    for key, (a, b) in zip(FLOW_KEYS, ((0, 2), (2, 0), (1, 0), (1, 2))):
        flows[key], occ[key] = analytic_flow(spec, taus[a], taus[b])
    if crop is None:
        cy, cx, ch, cw = 0, 0, H // lr_factor, W // lr_factor
    else:
        cy, cx, size = crop
        ch = cw = size
    lr = lr[:, :, cy:cy + ch, cx:cx + cw]
    oh, ow = int(np.floor(scale * ch + 1e-9)), int(np.floor(scale * cw + 1e-9))
    region = (cy * lr_factor, cx * lr_factor, ch * lr_factor, cw * lr_factor)
    if oh == ch * lr_factor and ow == cw * lr_factor:
        ys, xs = slice(region[0], region[0] + region[2]), slice(region[1], region[1] + region[3])
        hr = np.stack([f[:, ys, xs] for f in hr_full])
    else:
        hr = np.stack([render_frame(spec, tau, oh, ow, region) for tau in taus])
    fy = slice(region[0], region[0] + region[2])
    fx = slice(region[1], region[1] + region[3])
    flows = {k: v[:, fy, fx].copy() for k, v in flows.items()}
    occ = {k: v[fy, fx].copy() for k, v in occ.items()}
    return SyntheticSample(hr.astype(np.float32), lr.astype(np.float32), flows, occ, float(t), float(scale), spec)


def sample_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(index)])


class SyntheticDataset:
    """Lazily generated scenes; indices below 80 % of ``count`` are training."""

    def __init__(self, seed: int, count: int, cfg: DataConfig = DataConfig()):
        if count < 1:
            raise ContractError("dataset count must be >= 1")
        self.seed, self.count, self.cfg = int(seed), int(count), cfg
        n_train = int(round(0.8 * count))
        self.train_indices = list(range(n_train))
        self.val_indices = list(range(n_train, count))

    def __len__(self) -> int:
        return self.count

    def scene(self, index: int) -> SceneSpec:
        spec = random_scene(sample_seed(self.seed, index), self.cfg)
        spec.seed = index
        return spec

    def sample(self, index: int, t: float = 0.5, scale: float = 4.0, crop=None) -> SyntheticSample:
        return make_sample(self.scene(index), t, scale, self.cfg.lr_factor, self.cfg.n_frames - 1, crop)

    def __iter__(self) -> Iterator[SyntheticSample]:
        for i in range(self.count):
            yield self.sample(i)


def make_dataset(seed: int, count: int, cfg: DataConfig = DataConfig()) -> SyntheticDataset:
    return SyntheticDataset(seed, count, cfg)


# ---------------------------------------------------------------- on-disk format

FLOW_MAGIC = b"STFL"


def write_flow(path, flow: np.ndarray) -> None:
    """Header: magic, u32 H, u32 W; then x plane and y plane as float32 LE."""
    flow = np.asarray(flow, dtype="<f4")
    _, h, w = flow.shape
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(np.array([h, w], dtype="<u4").tobytes())
        fh.write(flow.tobytes())


def read_flow(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FLOW_MAGIC:
        raise OSError(f"{path}: bad flow magic")
    h, w = np.frombuffer(data[4:12], dtype="<u4")
    body = np.frombuffer(data[12:], dtype="<f4")
    if body.size != 2 * h * w:
        raise OSError(f"{path}: truncated flow file")
    return body.reshape(2, h, w).astype(np.float32)


def export_sample(sample: SyntheticSample, out_dir) -> None:
    from .imageio import write_image
    from .attention import write_pgm

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(sample.hr_frames):
        write_image(out / f"hr_{i}.png", frame)
    for i, frame in enumerate(sample.lr_frames):
        write_image(out / f"lr_{i}.png", frame)
    for key in FLOW_KEYS:
        write_flow(out / f"{key}.flo", sample.flows[key])
        write_pgm(out / f"{key}_occ.pgm", sample.occlusions[key].astype(np.uint8) * 255)
    meta = {"t": sample.t, "scale": sample.scale}
    if sample.spec is not None:
        meta["scene"] = json.loads(sample.spec.to_json())
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_sample(sample_dir) -> SyntheticSample:
    from .imageio import read_image
    from .attention import read_pgm

    d = Path(sample_dir)
    meta = json.loads((d / "meta.json").read_text())
    hr = np.stack([read_image(d / f"hr_{i}.png") for i in range(3)])
    lr = np.stack([read_image(d / f"lr_{i}.png") for i in range(2)])
    flows = {k: read_flow(d / f"{k}.flo") for k in FLOW_KEYS}
    occ = {k: read_pgm(d / f"{k}_occ.pgm") > 127 for k in FLOW_KEYS}
    spec = SceneSpec.from_json(json.dumps(meta["scene"])) if "scene" in meta else None
    return SyntheticSample(hr, lr, flows, occ, meta["t"], meta["scale"], spec)


def export_dataset(dataset: SyntheticDataset, out_dir, indices: Optional[Sequence[int]] = None) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    indices = range(len(dataset)) if indices is None else indices
    rows = []
    val = set(dataset.val_indices)
    for i in indices:
        name = f"sample_{i:05d}"
        export_sample(dataset.sample(i), out / name)
        rows.append(f"{name}\t{'val' if i in val else 'train'}")
    (out / "manifest.txt").write_text("\n".join(rows) + "\n")
    return rows


def read_manifest(root) -> list[tuple[str, str]]:
    lines = (Path(root) / "manifest.txt").read_text().splitlines()
    return [tuple(line.split("\t")) for line in lines if line.strip()]


class SceneListDataset(SyntheticDataset):
    """Dataset over explicit scene specs (e.g. read back from an export)."""

    def __init__(self, scenes: Sequence[SceneSpec], val: Sequence[bool], cfg: DataConfig = DataConfig()):
        if not scenes:
            raise ContractError("dataset has no scenes")
        self.seed, self.count, self.cfg = 0, len(scenes), cfg
        self.scenes = list(scenes)
        self.train_indices = [i for i, v in enumerate(val) if not v]
        self.val_indices = [i for i, v in enumerate(val) if v]

    def scene(self, index: int) -> SceneSpec:
        return self.scenes[index]


def load_dataset(root, cfg: DataConfig = DataConfig()) -> SceneListDataset:
    """Scenes of an exported dataset; samples are re-rendered on demand."""
    scenes, val = [], []
    for name, split in read_manifest(root):
        meta = json.loads((Path(root) / name / "meta.json").read_text())
        if "scene" not in meta:
            raise OSError(f"{name}: meta.json has no scene")
        scenes.append(SceneSpec.from_json(json.dumps(meta["scene"])))
        val.append(split == "val")
    return SceneListDataset(scenes, val, cfg)
