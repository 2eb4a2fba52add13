"""Loss, optimizer, augmentation and the training/validation loops."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .autograd import (
    ContractError, NonFiniteError, Tape, Tensor, bilinear_resize, charbonnier, concat, no_grad,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import epe, psnr, ssim
from .model import STNO, FlowSet, ModelConfig
from .synthetic import FLOW_KEYS, SyntheticDataset, SyntheticSample, bicubic_resize

CONTINUOUS_TIMES = tuple(k / 8 for k in range(1, 8))
CONTINUOUS_SCALES = tuple(round(2.0 + 0.2 * k, 1) for k in range(11))
CSV_COLUMNS = ("step", "lr", "train_loss", "val_psnr", "val_ssim", "val_epe")


class TrainingAborted(RuntimeError):
    """Non-finite loss or gradient; the last good checkpoint is left in place."""


@dataclass
class TrainConfig:
    lr_init: float = 2e-4
    lr_final: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    alpha: float = 1e-2
    eps_charbonnier: float = 1e-3
    total_steps: int = 20000
    batch_size: int = 8
    seed: int = 0
    mode: str = "fixed"  # fixed | continuous
    t: float = 0.5
    scale: float = 4.0
    queries: int = 1024  # decoded output pixels per frame per step; 0 = all
    crop: int = 0  # low-res crop size; 0 = whole frame
    flip_prob: float = 0.5
    val_every: int = 500
    val_samples: int = 64
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.alpha < 0:
            raise ContractError("alpha must be >= 0")
        if not self.lr_final < self.lr_init:
            raise ContractError("lr_final must be below lr_init")
        if self.mode not in ("fixed", "continuous"):
            raise ContractError(f"unknown mode {self.mode!r}")
        if self.total_steps < 0 or self.batch_size < 1:
            raise ContractError("total_steps >= 0 and batch_size >= 1 required")


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, state: OptimizerState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam, updating ``params`` (name -> Tensor) in place from their ``grad``."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in {name}")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def cosine_lr(step: int, total_steps: int, lr_init: float = 2e-4, lr_final: float = 1e-7) -> float:
    if step < 0:
        raise ContractError("step must be >= 0")
    if total_steps <= 0 or step >= total_steps:
        return lr_final
    return lr_final + 0.5 * (lr_init - lr_final) * (1 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------- loss


def upsample_flow_stack(flows: Sequence[Tensor], size: tuple) -> Tensor:
    """Concatenate ``[N, 2, h, w]`` flows and resize them to ``size`` in target pixels."""
    stack = concat(list(flows), axis=1)
    h, w = stack.shape[-2:]
    factor = np.tile(np.array([size[1] / w, size[0] / h]), len(flows)).reshape(-1, 1, 1)
    return bilinear_resize(stack, size=size) * Tensor(factor.astype(stack.dtype))


def total_loss(sr: Sequence[Tensor], hr: Sequence, pred_flows: Sequence[FlowSet], gt_flows: np.ndarray,
               masks: np.ndarray, alpha: float = 1e-2, eps: float = 1e-3) -> Tensor:
    """Image Charbonnier plus ``alpha`` times the masked flow Charbonnier of each level.

    ``sr``/``hr`` are matching lists of predicted and target frames;
    ``pred_flows`` holds one FlowSet per pyramid level; ``gt_flows`` is
    ``[N, 8, H, W]`` (flow01, flow10, flow_t0, flow_t1 stacked) and
    ``masks`` ``[N, 4, H, W]`` with 1 on pixels that take part.
    """
    if len(pred_flows) != 3:
        raise ContractError(f"need flows for 3 pyramid levels, got {len(pred_flows)}")
    if len(sr) != len(hr) or not sr:
        raise ContractError("sr and hr frame lists must match and be non-empty")
    img = None
    for p, h in zip(sr, hr):
        term = charbonnier(p, h, eps)
        img = term if img is None else img + term
    loss = img * (1.0 / len(sr)) if len(sr) > 1 else img
    if alpha == 0:
        return loss
    size = gt_flows.shape[-2:]
    m8 = np.repeat(np.asarray(masks, dtype=np.float32), 2, axis=1)
    if not m8.any():
        return loss
    for fs in pred_flows:
        up = upsample_flow_stack(fs.as_list(), size)
        loss = loss + charbonnier(up, gt_flows.astype(up.dtype), eps, mask=m8) * alpha
    return loss


# ---------------------------------------------------------------- augmentation


def temporal_flip_augment(sample: SyntheticSample, rng: Optional[np.random.Generator] = None,
                          p: float = 0.5) -> SyntheticSample:
    """Reverse time with probability ``p`` (always when ``rng`` is None).

    Frames reverse, each flow is relabelled with its opposite-direction
    counterpart and the intermediate time becomes ``1 - t``.
    """
    if rng is not None and rng.random() >= p:
        return sample
    swap = {"flow01": "flow10", "flow10": "flow01", "flow_t0": "flow_t1", "flow_t1": "flow_t0"}
    return replace(sample,
                   hr_frames=sample.hr_frames[::-1].copy(),
                   lr_frames=sample.lr_frames[::-1].copy(),
                   flows={k: sample.flows[swap[k]] for k in FLOW_KEYS},
                   occlusions={k: sample.occlusions[swap[k]] for k in FLOW_KEYS},
                   t=1.0 - sample.t)


def _geom(arr: np.ndarray, hflip: bool, vflip: bool, rot: int) -> np.ndarray:
    if hflip:
        arr = arr[..., ::-1]
    if vflip:
        arr = arr[..., ::-1, :]
    if rot:
        arr = np.rot90(arr, rot, axes=(-2, -1))
    return np.ascontiguousarray(arr)


def _geom_flow(flow: np.ndarray, hflip: bool, vflip: bool, rot: int) -> np.ndarray:
    f = _geom(flow, hflip, vflip, rot).copy()
    if hflip:
        f[0] = -f[0]
    if vflip:
        f[1] = -f[1]
    for _ in range(rot % 4):  # np.rot90 k=1: (vx, vy) -> (vy, -vx)
        f = np.stack([f[1], -f[0]])
    return f


def spatial_augment(sample: SyntheticSample, hflip: bool = False, vflip: bool = False, rot: int = 0,
                    crop: Optional[tuple] = None, lr_factor: int = 4) -> SyntheticSample:
    """Flip/rotate every frame, flow and mask together; optionally crop first.

    ``crop = (y, x, size)`` in low-res pixels; high-res frames must be
    exactly ``lr_factor`` times the low-res size.
    """
    s = sample
    if crop is not None:
        y, x, k = crop
        h, w = s.lr_frames.shape[-2:]
        if k < 1 or y < 0 or x < 0 or y + k > h or x + k > w:
            raise ContractError(f"crop {crop} outside the {h}x{w} frame")
        if s.hr_frames.shape[-1] != w * lr_factor or s.hr_frames.shape[-2] != h * lr_factor:
            raise ContractError("crop needs high-res frames at lr_factor times the low-res size")
        f = lr_factor
        hy, hx = slice(y * f, (y + k) * f), slice(x * f, (x + k) * f)
        s = replace(s, lr_frames=s.lr_frames[..., y:y + k, x:x + k].copy(),
                    hr_frames=s.hr_frames[..., hy, hx].copy(),
                    flows={kk: v[:, hy, hx].copy() for kk, v in s.flows.items()},
                    occlusions={kk: v[hy, hx].copy() for kk, v in s.occlusions.items()})
    if not (hflip or vflip or rot % 4):
        return s
    return replace(s, lr_frames=_geom(s.lr_frames, hflip, vflip, rot),
                   hr_frames=_geom(s.hr_frames, hflip, vflip, rot),
                   flows={k: _geom_flow(v, hflip, vflip, rot) for k, v in s.flows.items()},
                   occlusions={k: _geom(v, hflip, vflip, rot) for k, v in s.occlusions.items()})


def sample_continuous(rng: np.random.Generator) -> tuple[float, float]:
    t = CONTINUOUS_TIMES[int(rng.integers(len(CONTINUOUS_TIMES)))]
    s = CONTINUOUS_SCALES[int(rng.integers(len(CONTINUOUS_SCALES)))]
    return t, s


# ---------------------------------------------------------------- batches


@dataclass
class Batch:
    lr: list  # 2 x [N, 3, h, w]
    hr: list  # 3 x [N, 3, H', W']
    flows: np.ndarray  # [N, 8, H, W]
    valid: np.ndarray  # [N, 4, H, W]
    t: float
    scale: float


def collate(samples: Sequence[SyntheticSample]) -> Batch:
    lr = np.stack([s.lr_frames for s in samples]).astype(np.float32)
    hr = np.stack([s.hr_frames for s in samples]).astype(np.float32)
    return Batch([lr[:, 0], lr[:, 1]], [hr[:, 0], hr[:, 1], hr[:, 2]],
                 np.stack([s.flow_stack for s in samples]), np.stack([s.valid_masks for s in samples]),
                 samples[0].t, samples[0].scale)


def training_batch(dataset: SyntheticDataset, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    t, s = sample_continuous(rng) if cfg.mode == "continuous" else (cfg.t, cfg.scale)
    lr_size = dataset.cfg.hr_size // dataset.cfg.lr_factor
    samples = []
    for _ in range(cfg.batch_size):
        idx = dataset.train_indices[int(rng.integers(len(dataset.train_indices)))]
        flip = rng.random() < cfg.flip_prob
        crop = None
        if cfg.crop and cfg.crop < lr_size:
            y, x = rng.integers(0, lr_size - cfg.crop + 1, 2)
            crop = (int(y), int(x), cfg.crop)
        hflip, vflip, rot = bool(rng.random() < 0.5), bool(rng.random() < 0.5), int(rng.integers(4))
        sample = dataset.sample(idx, 1.0 - t if flip else t, s, crop=crop)
        if flip:
            sample = temporal_flip_augment(sample)
        samples.append(spatial_augment(sample, hflip, vflip, rot))
    return collate(samples)


def select_queries(hr: Sequence[np.ndarray], queries: Optional[np.ndarray]) -> list[np.ndarray]:
    if queries is None:
        return list(hr)
    return [h.reshape(h.shape[0], 3, -1)[:, :, queries] for h in hr]


def batch_loss(model: STNO, batch: Batch, cfg: TrainConfig, queries: Optional[np.ndarray] = None) -> Tensor:
    res = model.forward([Tensor(x) for x in batch.lr], [batch.t], batch.scale, queries=queries)
    return total_loss(res.frames, select_queries(batch.hr, queries), res.flows[0][0], batch.flows,
                      batch.valid, cfg.alpha, cfg.eps_charbonnier)


# ---------------------------------------------------------------- validation


def evaluate(model: STNO, samples: Sequence[SyntheticSample], chunk: int = 8) -> dict:
    """Mean metrics over ``samples`` (which must share t and scale).

    ``psnr``/``ssim`` are for the synthesized middle frame, ``psnr_key`` for
    the two super-resolved inputs, ``epe`` for the finest flow01 scaled to
    high-res pixels on non-occluded pixels, and ``psnr_bicubic`` for the
    bicubic upsampling of the nearest input frame.
    """
    rows = {"psnr": [], "ssim": [], "psnr_key": [], "ssim_key": [], "epe": [], "psnr_bicubic": [],
            "ssim_bicubic": []}
    for start in range(0, len(samples), chunk):
        batch = collate(samples[start:start + chunk])
        with no_grad():
            res = model.forward([Tensor(x) for x in batch.lr], [batch.t], batch.scale)
        size = batch.flows.shape[-2:]
        flow01 = upsample_flow_stack([res.flows[0][0][0].flow01], size).data
        nearest = 0 if batch.t <= 0.5 else 1
        for i in range(batch.lr[0].shape[0]):
            mid = batch.hr[1][i]
            pred = res.frames[1].data[i]
            rows["psnr"].append(psnr(pred, mid))
            rows["ssim"].append(ssim(pred, mid))
            for k in (0, 2):
                rows["psnr_key"].append(psnr(res.frames[k].data[i], batch.hr[k][i]))
                rows["ssim_key"].append(ssim(res.frames[k].data[i], batch.hr[k][i]))
            e = epe(flow01[i], batch.flows[i, 0:2], batch.valid[i, 0] > 0)
            if e is not None:
                rows["epe"].append(e)
            base = np.clip(bicubic_resize(batch.lr[nearest][i], *mid.shape[-2:]), 0, 1)
            rows["psnr_bicubic"].append(psnr(base, mid))
            rows["ssim_bicubic"].append(ssim(base, mid))
    return {k: (float(np.mean(v)) if v else None) for k, v in rows.items()}


def validation_samples(dataset: SyntheticDataset, count: int, t: float = 0.5, scale: float = 4.0) -> list:
    return [dataset.sample(i, t, scale) for i in dataset.val_indices[:count]]


# ---------------------------------------------------------------- loop


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _rewrite_log(path: Path, keep_below: int) -> None:
    """Drop logged rows from steps that will be replayed after a resume."""
    rows = list(csv.reader(path.open()))
    keep = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) < keep_below]
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(keep)
    path.write_text(buf.getvalue())


def train_loop(model: STNO, dataset: SyntheticDataset, cfg: TrainConfig, out_dir,
               resume: Optional[str] = None, log: Callable[[str], None] = lambda s: None,
               stop_at: Optional[int] = None) -> dict:
    """Optimize ``model`` for ``cfg.total_steps`` steps, writing ``metrics.csv`` and checkpoints.

    Every step draws its batch, augmentation and decoded pixels from
    ``default_rng([seed, step])``, so resuming from a checkpoint replays the
    exact sequence. ``stop_at`` ends the run early after that many steps
    (with a checkpoint), leaving the schedule untouched. Returns the last
    validation metrics.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    opt = OptimizerState()
    start = 0
    log_path = out / "metrics.csv"
    if resume is not None:
        loaded, header = load_checkpoint(resume, opt)
        model.load_state_dict(loaded.state_dict())
        start = int(header["step"])
        if log_path.exists():
            _rewrite_log(log_path, start)
        log(f"resumed from {resume} at step {start}")
    if not log_path.exists() or resume is None:
        log_path.write_text(",".join(CSV_COLUMNS) + "\n")
    val = validation_samples(dataset, cfg.val_samples, 0.5, 4.0 if cfg.mode == "fixed" else 2.0)
    params = dict(model.named_parameters())
    ckpt = out / "checkpoint.bin"
    last_metrics: dict = {}
    lr_px = dataset.cfg.hr_size // dataset.cfg.lr_factor
    with log_path.open("a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for step in range(start, cfg.total_steps):
            rng = np.random.default_rng([cfg.seed, step])
            lr = cosine_lr(step, cfg.total_steps, cfg.lr_init, cfg.lr_final)
            batch = training_batch(dataset, cfg, rng)
            side = cfg.crop if cfg.crop and cfg.crop < lr_px else lr_px
            n_out = int(np.floor(batch.scale * side + 1e-9)) ** 2
            queries = None
            if cfg.queries and cfg.queries < n_out:
                queries = np.sort(rng.choice(n_out, cfg.queries, replace=False))
            try:
                model.zero_grad()
                with Tape() as tape:
                    loss = batch_loss(model, batch, cfg, queries)
                tape.backward(loss)
                adam_step(params, opt, lr, cfg.beta1, cfg.beta2, cfg.eps_adam)
            except NonFiniteError as exc:
                fh.flush()
                raise TrainingAborted(f"step {step}: {exc}; last good checkpoint: {ckpt}") from exc
            row = [str(step), _fmt(lr), _fmt(loss.item()), "", "", ""]
            done = step + 1
            if done % cfg.val_every == 0 or done == cfg.total_steps:
                last_metrics = evaluate(model, val)
                row[3:] = [_fmt(last_metrics["psnr"]), _fmt(last_metrics["ssim"]), _fmt(last_metrics["epe"])]
                log(f"step {done}: loss {loss.item():.5f} val psnr {last_metrics['psnr']:.3f} "
                    f"(bicubic {last_metrics['psnr_bicubic']:.3f}) epe {last_metrics['epe']}")
            writer.writerow(row)
            if done % cfg.checkpoint_every == 0 or done in (cfg.total_steps, stop_at):
                fh.flush()
                save_checkpoint(ckpt, model, done, opt, {"train": asdict(cfg)})
            if done == stop_at:
                break
    return last_metrics
