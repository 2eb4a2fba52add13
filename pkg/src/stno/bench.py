"""Wall-time and scratch-memory scaling of the attention kernels."""

from __future__ import annotations

import csv
import gc
import time
import tracemalloc
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .attention import galerkin_attend, softmax_attend
from .autograd import Tensor

GALERKIN_N = tuple(1024 * 2 ** k for k in range(7))  # 1024 .. 65536
SOFTMAX_N = tuple(256 * 2 ** k for k in range(6))  # 256 .. 8192
SOFTMAX_MAX_BYTES = 1 << 30  # skip softmax once its n x n scores pass this
MIN_REPEATS = 5
R2_FLAG = 0.98

KERNELS: dict[str, Callable] = {
    "galerkin": lambda q, k, v: galerkin_attend(q, k, v),
    "softmax": softmax_attend,
}


@dataclass
class BenchRecord:
    kernel: str
    n: int
    C: int
    median_ns: Optional[int]
    peak_aux_bytes: Optional[int]
    threads: int
    note: str = ""


@dataclass
class SlopeFit:
    kernel: str
    C: int
    slope: float
    r2: float
    points: int

    @property
    def flagged(self) -> bool:
        return self.r2 <= R2_FLAG


def _inputs(n: int, c: int, seed: int) -> tuple[Tensor, Tensor, Tensor]:
    rng = np.random.default_rng([seed, n, c])
    return tuple(Tensor(rng.standard_normal((n, c), dtype=np.float32)) for _ in range(3))


def peak_aux_bytes(fn: Callable, q, k, v) -> int:
    """Peak traced allocation during ``fn`` minus the returned output itself."""
    gc.collect()
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base = tracemalloc.get_traced_memory()[0]
        out = fn(q, k, v)
        peak = tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()
    return max(0, peak - base - out.data.nbytes)


def time_kernel(fn: Callable, q, k, v, repeats: int = MIN_REPEATS, warmup: int = 2) -> int:
    if repeats < MIN_REPEATS:
        raise ValueError(f"need at least {MIN_REPEATS} repeats")
    for _ in range(warmup):
        fn(q, k, v)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn(q, k, v)
        times.append(time.perf_counter_ns() - t0)
    return int(np.median(times))


def run_bench(kernel: str, ns: Sequence[int], channels: Sequence[int], repeats: int = MIN_REPEATS,
              threads: int = 1, seed: int = 0, measure_memory: bool = True) -> list[BenchRecord]:
    fn = KERNELS[kernel]
    records = []
    for c in channels:
        for n in ns:
            if kernel == "softmax" and 4 * n * n > SOFTMAX_MAX_BYTES:
                records.append(BenchRecord(kernel, n, c, None, None, threads,
                                           f"skipped: n x n scores need {4 * n * n} bytes"))
                continue
            q, k, v = _inputs(n, c, seed)
            med = time_kernel(fn, q, k, v, repeats)
            mem = peak_aux_bytes(fn, q, k, v) if measure_memory else None
            records.append(BenchRecord(kernel, n, c, med, mem, threads))
    return records


def fit_slope(records: Sequence[BenchRecord]) -> list[SlopeFit]:
    """Least-squares fit of log(time) against log(n), per kernel and width."""
    fits = []
    groups: dict = {}
    for r in records:
        if r.median_ns is not None:
            groups.setdefault((r.kernel, r.C), []).append(r)
    for (kernel, c), rows in groups.items():
        if len(rows) < 2:
            continue
        x = np.log([r.n for r in rows])
        y = np.log([r.median_ns for r in rows])
        slope, icept = np.polyfit(x, y, 1)
        resid = y - (slope * x + icept)
        ss_tot = float(((y - y.mean()) ** 2).sum())
        r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 0.0
        fits.append(SlopeFit(kernel, c, float(slope), r2, len(rows)))
    return fits


def write_records(path, records: Sequence[BenchRecord]) -> None:
    cols = list(BenchRecord.__dataclass_fields__)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, cols, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({k: ("" if v is None else v) for k, v in asdict(r).items()})


def write_fits(path, fits: Sequence[SlopeFit]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kernel", "C", "slope", "r2", "points", "flagged"])
        for f in fits:
            w.writerow([f.kernel, f.C, f"{f.slope:.4f}", f"{f.r2:.5f}", f.points, int(f.flagged)])
