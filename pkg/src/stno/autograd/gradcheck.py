"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    checked: int
    worst: Optional[tuple] = None  # (input index, flat element index)
    per_input: list = field(default_factory=list)


def rel_err(a, n) -> np.ndarray:
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], tol: float = 1e-4,
               h: float = 1e-5, max_elements: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` against central differences.

    Inputs should be float64. With ``max_elements`` only a random subset of
    each input's elements is perturbed. A failing comparison is reported,
    never raised.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = f(*inputs)
    tape.backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    rng = rng or np.random.default_rng(0)

    worst, worst_at, checked, per_input = 0.0, None, 0, []
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = rng.choice(flat.size, size=max_elements, replace=False)
        local = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*inputs).data)
            flat[i] = orig - h
            fm = float(f(*inputs).data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            err = float(rel_err(analytic[k].reshape(-1)[i], num))
            checked += 1
            local = max(local, err)
            if err > worst:
                worst, worst_at = err, (k, int(i))
        per_input.append(local)
    return GradCheckReport(worst, worst <= tol, checked, worst_at, per_input)
