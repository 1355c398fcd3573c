"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor

ABS_FLOOR = 1e-6


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all elements."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def _scalarize(out: Tensor, rng: np.random.Generator) -> tuple:
    if out.size == 1:
        return out, None
    proj = rng.standard_normal(out.shape)
    return (out * proj).sum(), proj


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
              probes: Optional[int] = None, seed: int = 0) -> float:
    """Largest relative error between backprop and central differences.

    ``fn`` maps the inputs to a tensor; non-scalar outputs are reduced with a
    fixed random projection.  ``probes`` limits the number of checked
    coordinates per input (all coordinates when None).
    """
    rng = np.random.default_rng(seed)
    for x in inputs:
        x.data = np.ascontiguousarray(x.data)
        x.grad = None
    loss, proj = _scalarize(fn(*inputs), rng)
    loss.backward()

    def value() -> float:
        out = fn(*inputs)
        return float(out.data.sum() if proj is None else (out.data * proj).sum())

    worst = 0.0
    for x in inputs:
        if not x.requires_grad:
            continue
        analytic = np.zeros(x.shape) if x.grad is None else x.grad
        flat = x.data.reshape(-1)
        idx = np.arange(flat.size)
        if probes is not None and probes < flat.size:
            idx = rng.choice(flat.size, size=probes, replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            num[j] = (up - down) / (2 * eps)
        worst = max(worst, rel_error(analytic.reshape(-1)[idx], num))
    return worst
