"""Adam without weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Sequence

import numpy as np

from .nn import Parameter


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = list(params)
        for i, p in enumerate(self.params):
            if not p.name:
                p.name = f"param{i}"
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState(
            m={p.name: np.zeros(p.shape) for p in self.params},
            v={p.name: np.zeros(p.shape) for p in self.params},
        )

    def step(self) -> None:
        """One bias-corrected update. Frozen parameters and missing grads are skipped."""
        st = self.state
        st.step_count += 1
        t = st.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p in self.params:
            if p.frozen or p.grad is None:
                continue
            g = p.grad
            m = st.m[p.name]
            v = st.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(params: Sequence[Parameter], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Functional form of :meth:`Adam.step` over explicit grads and state."""
    opt = Adam.__new__(Adam)
    opt.params, opt.state = list(params), state
    opt.lr, opt.beta1, opt.beta2, opt.eps = lr, beta1, beta2, eps
    for p, g in zip(opt.params, grads):
        state.m.setdefault(p.name, np.zeros(p.shape))
        state.v.setdefault(p.name, np.zeros(p.shape))
        p.grad = g
    opt.step()
