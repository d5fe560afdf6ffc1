"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ParameterError, PoisonedGradientError
from .core import DTYPE, Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def copy(self) -> "AdamState":
        return AdamState(
            self.lr, self.beta1, self.beta2, self.eps, self.step,
            [a.copy() for a in self.m], [a.copy() for a in self.v],
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> AdamState:
    """Update ``params`` in place and return ``state`` (also mutated).

    Missing gradients count as zero. Any non-finite gradient aborts the step
    before anything is modified.
    """
    if len(params) != len(grads):
        raise ParameterError("params and grads differ in length")
    gs = [np.zeros_like(p.data) if g is None else np.asarray(g, dtype=DTYPE) for p, g in zip(params, grads)]
    for p, g in zip(params, gs):
        if g.shape != p.data.shape:
            raise ParameterError(f"grad shape {g.shape} != param shape {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise PoisonedGradientError(f"non-finite gradient for parameter {p.name or p.shape}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif len(state.m) != len(params) or any(m.shape != p.data.shape for m, p in zip(state.m, params)):
        raise ParameterError("optimizer state does not match parameters")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, gs, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(DTYPE)
    return state
