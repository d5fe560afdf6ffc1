"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import Tensor, precision


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_input: list[float] = field(default_factory=list)
    checked: int = 0
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)


def _scale(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tol: float = 1e-3,
    h: float = 1e-6,
    seed: int = 0,
    exclude: Sequence[np.ndarray | None] | None = None,
    max_points: int | None = None,
    dtype=np.float64,
    kink_screen: bool = False,
) -> GradCheckReport:
    """Compare the tape gradient of ``f(*inputs)`` with central differences.

    Non-scalar outputs are reduced with a fixed random cotangent. ``exclude``
    gives per-input boolean masks of coordinates to skip (e.g. ReLU kinks);
    ``max_points`` subsamples coordinates per input for large tensors. ``f``
    must be deterministic and must not mutate state between calls. The check
    runs with the engine switched to ``dtype`` and the inputs cast to it;
    float32 rounding alone would swamp differences on small gradients.

    With ``kink_screen`` a coordinate is skipped when its forward and backward
    one-sided slopes disagree by more than ``tol`` of the gradient scale: the
    function is not smooth within ``±h`` there (a ReLU input within ``h`` of
    zero), so the central difference estimates no derivative. A wrong
    analytic gradient still differs from both slopes and is still caught.
    """
    saved = [t.data for t in inputs]
    try:
        with precision(dtype):
            for t in inputs:
                t.data = t.data.astype(dtype)
            return _grad_check(f, inputs, tol, h, seed, exclude, max_points, kink_screen)
    finally:
        for t, d in zip(inputs, saved):
            t.data = d
            t.grad = None


def _grad_check(f, inputs, tol, h, seed, exclude, max_points, kink_screen) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    targets = [t for t in inputs if t.requires_grad]
    for t in targets:
        t.grad = None
    out = f(*inputs)
    cot = None if out.data.ndim == 0 else rng.standard_normal(out.shape).astype(out.data.dtype)

    def scalar(o: Tensor) -> float:
        if cot is None:
            return float(o.data)
        return float(np.sum(o.data.astype(np.float64) * cot))

    f0 = scalar(out)
    out.backward(cot)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in targets]
    a_scale = max((float(np.max(np.abs(a), initial=0.0)) for a in analytic), default=0.0)

    diffs: list[float] = []
    scale = 0.0
    checked = 0
    skipped = 0
    for k, t in enumerate(targets):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        mask = None if exclude is None else exclude[k]
        if mask is not None:
            idx = idx[~np.asarray(mask).reshape(-1)]
        if max_points is not None and idx.size > max_points:
            idx = np.sort(rng.choice(idx, size=max_points, replace=False))
        num = np.zeros(idx.size)
        smooth = np.ones(idx.size, dtype=bool)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = scalar(f(*inputs))
            flat[i] = orig - h
            fm = scalar(f(*inputs))
            flat[i] = orig
            num[j] = (fp - fm) / (2.0 * h)
            if kink_screen:
                smooth[j] = abs((fp - f0) - (f0 - fm)) / h <= tol * a_scale
        skipped += int(np.count_nonzero(~smooth))
        idx, num = idx[smooth], num[smooth]
        checked += idx.size
        a = analytic[k].reshape(-1)[idx].astype(np.float64)
        diffs.append(float(np.max(np.abs(a - num), initial=0.0)))
        scale = max(scale, _scale(a, num))
    for t in targets:
        t.grad = None
    # One scale for every input: a parameter whose true gradient is zero (a
    # bias feeding batch norm) would otherwise compare float noise with noise.
    errors = [d / scale if scale > 0 else 0.0 for d in diffs]
    return GradCheckReport(max(errors, default=0.0), tol, errors, checked, skipped)
