"""Conventional finger-vein recognition: preprocessing, Maximum Curvature
vein extraction and Miura template matching.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ParameterError, SegmentationError, UndefinedScoreError
from .imaging import resize_bilinear, resize_nearest
from .presentation import WORKING_SIZE, Presentation

log = logging.getLogger(__name__)


@dataclass
class RecognizerConfig:
    sigma: float = 4.0
    shift: tuple[int, int] = (12, 12)
    roi_margin: int = 6
    output_size: tuple[int, int] = WORKING_SIZE
    template_agg: str = "max"

    def __post_init__(self) -> None:
        self.shift = (int(self.shift[0]), int(self.shift[1]))
        self.output_size = (int(self.output_size[0]), int(self.output_size[1]))
        if self.sigma <= 0:
            raise ParameterError("sigma must be positive")
        if self.template_agg not in ("max", "mean"):
            raise ParameterError("template_agg must be 'max' or 'mean'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shift"] = list(self.shift)
        d["output_size"] = list(self.output_size)
        return d


@dataclass
class VeinTemplate:
    map: np.ndarray
    source_id: str = ""

    def __post_init__(self) -> None:
        m = np.asarray(self.map)
        if m.ndim != 2:
            raise ParameterError("template must be 2-D")
        if not np.all((m == 0) | (m == 1)):
            raise ParameterError("template values must be 0 or 1")
        self.map = m.astype(np.uint8)


@dataclass
class MatchScore:
    value: float
    probe_id: str = ""
    model_id: str = ""
    is_genuine: bool = False
    offset: tuple[int, int] = (0, 0)
    defined: bool = True


# --------------------------------------------------------------------------
# preprocessing


@dataclass
class FingerGeometry:
    angle_deg: float
    top: int
    bottom: int
    left: int
    right: int


def _edges(img: np.ndarray, min_strength: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-column upper (dark->bright) and lower (bright->dark) finger edges.

    Rows outside the frame count as black background.
    """
    smooth = ndimage.gaussian_filter(img.astype(np.float64), 2.0, mode="constant", cval=0.0)
    grad = ndimage.sobel(smooth, axis=0, mode="constant", cval=0.0)
    h = img.shape[0]
    half = h // 2
    top = np.argmax(grad[:half], axis=0)
    bottom = half + np.argmin(grad[half:], axis=0)
    cols = np.arange(img.shape[1])
    strength = np.minimum(grad[top, cols], -grad[bottom, cols])
    valid = strength > min_strength
    return top, bottom, valid


def finger_geometry(img: np.ndarray) -> FingerGeometry:
    """Orientation and bounding box of the bright finger on a dark background."""
    img = np.asarray(img, dtype=np.float64)
    span = float(img.max() - img.min())
    if span <= 1e-6:
        raise SegmentationError("image is flat; no finger region")
    top, bottom, valid = _edges(img, 0.25 * span)
    if valid.sum() < max(8, img.shape[1] // 10):
        raise SegmentationError("finger boundary not found")
    cols = np.nonzero(valid)[0]
    # columns across the fingertip have foreshortened, skewed edges
    thick = bottom[cols] - top[cols]
    body = thick >= 0.85 * np.median(thick)
    if body.sum() >= 8:
        cols = cols[body]
    mid = 0.5 * (top[cols] + bottom[cols])
    slope, _ = np.polyfit(cols.astype(np.float64), mid, 1)
    angle = math.degrees(math.atan(slope))
    return FingerGeometry(
        angle, int(np.min(top[cols])), int(np.max(bottom[cols])), int(cols.min()), int(cols.max())
    )


def _finger_mask(img: np.ndarray) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """Finger mask and its crop box ``(r0, r1, c0, c1)``.

    Rows come from the median edges: once the axis is horizontal the body has
    straight edges, and a few corner columns must not widen the box.
    """
    span = float(img.max() - img.min())
    top, bottom, valid = _edges(img, 0.25 * span)
    rows = np.arange(img.shape[0])[:, None]
    m = (rows >= top[None, :]) & (rows <= bottom[None, :]) & valid[None, :]
    if not valid.any():
        return m, (0, 0, 0, 0)
    cols = np.nonzero(valid)[0]
    r0 = int(np.median(top[valid]))
    r1 = int(np.median(bottom[valid])) + 1
    return m, (r0, r1, int(cols[0]), int(cols[-1]) + 1)


def preprocess(raw: Presentation, output_size: tuple[int, int] = WORKING_SIZE) -> Presentation:
    """Segment, rotate the finger axis to horizontal, crop and rescale.

    The returned presentation carries the finger mask in ``roi``.
    """
    img = raw.pixels.astype(np.float64)
    geom = finger_geometry(img)
    if abs(geom.angle_deg) > 0.05:
        # rotating by +angle undoes a finger tilted by +angle (row axis points down)
        img = ndimage.rotate(img, geom.angle_deg, reshape=False, order=1, mode="constant", cval=0.0)
    mask, (r0, r1, c0, c1) = _finger_mask(img)
    if mask.mean() < 0.10 or r1 - r0 < 2:
        raise SegmentationError(f"finger region covers only {100 * mask.mean():.1f}% of the frame")
    crop = img[r0:r1, c0:c1]
    crop_mask = mask[r0:r1, c0:c1]
    out = resize_bilinear(crop, output_size)
    roi = resize_nearest(crop_mask.astype(np.uint8), output_size).astype(bool)
    return Presentation(np.clip(out, 0.0, 1.0), raw.source_id, roi)


# --------------------------------------------------------------------------
# Maximum Curvature


@lru_cache(maxsize=16)
def _gauss_kernels(sigma: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r = int(math.ceil(4 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    g1 = x * g
    g1 /= g1 @ x  # correlating with f(x) = x gives exactly 1
    g2 = (x**2 - sigma**2) / sigma**4 * g
    g2 -= g2.mean()  # annihilate constants exactly
    g2 /= 0.5 * (g2 @ x**2)  # unit response to f(x) = x^2 / 2
    return g, g1, g2


def _derivatives(img: np.ndarray, sigma: float) -> dict[str, np.ndarray]:
    g, g1, g2 = _gauss_kernels(float(sigma))

    def sep(kx, ky):
        t = ndimage.correlate1d(img, kx, axis=1, mode="nearest")
        return ndimage.correlate1d(t, ky, axis=0, mode="nearest")

    return {
        "x": sep(g1, g),
        "y": sep(g, g1),
        "xx": sep(g2, g),
        "yy": sep(g, g2),
        "xy": sep(g1, g1),
    }


# numerical floor for "positive" curvature
_KAPPA_EPS = 1e-9


def curvatures(img: np.ndarray, sigma: float = 4.0) -> list[np.ndarray]:
    """Profile curvature in the horizontal, vertical and two diagonal directions."""
    d = _derivatives(np.asarray(img, dtype=np.float64), sigma)
    fx, fy = d["x"], d["y"]
    fxx, fyy, fxy = d["xx"], d["yy"], d["xy"]
    f1 = (fx + fy) / math.sqrt(2.0)
    f2 = (fx - fy) / math.sqrt(2.0)
    f11 = 0.5 * fxx + fxy + 0.5 * fyy
    f22 = 0.5 * fxx - fxy + 0.5 * fyy

    def kappa(f2nd, f1st):
        return f2nd / (1.0 + f1st**2) ** 1.5

    return [kappa(fxx, fx), kappa(fyy, fy), kappa(f11, f1), kappa(f22, f2)]


@lru_cache(maxsize=16)
def _line_indices(h: int, w: int) -> list[np.ndarray]:
    """Flat pixel indices of every profile line per direction, lines separated by -1."""
    idx = np.arange(h * w).reshape(h, w)

    def join(lines):
        parts = []
        for line in lines:
            parts.append(line)
            parts.append(np.array([-1]))
        return np.concatenate(parts)

    horizontal = join(list(idx))
    vertical = join(list(idx.T))
    diag = join([np.diagonal(idx, k) for k in range(-(h - 1), w)])  # x - y constant
    anti = join([np.diagonal(idx[::-1], k)[::-1] for k in range(-(h - 1), w)])  # x + y constant
    return [horizontal, vertical, diag, anti]


def _score_direction(k: np.ndarray, lines: np.ndarray) -> np.ndarray:
    """Score each positive-curvature run at its maximum by max(kappa) * width."""
    flat = k.reshape(-1)
    vals = np.where(lines >= 0, flat[np.maximum(lines, 0)], -1.0)
    pos = vals > _KAPPA_EPS
    edges = np.diff(np.concatenate(([False], pos, [False])).astype(np.int8))
    starts = np.nonzero(edges == 1)[0]
    ends = np.nonzero(edges == -1)[0]
    out = np.zeros(flat.size)
    if starts.size == 0:
        return out.reshape(k.shape)
    peak = np.maximum.reduceat(vals, starts)
    width = ends - starts
    # position of the maximum inside each run (first one on ties)
    run_id = np.repeat(np.arange(starts.size), width)
    members = np.concatenate([np.arange(s, e) for s, e in zip(starts, ends)]) if starts.size < 64 else _ranges(starts, ends)
    is_peak = vals[members] == peak[run_id]
    first = np.full(starts.size, -1)
    hit = members[is_peak]
    hit_run = run_id[is_peak]
    # reversed assignment keeps the first occurrence per run
    first[hit_run[::-1]] = hit[::-1]
    np.add.at(out, lines[first], peak * width)
    return out.reshape(k.shape)


def _ranges(starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    lengths = ends - starts
    offsets = np.repeat(starts - np.concatenate(([0], np.cumsum(lengths)[:-1])), lengths)
    return np.arange(lengths.sum()) + offsets


def _connect(v: np.ndarray) -> np.ndarray:
    """Keep a score only where both sides along some direction carry scores."""
    p = np.pad(v, 2)
    h, w = v.shape

    def at(dy, dx):
        return p[2 + dy : 2 + dy + h, 2 + dx : 2 + dx + w]

    out = np.zeros_like(v)
    for dy, dx in ((0, 1), (1, 0), (1, 1), (1, -1)):
        fwd = np.maximum(at(dy, dx), at(2 * dy, 2 * dx))
        bwd = np.maximum(at(-dy, -dx), at(-2 * dy, -2 * dx))
        out = np.maximum(out, np.minimum(fwd, bwd))
    return out


def mc_scores(img: np.ndarray, sigma: float = 4.0, roi: np.ndarray | None = None) -> np.ndarray:
    """Connected Maximum Curvature score map (before binarisation)."""
    img = np.asarray(img, dtype=np.float64)
    ks = curvatures(img, sigma)
    if roi is not None:
        ks = [np.where(roi, k, 0.0) for k in ks]
    lines = _line_indices(*img.shape)
    v = sum(_score_direction(k, ln) for k, ln in zip(ks, lines))
    return _connect(v)


def mc_extract(image: Presentation, sigma: float = 4.0, roi_margin: int = 6) -> VeinTemplate:
    """Binary vein map: connected curvature scores above their positive median."""
    roi = None
    if image.roi is not None:
        roi = ndimage.binary_erosion(image.roi, iterations=roi_margin) if roi_margin > 0 else image.roi
    g = mc_scores(image.pixels, sigma, roi)
    positive = g[g > 0]
    if positive.size == 0:
        return VeinTemplate(np.zeros(g.shape, np.uint8), image.source_id)
    thr = np.median(positive)
    return VeinTemplate((g >= thr).astype(np.uint8) * (g > 0), image.source_id)


# --------------------------------------------------------------------------
# Miura matching


def _box_sums(a: np.ndarray) -> np.ndarray:
    c = np.zeros((a.shape[0] + 1, a.shape[1] + 1), dtype=np.int64)
    c[1:, 1:] = np.cumsum(np.cumsum(a, axis=0), axis=1)
    return c


def _rect(c: np.ndarray, r0, r1, c0, c1):
    return c[r1, c1] - c[r0, c1] - c[r1, c0] + c[r0, c0]


def overlap_counts(probe: np.ndarray, model: np.ndarray, sh: int, sw: int) -> np.ndarray:
    """``C[dy+sh, dx+sw] = sum_y,x model[y, x] * probe[y+dy, x+dx]`` over the common region."""
    h, w = model.shape
    size = (h + sh, w + sw)
    fp = np.fft.rfft2(probe.astype(np.float64), size)
    fm = np.fft.rfft2(model.astype(np.float64), size)
    corr = np.fft.irfft2(fp * np.conj(fm), size)
    dys = np.arange(-sh, sh + 1) % size[0]
    dxs = np.arange(-sw, sw + 1) % size[1]
    return np.rint(corr[np.ix_(dys, dxs)]).astype(np.int64)


def miura_match(probe: VeinTemplate, model: VeinTemplate, shift_h: int = 12, shift_w: int = 12) -> MatchScore:
    """Best normalised vein overlap over translations within ``±(shift_h, shift_w)``.

    At offset (dy, dx) the probe pixel (y + dy, x + dx) is compared with the
    model pixel (y, x) on the region both frames cover. The score is the
    overlap divided by the number of vein pixels of both maps on that region,
    so it never exceeds 0.5.
    """
    p, m = probe.map, model.map
    if p.shape != m.shape:
        raise ParameterError(f"template sizes differ: {p.shape} vs {m.shape}")
    h, w = m.shape
    if shift_h < 0 or shift_w < 0 or shift_h > h // 2 or shift_w > w // 2:
        raise ParameterError("shift bounds must be non-negative and at most half the template size")
    if not p.any() and not m.any():
        raise UndefinedScoreError(f"both templates are empty ({probe.source_id!r}, {model.source_id!r})")
    overlap = overlap_counts(p, m, shift_h, shift_w)
    cm, cp = _box_sums(m), _box_sums(p)
    dy = np.arange(-shift_h, shift_h + 1)[:, None]
    dx = np.arange(-shift_w, shift_w + 1)[None, :]
    y0, y1 = np.maximum(0, -dy), np.minimum(h, h - dy)
    x0, x1 = np.maximum(0, -dx), np.minimum(w, w - dx)
    veins_m = _rect(cm, y0, y1, x0, x1)
    veins_p = _rect(cp, y0 + dy, y1 + dy, x0 + dx, x1 + dx)
    denom = veins_m + veins_p
    score = np.where(denom > 0, overlap / np.maximum(denom, 1), 0.0)
    best = np.unravel_index(int(np.argmax(score)), score.shape)
    return MatchScore(
        float(score[best]),
        probe.source_id,
        model.source_id,
        offset=(int(best[0] - shift_h), int(best[1] - shift_w)),
    )


def safe_match(probe: VeinTemplate, model: VeinTemplate, shift_h: int, shift_w: int) -> MatchScore:
    """:func:`miura_match` that scores undefined comparisons as 0 with a warning."""
    try:
        return miura_match(probe, model, shift_h, shift_w)
    except UndefinedScoreError as exc:
        warnings.warn(str(exc), RuntimeWarning, stacklevel=2)
        return MatchScore(0.0, probe.source_id, model.source_id, defined=False)


# --------------------------------------------------------------------------
# pipeline


@dataclass
class EnrolledModel:
    model_id: str
    templates: list[VeinTemplate] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)


def extract(raw: Presentation, enhancer=None, config: RecognizerConfig | None = None) -> VeinTemplate:
    """Optional enhancement, then preprocessing and Maximum Curvature."""
    cfg = config or RecognizerConfig()
    if enhancer is not None:
        from .resfpn import enhance

        raw = enhance(enhancer, raw)
    return mc_extract(preprocess(raw, cfg.output_size), cfg.sigma, cfg.roi_margin)


def enroll(
    model_id: str,
    presentations: Sequence[Presentation],
    enhancer=None,
    config: RecognizerConfig | None = None,
) -> EnrolledModel:
    """Build a model from one identity's enrollment presentations.

    Presentations that fail segmentation are skipped and listed in ``failures``.
    """
    if not presentations:
        raise ParameterError(f"no enrollment presentations for {model_id}")
    model = EnrolledModel(model_id)
    for p in presentations:
        try:
            model.templates.append(extract(p, enhancer, config))
        except SegmentationError as exc:
            warnings.warn(f"{p.source_id}: {exc}", RuntimeWarning, stacklevel=2)
            model.failures.append(p.source_id)
    return model


def score_probe(
    probe: VeinTemplate, model: EnrolledModel, config: RecognizerConfig | None = None
) -> MatchScore:
    """Probe-vs-model score: max (or mean) over the model's templates."""
    cfg = config or RecognizerConfig()
    if not model.templates:
        raise UndefinedScoreError(f"model {model.model_id} has no usable templates")
    scores = [safe_match(probe, t, *cfg.shift) for t in model.templates]
    if cfg.template_agg == "max":
        best = max(scores, key=lambda s: s.value)
        value = best.value
    else:
        best = scores[0]
        value = float(np.mean([s.value for s in scores]))
    return MatchScore(value, probe.source_id, model.model_id, offset=best.offset, defined=all(s.defined for s in scores))
