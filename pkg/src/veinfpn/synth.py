"""Procedural finger-vein presentations with ground-truth vein masks.

Each identity owns a fixed set of smooth vein curves in finger coordinates
(u along the finger axis, v across it, both in pixels from the finger centre).
Each session re-renders those curves under a small affine jitter with its own
contrast, illumination gradient, skin texture and sensor noise.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ParameterError
from .imaging import save_gray


def _range(value, name: str) -> tuple[float, float]:
    if isinstance(value, (int, float)):
        value = (value, value)
    lo, hi = float(value[0]), float(value[1])
    if hi < lo:
        raise ParameterError(f"{name}: range ({lo}, {hi}) is reversed")
    return lo, hi


@dataclass
class SynthSpec:
    size: tuple[int, int] = (240, 320)
    veins: tuple[int, int] = (5, 8)
    width: tuple[float, float] = (3.0, 7.0)
    contrast: tuple[float, float] = (0.10, 0.20)
    texture: float = 0.03
    noise: float = 0.01
    illumination: float = 0.10
    brightness: tuple[float, float] = (0.55, 0.75)
    finger_half: tuple[float, float] = (62.0, 74.0)
    jitter_shift: float = 4.0
    jitter_angle: float = 2.0
    jitter_scale: float = 0.02
    seed: int = 0

    def __post_init__(self) -> None:
        self.size = (int(self.size[0]), int(self.size[1]))
        self.veins = tuple(int(v) for v in _range(self.veins, "veins"))
        for name in ("width", "contrast", "brightness", "finger_half"):
            setattr(self, name, _range(getattr(self, name), name))
        if self.width[0] < 1.0:
            raise ParameterError("vein widths must be at least 1 px")
        if self.veins[0] < 1:
            raise ParameterError("need at least one vein per identity")
        if min(self.size) < 32:
            raise ParameterError(f"image size {self.size} too small")
        if self.noise < 0 or self.texture < 0 or self.illumination < 0:
            raise ParameterError("noise, texture and illumination must be non-negative")

    @classmethod
    def low_contrast(cls, seed: int = 0, **overrides) -> "SynthSpec":
        """Faint veins under strong texture and uneven illumination."""
        base = dict(contrast=(0.03, 0.07), texture=0.05, noise=0.02, illumination=0.20)
        base.update(overrides)
        return cls(seed=seed, **base)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**d)


@dataclass
class Vein:
    points: np.ndarray  # (n, 2) finger coordinates (u, v), ~0.5 px spacing
    width: float
    contrast: float


@dataclass
class Identity:
    index: int
    half: float
    veins: list[Vein]


@dataclass
class Affine:
    angle_deg: float = 0.0
    shift: tuple[float, float] = (0.0, 0.0)  # (rows, cols)
    scale: float = 1.0

    def to_image(self, u: np.ndarray, v: np.ndarray, size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        """Finger (u, v) to image (row, col)."""
        t = math.radians(self.angle_deg)
        c, s = math.cos(t), math.sin(t)
        x = self.scale * (c * u - s * v)
        y = self.scale * (s * u + c * v)
        return y + (size[0] - 1) / 2 + self.shift[0], x + (size[1] - 1) / 2 + self.shift[1]

    def to_finger(self, row: np.ndarray, col: np.ndarray, size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        t = math.radians(self.angle_deg)
        c, s = math.cos(t), math.sin(t)
        y = (row - (size[0] - 1) / 2 - self.shift[0]) / self.scale
        x = (col - (size[1] - 1) / 2 - self.shift[1]) / self.scale
        return c * x + s * y, -s * x + c * y


def _curve(rng: np.random.Generator, half: float, length: float) -> np.ndarray:
    """A smooth vein path, mostly along the finger with an occasional oblique run."""
    oblique = rng.random() < 0.35
    n = int(length * 2)
    t = np.linspace(0.0, 1.0, n)
    if oblique:
        angle = math.radians(rng.uniform(20, 60)) * rng.choice([-1, 1])
        span = rng.uniform(0.5, 1.2) * half / math.sin(abs(angle))
        u0 = rng.uniform(-0.75, 0.75) * length / 2
        v0 = rng.uniform(-0.6, 0.6) * half
        u = u0 + (t - 0.5) * span * math.cos(angle)
        v = v0 + (t - 0.5) * span * math.sin(angle)
    else:
        span = rng.uniform(0.45, 0.95) * length
        u0 = rng.uniform(-(length - span) / 2, (length - span) / 2)
        u = u0 + (t - 0.5) * span
        v = rng.uniform(-0.65, 0.65) * half + rng.uniform(-0.15, 0.15) * (u - u0)
    for _ in range(2):
        period = rng.uniform(60, 220)
        v = v + rng.uniform(3, 12) * np.sin(2 * math.pi * u / period + rng.uniform(0, 2 * math.pi))
    keep = np.abs(v) < 0.85 * half
    return np.stack([u[keep], v[keep]], axis=1)


def make_identity(spec: SynthSpec, index: int) -> Identity:
    rng = np.random.default_rng([spec.seed, index])
    half = rng.uniform(*spec.finger_half)
    length = 0.86 * spec.size[1]
    veins = []
    for _ in range(int(rng.integers(spec.veins[0], spec.veins[1] + 1))):
        pts = _curve(rng, half, length)
        while len(pts) < 40:
            pts = _curve(rng, half, length)
        veins.append(Vein(pts, float(rng.uniform(*spec.width)), float(rng.uniform(*spec.contrast))))
    return Identity(index, half, veins)


def session_affine(spec: SynthSpec, index: int, session: int) -> Affine:
    rng = np.random.default_rng([spec.seed, index, session])
    return Affine(
        float(rng.uniform(-spec.jitter_angle, spec.jitter_angle)),
        (float(rng.uniform(-spec.jitter_shift, spec.jitter_shift)), float(rng.uniform(-spec.jitter_shift, spec.jitter_shift))),
        float(1.0 + rng.uniform(-spec.jitter_scale, spec.jitter_scale)),
    )


def _distance_to(points_rc: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    line = np.ones(size, dtype=bool)
    r = np.rint(points_rc[:, 0]).astype(int)
    c = np.rint(points_rc[:, 1]).astype(int)
    ok = (r >= 0) & (r < size[0]) & (c >= 0) & (c < size[1])
    if not ok.any():
        return np.full(size, np.inf)
    line[r[ok], c[ok]] = False
    return ndimage.distance_transform_edt(line)


def render(spec: SynthSpec, ident: Identity, session: int, affine: Affine | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One presentation and its vein mask (1 = vein)."""
    h, w = spec.size
    aff = affine if affine is not None else session_affine(spec, ident.index, session)
    rng = np.random.default_rng([spec.seed, ident.index, session, 1])
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    u, v = aff.to_finger(rows, cols, spec.size)

    # finger body: rounded band, brighter along the axis
    half_len = 0.47 * w
    tip = np.maximum(np.abs(u) - (half_len - ident.half), 0.0)
    radial = np.sqrt((v / ident.half) ** 2 + (tip / ident.half) ** 2)
    inside = radial < 1.0
    body = np.clip(1.0 - 0.35 * radial**2, 0.0, 1.0)
    edge = 1.0 / (1.0 + np.exp((radial - 1.0) * 40.0))
    bright = rng.uniform(*spec.brightness)
    ramp = spec.illumination * (rng.uniform(-1, 1) * (cols / w - 0.5) * 2 + rng.uniform(-0.5, 0.5) * (rows / h - 0.5) * 2)
    tex = ndimage.gaussian_filter(rng.standard_normal((h, w)), 10.0, mode="reflect")
    tex *= spec.texture / max(float(tex.std()), 1e-12)
    img = (bright * body + ramp + tex) * edge

    mask = np.zeros((h, w), dtype=np.uint8)
    session_gain = rng.uniform(0.8, 1.2)
    for vein in ident.veins:
        pr, pc = aff.to_image(vein.points[:, 0], vein.points[:, 1], spec.size)
        d = _distance_to(np.stack([pr, pc], axis=1), spec.size)
        width = vein.width * aff.scale
        sigma = width / 2.5
        img = img * (1.0 - min(vein.contrast * session_gain, 0.9) * np.exp(-(d**2) / (2 * sigma**2)) * inside)
        mask |= ((d <= width / 2) & inside).astype(np.uint8)
    img = img + spec.noise * rng.standard_normal((h, w))
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask


@dataclass
class SynthRecord:
    client: str
    finger: str
    session: int
    file: str
    mask: str


def client_name(index: int) -> str:
    return f"c{index + 1:03d}"


def synth_generate(spec: SynthSpec, n_identities: int, n_sessions: int, out_dir) -> list[SynthRecord]:
    """Write PNG presentations, masks and ``manifest.csv`` to ``out_dir``."""
    if n_identities < 1 or n_sessions < 1:
        raise ParameterError("need at least one identity and one session")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n_identities):
        ident = make_identity(spec, i)
        for s in range(1, n_sessions + 1):
            img, mask = render(spec, ident, s)
            stem = f"{client_name(i)}_f0_s{s}"
            save_gray(out / f"{stem}.png", img)
            save_gray(out / f"{stem}.mask.png", mask * np.uint8(255))
            records.append(SynthRecord(client_name(i), "f0", s, f"{stem}.png", f"{stem}.mask.png"))
    write_manifest(out / "manifest.csv", records)
    return records


MANIFEST_HEADER = ["client", "finger", "session", "file", "mask"]


def write_manifest(path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(MANIFEST_HEADER)
        for r in records:
            wr.writerow([r.client, r.finger, r.session, r.file, r.mask])
