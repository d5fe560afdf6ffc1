"""Image resampling and 8-bit grayscale file IO."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, ParameterError


def _axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres; identity when n_in == n_out
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = (pos - lo).astype(np.float64)
    return lo, hi, frac


def resize_bilinear(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Separable bilinear resampling of an H x W array to ``size`` = (H', W')."""
    img = np.asarray(img)
    if img.ndim != 2 or img.size == 0:
        raise ParameterError(f"cannot resize array of shape {img.shape}")
    h_out, w_out = int(size[0]), int(size[1])
    if h_out < 1 or w_out < 1:
        raise ParameterError(f"invalid target size {size}")
    if img.shape == (h_out, w_out):
        return img.astype(np.float32, copy=True)
    src = img.astype(np.float64)
    lo, hi, f = _axis_weights(src.shape[0], h_out)
    rows = src[lo] * (1.0 - f)[:, None] + src[hi] * f[:, None]
    lo, hi, f = _axis_weights(src.shape[1], w_out)
    out = rows[:, lo] * (1.0 - f)[None, :] + rows[:, hi] * f[None, :]
    return out.astype(np.float32)


def resize_nearest(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2 or img.size == 0:
        raise ParameterError(f"cannot resize array of shape {img.shape}")
    h_out, w_out = int(size[0]), int(size[1])
    r = np.minimum(((np.arange(h_out) + 0.5) * img.shape[0] / h_out).astype(int), img.shape[0] - 1)
    c = np.minimum(((np.arange(w_out) + 0.5) * img.shape[1] / w_out).astype(int), img.shape[1] - 1)
    return img[r][:, c].copy()


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def load_gray(path: str | Path) -> np.ndarray:
    """Read an 8-bit grayscale PNG/PGM into float32 [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "I;16", "I", "P", "RGB", "RGBA", "LA"):
                raise FormatError(f"{path}: unsupported image mode {im.mode}")
            arr = np.asarray(im.convert("L"), dtype=np.float32)
    except FormatError:
        raise
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: cannot decode image ({exc})") from exc
    return arr / 255.0


def save_gray(path: str | Path, img: np.ndarray) -> None:
    """Write float [0, 1] (or uint8) data as an 8-bit grayscale PNG."""
    arr = img if np.asarray(img).dtype == np.uint8 else to_uint8(img)
    Image.fromarray(np.asarray(arr), mode="L").save(Path(path), format="PNG", optimize=False)
