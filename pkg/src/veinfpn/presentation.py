"""Grayscale presentations shared by the network, trainer and recognizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError

WORKING_SIZE = (240, 320)  # (H, W)


@dataclass
class Presentation:
    """A single NIR image with values in [0, 1].

    ``roi`` is an optional boolean finger mask, filled in by preprocessing.
    """

    pixels: np.ndarray
    source_id: str = ""
    roi: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2 or px.size == 0:
            raise ParameterError(f"presentation must be a nonempty H x W array, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ParameterError("presentation contains non-finite values")
        self.pixels = np.clip(px, 0.0, 1.0)
        if self.roi is not None:
            self.roi = np.asarray(self.roi, dtype=bool)
            if self.roi.shape != self.pixels.shape:
                raise ParameterError("roi mask must match the image size")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape  # type: ignore[return-value]
