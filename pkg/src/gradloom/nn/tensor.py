"""Dense float64 tensors with (width, height, depth) shape and flat storage.

Storage order is row-major over (y, x, d): index = (y * width + x) * depth + d.
A numpy array of shape (height, width, depth) in C order has exactly this
layout, so `as_hwd` / `from_hwd` are free reshapes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Tensor or layer geometry violation."""


@dataclass
class Tensor:
    shape: tuple[int, int, int]  # (width, height, depth)
    data: np.ndarray  # flat float64, length w*h*d

    def __post_init__(self):
        w, h, d = self.shape
        if w <= 0 or h <= 0 or d <= 0:
            raise ShapeError(f"tensor dims must be positive, got {self.shape}")
        self.data = np.asarray(self.data, dtype=np.float64).reshape(-1)
        if self.data.size != w * h * d:
            raise ShapeError(
                f"data length {self.data.size} != {w}*{h}*{d} = {w * h * d}"
            )
        if not np.all(np.isfinite(self.data)):
            raise ShapeError("tensor entries must be finite")

    @property
    def width(self) -> int:
        return self.shape[0]

    @property
    def height(self) -> int:
        return self.shape[1]

    @property
    def depth(self) -> int:
        return self.shape[2]

    def as_hwd(self) -> np.ndarray:
        """View as (height, width, depth)."""
        w, h, d = self.shape
        return self.data.reshape(h, w, d)

    @staticmethod
    def from_hwd(arr: np.ndarray) -> "Tensor":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ShapeError(f"expected 2-d or 3-d array, got ndim={arr.ndim}")
        h, w, d = arr.shape
        return Tensor(shape=(w, h, d), data=np.ascontiguousarray(arr).reshape(-1))
