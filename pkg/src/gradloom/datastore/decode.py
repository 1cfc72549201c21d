"""Item codecs shared by the data server and workers.

Two on-disk formats: PNG (grayscale or RGB) and a raw little-endian tensor
container for non-image data. Both decode to float64 arrays laid out (h, w, d)
with values in [0, 1].
"""

from __future__ import annotations

import io
import struct

import numpy as np
from PIL import Image

MLB1_MAGIC = b"MLB1"
PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


class DecodeError(ValueError):
    def __init__(self, message: str, item: str | None = None):
        super().__init__(f"{item}: {message}" if item else message)
        self.item = item


def decode_item(data: bytes, item: str = "") -> np.ndarray:
    """Sniff the container by magic bytes and decode to (h, w, d) in [0, 1]."""
    if data[:8] == PNG_MAGIC:
        return decode_png(data, item)
    if data[:4] == MLB1_MAGIC:
        return decode_mlb1(data, item)
    raise DecodeError("not a PNG or raw-tensor file", item)


def decode_png(data: bytes, item: str = "") -> np.ndarray:
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as e:
        raise DecodeError(f"corrupt PNG ({e})", item) from None
    if img.mode in ("L", "1", "I", "I;16"):
        img = img.convert("L")
        depth = 1
    else:
        img = img.convert("RGB")
        depth = 3
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, np.newaxis]
    assert arr.shape[2] == depth
    return arr


def decode_mlb1(data: bytes, item: str = "") -> np.ndarray:
    """Raw tensor: magic, u32 w/h/d little-endian, then w*h*d float32 LE
    in (h, w, d) C order. Values are clamped into [0, 1]."""
    if data[:4] != MLB1_MAGIC:
        raise DecodeError("bad magic", item)
    if len(data) < 16:
        raise DecodeError("truncated header", item)
    w, h, d = struct.unpack_from("<III", data, 4)
    if w < 1 or h < 1 or d < 1:
        raise DecodeError(f"bad dimensions ({w}, {h}, {d})", item)
    expected = 16 + 4 * w * h * d
    if len(data) != expected:
        raise DecodeError(f"payload is {len(data)} bytes, expected {expected}", item)
    values = np.frombuffer(data, dtype="<f4", offset=16).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise DecodeError("non-finite values", item)
    return np.clip(values, 0.0, 1.0).reshape(h, w, d)


def encode_mlb1(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, np.newaxis]
    if arr.ndim != 3:
        raise ValueError(f"expected a 2- or 3-d array, got {arr.ndim} dims")
    h, w, d = arr.shape
    header = MLB1_MAGIC + struct.pack("<III", w, h, d)
    return header + arr.astype("<f4").tobytes()
