"""Corpus builders for the benchmark harness.

Three sources, cheapest first: random class-blob vectors for throughput
runs, rendered digit images when no real digit corpus is on disk, and a
converter from the classic IDX distribution files.
"""

from __future__ import annotations

import gzip
import io
import struct
import zipfile
from pathlib import Path

import numpy as np

from gradloom.datastore.decode import encode_mlb1

# fixed timestamp so repeated builds produce byte-identical zips
_EPOCH = (1980, 1, 1, 0, 0, 0)

DIGIT_LABELS = [str(d) for d in range(10)]


def synth_vectors(
    count: int,
    labels: list[str] = ("a", "b", "c"),
    shape: tuple[int, int, int] = (12, 12, 1),
    seed: int = 0,
) -> list[tuple[str, str, bytes]]:
    """Gaussian class blobs in [0,1], round-robin over labels.

    Returns (label, filename, mlb1 bytes) triples in a deterministic order.
    """
    rng = np.random.default_rng(seed)
    w, h, d = shape
    centers = {lb: rng.random((h, w, d)) for lb in labels}
    items = []
    for i in range(count):
        label = labels[i % len(labels)]
        arr = np.clip(centers[label] + rng.normal(0.0, 0.15, (h, w, d)), 0.0, 1.0)
        items.append((label, f"{i:05d}.mlb1", encode_mlb1(arr)))
    return items


def build_zip(items: list[tuple[str, str, bytes]]) -> bytes:
    """Pack (label, filename, data) triples into the ingest layout."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for label, name, data in items:
            zf.writestr(zipfile.ZipInfo(f"{label}/{name}", date_time=_EPOCH), data)
    return buf.getvalue()


def zip_labeled_dir(root: str | Path) -> bytes:
    """Zip a subdir-per-label tree into the ingest layout."""
    root = Path(root)
    items = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        for f in sorted(p for p in sub.rglob("*") if p.is_file()):
            items.append((sub.name, f.name, f.read_bytes()))
    if not items:
        raise ValueError(f"{root} holds no labeled files")
    return build_zip(items)


# -- rendered digits --------------------------------------------------------------


def _digit_font(points: int):
    from PIL import ImageFont
    import matplotlib

    path = Path(matplotlib.get_data_path()) / "fonts" / "ttf" / "DejaVuSans-Bold.ttf"
    return ImageFont.truetype(str(path), points)


def render_digit(digit: int, rng: np.random.Generator, side: int = 28) -> bytes:
    """One white-on-black digit PNG with pose and brightness jitter."""
    from PIL import Image, ImageDraw

    points = int(rng.integers(16, 23))
    font = _digit_font(points)
    # draw on a double-size canvas so rotation never clips the glyph
    canvas = Image.new("L", (side * 2, side * 2), 0)
    draw = ImageDraw.Draw(canvas)
    text = str(digit)
    x0, y0, x1, y1 = draw.textbbox((0, 0), text, font=font)
    cx = side - (x1 - x0) / 2 - x0 + float(rng.uniform(-2.5, 2.5))
    cy = side - (y1 - y0) / 2 - y0 + float(rng.uniform(-2.5, 2.5))
    draw.text((cx, cy), text, fill=int(rng.integers(190, 256)), font=font)
    canvas = canvas.rotate(float(rng.uniform(-12, 12)), resample=Image.BILINEAR)
    img = canvas.crop((side // 2, side // 2, side // 2 + side, side // 2 + side))

    arr = np.asarray(img, dtype=np.float64)
    arr = np.clip(arr + rng.normal(0.0, 6.0, arr.shape), 0, 255).astype(np.uint8)
    out = io.BytesIO()
    Image.fromarray(arr, mode="L").save(out, format="PNG")
    return out.getvalue()


def write_digit_corpus(out_dir: str | Path, count: int, seed: int = 0) -> Path:
    """Write `count` rendered digits as a subdir-per-label PNG tree."""
    rng = np.random.default_rng(seed)
    root = Path(out_dir)
    for lb in DIGIT_LABELS:
        (root / lb).mkdir(parents=True, exist_ok=True)
    for i in range(count):
        digit = i % 10
        path = root / str(digit) / f"{i:06d}.png"
        path.write_bytes(render_digit(digit, rng))
    return root


# -- IDX conversion ---------------------------------------------------------------


def _idx_open(path: str | Path):
    p = Path(path)
    return gzip.open(p, "rb") if p.suffix == ".gz" else open(p, "rb")


def convert_idx(
    images_path: str | Path,
    labels_path: str | Path,
    out_dir: str | Path,
    limit: int | None = None,
) -> int:
    """IDX image+label pair -> subdir-per-label MLB1 tree. Returns item count."""
    with _idx_open(labels_path) as f:
        magic, n_labels = struct.unpack(">II", f.read(8))
        if magic != 0x00000801:
            raise ValueError(f"{labels_path}: not an IDX label file (magic {magic:#x})")
        labels = f.read(n_labels)
    with _idx_open(images_path) as f:
        magic, n_images, rows, cols = struct.unpack(">IIII", f.read(16))
        if magic != 0x00000803:
            raise ValueError(f"{images_path}: not an IDX image file (magic {magic:#x})")
        if n_images != n_labels:
            raise ValueError(f"image/label count mismatch: {n_images} vs {n_labels}")
        count = n_images if limit is None else min(limit, n_images)
        root = Path(out_dir)
        for i in range(count):
            pixels = np.frombuffer(f.read(rows * cols), dtype=np.uint8)
            arr = (pixels / 255.0).reshape(rows, cols, 1)
            label = str(labels[i])
            sub = root / label
            sub.mkdir(parents=True, exist_ok=True)
            (sub / f"{i:06d}.mlb1").write_bytes(encode_mlb1(arr))
    return count
