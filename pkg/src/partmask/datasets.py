"""Synthetic corpora and the flat binary container they ship in.

Container layout (24-byte header, version 1 payloads are always float64
little-endian): magic "STEN", then u32 version, count, channels, height,
width, followed by count row-major images. Ground-truth part labels travel
in a sidecar file of the same format with channels=1.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .numerics import Rng

MAGIC = b"STEN"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")

PART_COLORS = np.array([
    [0.85, 0.15, 0.10],
    [0.10, 0.20, 0.85],
    [0.15, 0.75, 0.20],
    [0.95, 0.75, 0.10],
    [0.75, 0.15, 0.75],
    [0.10, 0.75, 0.75],
    [0.95, 0.45, 0.10],
    [0.55, 0.35, 0.15],
])

DATASET_KINDS = ("two-blobs", "k-parts", "checker")


def write_array(path, array):
    """Write an (n, c, h, w) float array as a container file."""
    arr = np.ascontiguousarray(array, dtype="<f8")
    if arr.ndim != 4:
        raise DataError(f"expected (n, c, h, w), got shape {arr.shape}")
    n, c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, c, h, w))
        fh.write(arr.tobytes())


def read_array(path) -> np.ndarray:
    try:
        blob = open(path, "rb").read()
    except OSError as exc:
        raise DataError(f"cannot read dataset: {exc}") from None
    if len(blob) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, n, c, h, w = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + n * c * h * w * 8
    if len(blob) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(blob)}")
    return np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).reshape(n, c, h, w).astype(np.float64)


def labels_path(dataset_path) -> Path:
    return Path(dataset_path).with_suffix(".labels.sten")


def load_dataset(path):
    """Images plus ground-truth labels when the sidecar exists."""
    images = read_array(path)
    sidecar = labels_path(path)
    labels = None
    if sidecar.exists():
        raw = read_array(sidecar)
        if raw.shape[0] != images.shape[0] or raw.shape[1] != 1:
            raise DataError(f"{sidecar}: label sidecar does not match the dataset")
        labels = raw[:, 0].astype(np.int64)
    return images, labels


# ---------------------------------------------------------------------------
# generators; every image draws from its own split stream so the corpus is
# reproducible regardless of generation order


def _textured_background(r: Rng, height, width):
    base = r.uniform(0.25, 0.45)
    return base + r.uniform(-0.05, 0.05, (3, height, width))


def gen_two_blobs(count, height, width, rng: Rng):
    """Two well-separated soft color blobs on a textured background.

    Label 1 is the warm blob on the left, label 2 the cool blob on the
    right; every image carries all three labels.
    """
    images = np.zeros((count, 3, height, width))
    labels = np.zeros((count, height, width))
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    placements = ((0.17, 0.33, PART_COLORS[0]), (0.67, 0.83, PART_COLORS[1]))
    for i in range(count):
        r = rng.split(i)
        img = _textured_background(r, height, width)
        lab = np.zeros((height, width))
        for blob_id, (x_lo, x_hi, palette) in enumerate(placements, start=1):
            cx = width * r.uniform(x_lo, x_hi)
            cy = height * r.uniform(0.22, 0.78)
            radius = r.uniform(5.0, 7.0)
            color = palette + r.uniform(-0.05, 0.05, 3)
            d2 = (xx - cx) ** 2 + (yy - cy) ** 2
            a = np.exp(-d2 / (2.0 * (radius / 1.6) ** 2))
            img = img * (1.0 - a) + color[:, None, None] * a
            lab[a > 0.5] = blob_id
        images[i] = np.clip(img, 0.0, 1.0)
        labels[i] = lab
    return images, labels


def gen_k_parts(count, height, width, k, rng: Rng):
    """k disjoint colored rectangles, one per grid cell, with jitter.

    Each part keeps a fixed color and home cell across the corpus so that
    inter-part structure is learnable; labels are 1..k over background 0.
    """
    if not 1 <= k <= len(PART_COLORS):
        raise ConfigError(f"k must lie in [1, {len(PART_COLORS)}], got {k}")
    cells = int(np.ceil(np.sqrt(k)))
    cell_h, cell_w = height / cells, width / cells
    images = np.zeros((count, 3, height, width))
    labels = np.zeros((count, height, width))
    for i in range(count):
        r = rng.split(i)
        img = _textured_background(r, height, width)
        lab = np.zeros((height, width))
        for part in range(k):
            row, col = divmod(part, cells)
            hh = max(2, int(cell_h * r.uniform(0.4, 0.62)))
            ww = max(2, int(cell_w * r.uniform(0.4, 0.62)))
            top = int(row * cell_h + (cell_h - hh) * r.uniform(0.15, 0.85))
            left = int(col * cell_w + (cell_w - ww) * r.uniform(0.15, 0.85))
            top = min(max(top, 0), height - hh)
            left = min(max(left, 0), width - ww)
            color = PART_COLORS[part] + r.uniform(-0.03, 0.03, 3)
            img[:, top:top + hh, left:left + ww] = color[:, None, None]
            lab[top:top + hh, left:left + ww] = part + 1
        images[i] = np.clip(img, 0.0, 1.0)
        labels[i] = lab
    return images, labels


def gen_checker(count, height, width, rng: Rng):
    """Two-color checkerboards with random cell size and phase; labels are parity."""
    images = np.zeros((count, 3, height, width))
    labels = np.zeros((count, height, width))
    yy, xx = np.mgrid[0:height, 0:width]
    for i in range(count):
        r = rng.split(i)
        cell = int(r.sample(np.array([4, 8]), 1)[0])
        px, py = int(r.integers(0, cell)), int(r.integers(0, cell))
        parity = (((yy + py) // cell + (xx + px) // cell) % 2).astype(np.float64)
        c0 = r.uniform(0.05, 0.45, 3)
        c1 = r.uniform(0.55, 0.95, 3)
        images[i] = c0[:, None, None] * (1.0 - parity) + c1[:, None, None] * parity
        labels[i] = parity
    return images, labels


def gen_dataset(kind, count, height, width, seed, out_path, k=4):
    """Generate a corpus and write it plus its label sidecar; returns both paths."""
    rng = Rng(seed)
    if kind == "two-blobs":
        images, labels = gen_two_blobs(count, height, width, rng)
    elif kind == "k-parts":
        images, labels = gen_k_parts(count, height, width, k, rng)
    elif kind == "checker":
        images, labels = gen_checker(count, height, width, rng)
    else:
        raise ConfigError(f"unknown dataset kind '{kind}', pick one of {DATASET_KINDS}")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_array(out_path, images)
    write_array(labels_path(out_path), labels[:, None])
    return out_path, labels_path(out_path)


def majority_patch_labels(label_img, patch_size) -> np.ndarray:
    """Reduce a pixel label map to the patch grid by majority vote (ties to lower label)."""
    h, w = label_img.shape
    gh, gw = h // patch_size, w // patch_size
    blocks = label_img[:gh * patch_size, :gw * patch_size]
    blocks = blocks.reshape(gh, patch_size, gw, patch_size).swapaxes(1, 2)
    out = np.empty((gh, gw), dtype=np.int64)
    for a in range(gh):
        for b in range(gw):
            out[a, b] = np.bincount(blocks[a, b].astype(np.int64).ravel()).argmax()
    return out
