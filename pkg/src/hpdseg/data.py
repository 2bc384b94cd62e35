"""Synthetic segmentation data, the ``.hpdt`` tensor container, and overlay PNGs.

Container layout (little endian, no padding)::

    b"HPDT" | version u8 | dtype u8 (1=f32, 2=f64) | rank u8 (=4)
    | 4 x u32 extents | row-major payload | u64 FNV-1a of the payload

Dataset directory layout::

    manifest.txt            one sample id per line (train-NNNNN / val-NNNNN)
    dataset.txt             generation parameters as key = value
    samples/{id}.img.hpdt   image, (1, 1, h, w) float32 in [0, 1]
    samples/{id}.lbl.hpdt   labels, (1, 1, h, w) float32 holding integer classes
"""

from __future__ import annotations

import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import format_kv, read_kv
from .errors import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    DataError,
    DtypeCodeError,
    LengthError,
    RankError,
    ShapeError,
    VersionError,
)
from .tensor import Rng, as_tensor4, fnv1a64

log = logging.getLogger(__name__)

MAGIC = b"HPDT"
VERSION = 1
_HEADER = struct.Struct("<4sBBB4I")
_TRAILER = struct.Struct("<Q")
_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_DTYPES = {code: dt for dt, code in _CODES.items()}

# mean intensity per class: background, ellipse, ring, first small blob
CLASS_INTENSITY = (0.15, 0.75, 0.45, 0.95)
NOISE_SIGMA = 0.05


# -- tensor container --------------------------------------------------------


def encode_tensor(t: np.ndarray) -> bytes:
    as_tensor4(t, "tensor")
    dt = t.dtype.newbyteorder("<")
    payload = np.ascontiguousarray(t, dtype=dt).tobytes()
    header = _HEADER.pack(MAGIC, VERSION, _CODES[dt], 4, *t.shape)
    return header + payload + _TRAILER.pack(fnv1a64(payload))


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise LengthError(f"file has {len(blob)} bytes, header needs {_HEADER.size}")
    magic, version, code, rank, *extents = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise DtypeCodeError(f"unknown dtype code {code}")
    if rank != 4:
        raise RankError(f"rank {rank} != 4")
    dt = _DTYPES[code]
    nbytes = math.prod(extents) * dt.itemsize
    expected = _HEADER.size + nbytes + _TRAILER.size
    if len(blob) != expected:
        raise LengthError(f"file has {len(blob)} bytes, header implies {expected}")
    payload = blob[_HEADER.size : _HEADER.size + nbytes]
    (stored,) = _TRAILER.unpack_from(blob, _HEADER.size + nbytes)
    if fnv1a64(payload) != stored:
        raise ChecksumError("payload checksum mismatch")
    return np.frombuffer(payload, dtype=dt).reshape(extents).astype(dt.newbyteorder("="))


def save_tensor(path, t: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(t))


def load_tensor(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    try:
        return decode_tensor(blob)
    except DataError as exc:
        raise type(exc)(f"{path}: {exc}") from exc


# -- synthetic data ----------------------------------------------------------


@dataclass
class SegSample:
    image: np.ndarray  # (1, 1, h, w) float32
    labels: np.ndarray  # (h, w) int64
    sample_id: str

    def __post_init__(self):
        if self.image.shape[2:] != self.labels.shape:
            raise ShapeError(f"image {self.image.shape} and labels {self.labels.shape} disagree")


def _intensity(cls: int) -> float:
    if cls < len(CLASS_INTENSITY):
        return CLASS_INTENSITY[cls]
    return 0.3 + 0.1 * ((cls - len(CLASS_INTENSITY)) % 4)


def _place_blob(labels: np.ndarray, rng: Rng, cls: int) -> None:
    size = labels.shape[0]
    diameter = rng.integers(3, 6)
    r = diameter / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    for attempt in range(204):
        if attempt < 100:
            cy = rng.uniform((1,), 3.0, size - 4.0)[0]
            cx = rng.uniform((1,), 3.0, size - 4.0)[0]
        else:
            # corners stay clear of the centred ellipse
            corner = attempt % 4
            cy = 3.5 if corner < 2 else size - 4.5
            cx = 3.5 if corner % 2 == 0 else size - 4.5
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        disc = d2 <= r * r
        # the last four corner tries only ask for a free disc, for crowded small images
        halo = d2 <= (r + 2.0) ** 2 if attempt < 200 else disc
        if disc.any() and not labels[halo].any():
            labels[disc] = cls
            return
    raise ConfigError(f"could not place a {diameter}px blob in a {size}px image")


def make_sample(seed: int, index: int, size: int = 64, classes: int = 4, prefix: str = "s") -> SegSample:
    """One image: ellipse (1), ring around it (2), small blobs (3, ...) on background (0)."""
    rng = Rng(seed).child(f"sample/{index}")
    cy, cx = rng.uniform((2,), 0.36 * size, 0.64 * size)
    a, b = rng.uniform((2,), 0.12 * size, 0.25 * size)
    theta = rng.uniform((1,), 0.0, math.pi)[0]
    thick = rng.uniform((1,), 0.03 * size, 0.06 * size)[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = (xx - cx) * math.cos(theta) + (yy - cy) * math.sin(theta)
    v = -(xx - cx) * math.sin(theta) + (yy - cy) * math.cos(theta)
    labels = np.zeros((size, size), dtype=np.int64)
    if classes >= 3:
        labels[(u / (a + thick)) ** 2 + (v / (b + thick)) ** 2 <= 1.0] = 2
    labels[(u / a) ** 2 + (v / b) ** 2 <= 1.0] = 1
    for cls in range(3, classes):
        _place_blob(labels, rng, cls)
    means = np.array([_intensity(c) for c in range(classes)])
    image = means[labels] + rng.normal((size, size), 0.0, NOISE_SIGMA)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)[None, None]
    return SegSample(image, labels, f"{prefix}-{index:05d}")


def gen_synthetic(seed: int, n_samples: int, size: int = 64, classes: int = 4, prefix: str = "s",
                  offset: int = 0, workers: int = 1) -> list[SegSample]:
    """Generate ``n_samples`` samples; each is a pure function of (seed, index)."""
    if int(size) != size or size < 32:
        raise ConfigError(f"image size must be an integer >= 32, got {size}")
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    if n_samples < 0:
        raise ConfigError(f"sample count must be >= 0, got {n_samples}")
    indices = range(offset, offset + n_samples)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda i: make_sample(seed, i, size, classes, prefix), indices))
    return [make_sample(seed, i, size, classes, prefix) for i in indices]


def make_splits(seed: int, n_train: int = 300, n_val: int = 50, size: int = 64, classes: int = 4,
                workers: int = 1) -> dict[str, list[SegSample]]:
    """Train and val sets drawn from disjoint sample indices of one seed."""
    return {
        "train": gen_synthetic(seed, n_train, size, classes, "train", 0, workers),
        "val": gen_synthetic(seed, n_val, size, classes, "val", n_train, workers),
    }


def stack(samples: list[SegSample]) -> tuple[np.ndarray, np.ndarray]:
    if not samples:
        raise DataError("empty sample list")
    return (np.concatenate([s.image for s in samples]), np.stack([s.labels for s in samples]))


def save_dataset(root, splits: dict[str, list[SegSample]], meta: dict | None = None) -> Path:
    root = Path(root)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    ids = []
    for samples in splits.values():
        for s in samples:
            save_tensor(root / "samples" / f"{s.sample_id}.img.hpdt", s.image)
            save_tensor(root / "samples" / f"{s.sample_id}.lbl.hpdt", s.labels.astype(np.float32)[None, None])
            ids.append(s.sample_id)
    (root / "manifest.txt").write_text("\n".join(ids) + "\n", encoding="utf-8")
    if meta is not None:
        (root / "dataset.txt").write_text(format_kv(meta), encoding="utf-8")
    return root


def load_dataset(root) -> dict[str, list[SegSample]]:
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise DataError(f"{manifest} not found")
    splits: dict[str, list[SegSample]] = {}
    for sid in manifest.read_text(encoding="utf-8").split():
        image = load_tensor(root / "samples" / f"{sid}.img.hpdt").astype(np.float32)
        raw = load_tensor(root / "samples" / f"{sid}.lbl.hpdt")[0, 0]
        labels = raw.astype(np.int64)
        if (labels != raw).any() or (labels < 0).any():
            raise DataError(f"{sid}: label map is not a non-negative integer map")
        split = sid.split("-", 1)[0]
        splits.setdefault(split, []).append(SegSample(image, labels, sid))
    return splits


def dataset_meta(root) -> dict[str, str]:
    path = Path(root) / "dataset.txt"
    return read_kv(path) if path.exists() else {}


# -- overlays ----------------------------------------------------------------

GT_COLOR = (255, 255, 255)
PRED_COLORS = ((230, 25, 75), (60, 180, 75), (0, 130, 200), (245, 130, 48), (145, 30, 180), (70, 240, 240))


def contour_mask(labels: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour of a different class."""
    edge = np.zeros(labels.shape, dtype=bool)
    edge[1:, :] |= labels[1:, :] != labels[:-1, :]
    edge[:-1, :] |= labels[:-1, :] != labels[1:, :]
    edge[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    edge[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    return edge & (labels > 0)


def overlay_rgb(image: np.ndarray, pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Grayscale image with gt contours in white and prediction contours in class colours on top."""
    img = np.asarray(image, dtype=np.float64).reshape(pred.shape)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} disagree")
    gray = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    rgb[contour_mask(gt)] = GT_COLOR
    edge = contour_mask(pred)
    for cls in np.unique(pred[edge]):
        rgb[edge & (pred == cls)] = PRED_COLORS[(int(cls) - 1) % len(PRED_COLORS)]
    return rgb


def emit_overlay(image: np.ndarray, pred: np.ndarray, gt: np.ndarray, path) -> Path:
    from PIL import Image

    path = Path(path)
    rgb = overlay_rgb(image, np.asarray(pred), np.asarray(gt))
    try:
        Image.fromarray(rgb).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write overlay {path}: {exc}") from exc
    return path
