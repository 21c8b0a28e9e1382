"""Deterministic synthetic shapes: rendering, augmentation and on-disk format.

Images are stored as binary PPM (P6) and labels as one JSON-lines file per
split. Pixel ``i`` covers the continuous interval ``[i, i+1)``, so a box
``(8, 8, 24, 24)`` covers pixels 8..23.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .decoder import iou_matrix
from .encoder import GtBox

logger = logging.getLogger(__name__)

CLASS_NAMES = ("rectangle", "circle", "triangle")
# base fill colour per class family; per-object jitter stays within the family
CLASS_COLORS = np.array(
    [
        [0.85, 0.20, 0.20],
        [0.20, 0.80, 0.25],
        [0.25, 0.30, 0.90],
    ]
)
BACKGROUND = 0.45
MAX_PLACEMENT_TRIES = 100


class DatasetFormatError(ValueError):
    """Malformed dataset file; the message names the file and position."""


@dataclass(frozen=True)
class DatasetConfig:
    seed: int = 0
    num_images: int = 500
    num_val_images: int = 100
    image_size: tuple[int, int] = (64, 64)
    classes: tuple[str, ...] = CLASS_NAMES
    objects_per_image: tuple[int, int] = (1, 4)
    size_range: tuple[float, float] = (0.15, 0.45)
    background_noise: float = 0.08
    max_gt_iou: float = 0.3
    output_stride: int = 4  # used to keep object center cells distinct

    def __post_init__(self):
        lo, hi = self.objects_per_image
        if not 0 <= lo <= hi:
            raise ValueError(f"objects_per_image must satisfy 0 <= min <= max, got {self.objects_per_image}")
        smin, smax = self.size_range
        if not 0 < smin <= smax <= 1:
            raise ValueError(f"size_range must satisfy 0 < min <= max <= 1, got {self.size_range}")
        if smin * min(self.image_size) < 4:
            raise ValueError("size_range would allow boxes smaller than 4 px")
        unknown = set(self.classes) - set(CLASS_NAMES)
        if unknown or not self.classes:
            raise ValueError(f"classes must be a non-empty subset of {CLASS_NAMES}, got {self.classes}")
        if self.num_images < 0 or self.num_val_images < 0:
            raise ValueError("image counts must be non-negative")


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    hflip_prob: float = 0.5
    scale_range: tuple[float, float] = (0.6, 1.3)
    min_visible: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must lie in [0, 1]")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"scale_range must be positive and ordered, got {self.scale_range}")


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] float64 in [0, 1]
    boxes: list[GtBox]
    name: str = ""


@dataclass
class Dataset:
    samples: list[Sample]
    config: Optional[DatasetConfig] = None
    checksum: str = ""

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i) -> Sample:
        return self.samples[i]


# --------------------------------------------------------------------------
# rasterisation


def _pixel_centers(h: int, w: int):
    ys, xs = np.mgrid[0:h, 0:w]
    return xs + 0.5, ys + 0.5


def rectangle_mask(h, w, x0, y0, x1, y1) -> np.ndarray:
    m = np.zeros((h, w), dtype=bool)
    m[int(y0) : int(y1), int(x0) : int(x1)] = True
    return m


def circle_mask(h, w, cx, cy, r) -> np.ndarray:
    px, py = _pixel_centers(h, w)
    return (px - cx) ** 2 + (py - cy) ** 2 <= r * r


def triangle_mask(h, w, pts) -> np.ndarray:
    px, py = _pixel_centers(h, w)
    (ax, ay), (bx, by), (cx, cy) = pts

    def edge(x0, y0, x1, y1):
        return (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)

    e0, e1, e2 = edge(ax, ay, bx, by), edge(bx, by, cx, cy), edge(cx, cy, ax, ay)
    return ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))


def mask_hull(mask: np.ndarray) -> Optional[tuple[float, float, float, float]]:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)


def _draw_shape(rng, kind: str, h: int, w: int, size: int):
    """Random placement of one shape whose hull is roughly ``size`` px."""
    if kind == "rectangle":
        bw = int(rng.integers(max(4, size // 2), size + 1))
        bh = int(rng.integers(max(4, size // 2), size + 1))
        x0 = int(rng.integers(0, w - bw + 1))
        y0 = int(rng.integers(0, h - bh + 1))
        return rectangle_mask(h, w, x0, y0, x0 + bw, y0 + bh)
    if kind == "circle":
        r = size // 2
        cx = int(rng.integers(r, w - r + 1))
        cy = int(rng.integers(r, h - r + 1))
        return circle_mask(h, w, cx, cy, r)
    # triangle: vertices inside a size x size cell, one per side band so it is never thin
    x0 = int(rng.integers(0, w - size + 1))
    y0 = int(rng.integers(0, h - size + 1))
    apex = (x0 + rng.uniform(0.2, 0.8) * size, y0)
    left = (x0, y0 + size)
    right = (x0 + size, y0 + rng.uniform(0.6, 1.0) * size)
    return triangle_mask(h, w, (apex, left, right))


def generate_scene(config: DatasetConfig, rng: np.random.Generator) -> tuple[np.ndarray, list[GtBox], int]:
    """Render one image and its tight boxes.

    Returns ``(image, boxes, failures)`` where ``failures`` counts objects
    that could not be placed within the overlap constraints. Pixel values
    are multiples of 1/255 so PPM storage is lossless.
    """
    h, w = config.image_size
    img = np.clip(BACKGROUND + config.background_noise * rng.uniform(-1, 1, size=(3, h, w)), 0, 1)
    n_obj = int(rng.integers(config.objects_per_image[0], config.objects_per_image[1] + 1))
    boxes: list[GtBox] = []
    cells: set[tuple[int, int]] = set()
    failures = 0
    smin, smax = config.size_range
    for _ in range(n_obj):
        cls = int(rng.integers(0, len(config.classes)))
        kind = config.classes[cls]
        color_cls = CLASS_NAMES.index(kind)
        for _ in range(MAX_PLACEMENT_TRIES):
            size = int(round(rng.uniform(smin, smax) * min(h, w)))
            mask = _draw_shape(rng, kind, h, w, max(size, 4))
            hull = mask_hull(mask)
            if hull is None or hull[2] - hull[0] < 4 or hull[3] - hull[1] < 4:
                continue
            box = GtBox(cls, *hull)
            if boxes and iou_matrix([box.as_tuple()], [b.as_tuple() for b in boxes]).max() > config.max_gt_iou:
                continue
            cell = (int(box.center[0] // config.output_stride), int(box.center[1] // config.output_stride))
            if cell in cells:
                continue
            break
        else:
            failures += 1
            continue
        color = np.clip(CLASS_COLORS[color_cls] + rng.uniform(-0.08, 0.08, size=3), 0, 1)
        texture = 0.5 * config.background_noise * rng.uniform(-1, 1, size=(3, h, w))
        img = np.where(mask[None], np.clip(color[:, None, None] + texture, 0, 1), img)
        boxes.append(box)
        cells.add(cell)
    return quantize(img), boxes, failures


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255.0) / 255.0


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def generate_dataset(config: DatasetConfig) -> tuple[Dataset, Dataset]:
    """Train and validation splits; image ``i`` depends only on ``(seed, i)``."""
    splits = []
    failures = 0
    offset = 0
    for prefix, count in (("train", config.num_images), ("val", config.num_val_images)):
        samples = []
        for i in range(count):
            img, boxes, fails = generate_scene(config, scene_rng(config.seed, offset + i))
            failures += fails
            samples.append(Sample(img, boxes, f"{i:05d}.ppm"))
        offset += count
        splits.append(Dataset(samples, config))
    if failures:
        logger.warning("%d objects could not be placed and were dropped", failures)
    return splits[0], splits[1]


# --------------------------------------------------------------------------
# augmentation


def hflip(image: np.ndarray, boxes: list[GtBox]) -> tuple[np.ndarray, list[GtBox]]:
    w = image.shape[-1]
    flipped = [GtBox(b.class_id, w - b.x_max, b.y_min, w - b.x_min, b.y_max) for b in boxes]
    return image[..., ::-1].copy(), flipped


def rescale(image: np.ndarray, boxes: list[GtBox], s: float, min_visible: float = 0.25, fill: float = BACKGROUND):
    """Zoom by ``s`` about the image center, keeping the canvas size.

    Coordinates map as ``x' = s*x + (W - s*W)/2``. The image is resampled
    bilinearly; uncovered canvas is filled with ``fill``. Boxes are clipped
    and dropped when less than ``min_visible`` of their area survives.
    """
    _, h, w = image.shape
    ox, oy = (w - s * w) / 2.0, (h - s * h) / 2.0
    # source coordinate (pixel-center convention) for each output pixel center
    sx = (np.arange(w) + 0.5 - ox) / s - 0.5
    sy = (np.arange(h) + 0.5 - oy) / s - 0.5
    inside_x = (sx >= -0.5) & (sx <= w - 0.5)
    inside_y = (sy >= -0.5) & (sy <= h - 0.5)
    sxc = np.clip(sx, 0, w - 1)
    syc = np.clip(sy, 0, h - 1)
    x0 = np.floor(sxc).astype(int)
    y0 = np.floor(syc).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = (sxc - x0)[None, None, :]
    ay = (syc - y0)[None, :, None]
    top = image[:, y0][:, :, x0] * (1 - ax) + image[:, y0][:, :, x1] * ax
    bot = image[:, y1][:, :, x0] * (1 - ax) + image[:, y1][:, :, x1] * ax
    out = top * (1 - ay) + bot * ay
    valid = inside_y[:, None] & inside_x[None, :]
    out = np.where(valid[None], out, fill)

    kept = []
    for b in boxes:
        nx0, ny0 = s * b.x_min + ox, s * b.y_min + oy
        nx1, ny1 = s * b.x_max + ox, s * b.y_max + oy
        full = (nx1 - nx0) * (ny1 - ny0)
        cx0, cy0 = max(nx0, 0.0), max(ny0, 0.0)
        cx1, cy1 = min(nx1, float(w)), min(ny1, float(h))
        if cx1 <= cx0 or cy1 <= cy0 or (cx1 - cx0) * (cy1 - cy0) < min_visible * full:
            continue
        kept.append(GtBox(b.class_id, cx0, cy0, cx1, cy1))
    return out, kept


def augment(image: np.ndarray, boxes: list[GtBox], config: AugmentConfig, rng: np.random.Generator):
    if not config.enabled:
        return image, list(boxes)
    if rng.random() < config.hflip_prob:
        image, boxes = hflip(image, boxes)
    s = rng.uniform(*config.scale_range)
    return rescale(image, boxes, s, config.min_visible)


# --------------------------------------------------------------------------
# PPM / JSON-lines I/O


def write_ppm(path, image: np.ndarray) -> None:
    arr = np.round(np.clip(image, 0, 1) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def _ppm_tokens(buf: bytes, path, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetFormatError(f"{path}: truncated PPM header at byte {pos}")
        tokens.append((buf[start:pos], start))
    return tokens, pos + 1  # one whitespace byte separates header and raster


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, data_start = _ppm_tokens(buf, path, 4)
    if tokens[0][0] != b"P6":
        raise DatasetFormatError(f"{path}: not a binary PPM (magic {tokens[0][0]!r} at byte 0)")
    try:
        w, h, maxval = (int(t) for t, _ in tokens[1:])
    except ValueError:
        bad = next(off for t, off in tokens[1:] if not t.isdigit())
        raise DatasetFormatError(f"{path}: non-numeric PPM header field at byte {bad}") from None
    if maxval != 255:
        raise DatasetFormatError(f"{path}: only 8-bit PPM is supported (maxval {maxval} at byte {tokens[3][1]})")
    need = w * h * 3
    raster = buf[data_start : data_start + need]
    if len(raster) != need:
        raise DatasetFormatError(
            f"{path}: truncated pixel data, expected {need} bytes from byte {data_start}, found {len(raster)}"
        )
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def box_to_json(b: GtBox) -> dict:
    return {"class": b.class_id, "x_min": b.x_min, "y_min": b.y_min, "x_max": b.x_max, "y_max": b.y_max}


def box_from_json(d: dict) -> GtBox:
    return GtBox(int(d["class"]), float(d["x_min"]), float(d["y_min"]), float(d["x_max"]), float(d["y_max"]))


def _checksum(split_dir: Path, names: list[str]) -> str:
    h = hashlib.sha256()
    for name in names:
        h.update(name.encode())
        h.update((split_dir / name).read_bytes())
    h.update((split_dir / "labels.jsonl").read_bytes())
    return h.hexdigest()


def write_dataset(dataset: Dataset, split_dir) -> str:
    """Write images, ``labels.jsonl`` and ``dataset.json``; returns the checksum."""
    split_dir = Path(split_dir)
    split_dir.mkdir(parents=True, exist_ok=True)
    names = []
    with open(split_dir / "labels.jsonl", "w") as f:
        for i, s in enumerate(dataset.samples):
            name = s.name or f"{i:05d}.ppm"
            write_ppm(split_dir / name, s.image)
            names.append(name)
            f.write(json.dumps({"image": name, "boxes": [box_to_json(b) for b in s.boxes]}) + "\n")
    checksum = _checksum(split_dir, names)
    manifest = {"config": asdict(dataset.config) if dataset.config else None, "checksum": checksum, "num_images": len(names)}
    with open(split_dir / "dataset.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    dataset.checksum = checksum
    return checksum


def read_dataset(split_dir) -> Dataset:
    split_dir = Path(split_dir)
    label_path = split_dir / "labels.jsonl"
    if not label_path.exists():
        raise DatasetFormatError(f"{label_path}: missing labels file")
    raw = label_path.read_bytes()
    samples, names = [], []
    offset = 0
    for lineno, line in enumerate(raw.splitlines(keepends=True), start=1):
        if line.strip():
            try:
                rec = json.loads(line)
                name = rec["image"]
                boxes = [box_from_json(b) for b in rec["boxes"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DatasetFormatError(f"{label_path}: bad label record on line {lineno} (byte {offset}): {e}") from None
            img_path = split_dir / name
            if not img_path.exists():
                raise DatasetFormatError(f"{label_path}: line {lineno} (byte {offset}) references missing image {name}")
            samples.append(Sample(read_ppm(img_path), boxes, name))
            names.append(name)
        offset += len(line)
    config = None
    checksum = _checksum(split_dir, names)
    meta_path = split_dir / "dataset.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if meta.get("checksum") and meta["checksum"] != checksum:
            raise DatasetFormatError(f"{meta_path}: checksum mismatch (recorded {meta['checksum'][:12]}, found {checksum[:12]})")
        if meta.get("config"):
            from .config import load_config

            config = load_config(DatasetConfig, meta["config"], where=str(meta_path))
    return Dataset(samples, config, checksum)


def samples_threads() -> int:
    """Worker cap from ``SACCADE_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("SACCADE_THREADS", "1")))
    except ValueError:
        return 1
