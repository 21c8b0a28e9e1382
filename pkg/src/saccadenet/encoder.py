"""Ground-truth boxes -> heatmaps, size/offset maps and keypoint masks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .network import KeypointMode, NetworkConfig, keypoints_array

MIN_OVERLAP = 0.3
# sigma used when the radius collapses to zero (e.g. t -> 1 or tiny boxes)
MIN_SIGMA = 1.0 / 6.0


@dataclass(frozen=True)
class GtBox:
    class_id: int
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"degenerate box {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass
class ObjectTarget:
    cell: tuple[int, int]  # (col, row) on the feature map
    center: tuple[float, float]  # exact center, feature units
    wh: tuple[float, float]  # feature units
    class_id: int


@dataclass
class GroundTruthTarget:
    center_heatmap: np.ndarray  # [num_classes, h_f, w_f]
    corner_heatmap: np.ndarray  # [4, h_f, w_f]
    wh_target: np.ndarray  # [2, h_f, w_f]
    offset_target: np.ndarray  # [2, h_f, w_f]
    keypoint_mask: np.ndarray  # [h_f, w_f] bool
    objects: list[ObjectTarget] = field(default_factory=list)
    skipped: int = 0
    collisions: int = 0


def gaussian_radius(width: float, height: float, min_overlap: float = MIN_OVERLAP) -> float:
    """Largest keypoint displacement that keeps IoU >= ``min_overlap``.

    Three ways of moving both corners by ``r`` are considered (translate,
    shrink, grow); each gives a quadratic in ``r`` and the smallest valid root
    is returned.
    """
    if width <= 0 or height <= 0:
        raise ValueError(f"box size must be positive, got {(width, height)}")
    if not 0.0 < min_overlap < 1.0:
        raise ValueError(f"min_overlap must lie in (0, 1), got {min_overlap}")
    w, h, t = float(width), float(height), float(min_overlap)

    # translate by (r, r): (w-r)(h-r) / (2wh - (w-r)(h-r)) >= t
    b1 = w + h
    c1 = w * h * (1 - t) / (1 + t)
    r1 = (b1 - math.sqrt(max(b1 * b1 - 4 * c1, 0.0))) / 2

    # shrink: (w-2r)(h-2r) / wh >= t
    b2 = 2 * (w + h)
    c2 = (1 - t) * w * h
    r2 = (b2 - math.sqrt(max(b2 * b2 - 16 * c2, 0.0))) / 8

    # grow: wh / ((w+2r)(h+2r)) >= t
    a3 = 4 * t
    b3 = 2 * t * (w + h)
    c3 = (t - 1) * w * h
    r3 = (-b3 + math.sqrt(max(b3 * b3 - 4 * a3 * c3, 0.0))) / (2 * a3)

    return max(0.0, min(r1, r2, r3))


def render_gaussian(channel: np.ndarray, center, sigma: float) -> None:
    """Max-splat ``exp(-d^2 / (2 sigma^2))`` around an integer ``(x, y)`` in place."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    h, w = channel.shape
    cx, cy = int(center[0]), int(center[1])
    if not (0 <= cx < w and 0 <= cy < h):
        raise ValueError(f"center {(cx, cy)} outside a {w}x{h} map")
    rad = int(math.ceil(3 * sigma))
    x0, x1 = max(0, cx - rad), min(w, cx + rad + 1)
    y0, y1 = max(0, cy - rad), min(h, cy + rad + 1)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    g = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma * sigma))
    np.maximum(channel[y0:y1, x0:x1], g, out=channel[y0:y1, x0:x1])


def sigma_for(wh_feature: tuple[float, float]) -> float:
    return max(gaussian_radius(*wh_feature) / 3.0, MIN_SIGMA)


def _to_cell(x: float, y: float, w_f: int, h_f: int) -> tuple[int, int]:
    return min(max(int(math.floor(x)), 0), w_f - 1), min(max(int(math.floor(y)), 0), h_f - 1)


def encode_targets(boxes, config: NetworkConfig, keypoints: KeypointMode | None = None) -> GroundTruthTarget:
    """Build every supervision map for one image.

    Boxes are in input pixels. A box that does not intersect the image is
    skipped and counted; a box whose center cell is already taken overwrites
    the size/offset there and is counted as a collision.
    """
    keypoints = config.aggregation_keypoints if keypoints is None else keypoints
    h_f, w_f = config.feature_size
    img_h, img_w = config.input_size
    r = config.output_stride
    tgt = GroundTruthTarget(
        center_heatmap=np.zeros((config.num_classes, h_f, w_f)),
        corner_heatmap=np.zeros((4, h_f, w_f)),
        wh_target=np.zeros((2, h_f, w_f)),
        offset_target=np.zeros((2, h_f, w_f)),
        keypoint_mask=np.zeros((h_f, w_f), dtype=bool),
    )
    for box in boxes:
        if box.x_max <= 0 or box.y_max <= 0 or box.x_min >= img_w or box.y_min >= img_h:
            tgt.skipped += 1
            continue
        if not 0 <= box.class_id < config.num_classes:
            raise ValueError(f"class id {box.class_id} outside [0, {config.num_classes})")
        cx, cy = box.center[0] / r, box.center[1] / r
        bw, bh = box.width / r, box.height / r
        col, row = _to_cell(cx, cy, w_f, h_f)
        sigma = sigma_for((bw, bh))
        render_gaussian(tgt.center_heatmap[box.class_id], (col, row), sigma)
        for k, (kx, ky) in enumerate(keypoints_array([(cx, cy)], [(bw, bh)], keypoints)[0]):
            render_gaussian(tgt.corner_heatmap[k], _to_cell(kx, ky, w_f, h_f), sigma)
        if tgt.keypoint_mask[row, col]:
            tgt.collisions += 1
            tgt.objects = [o for o in tgt.objects if o.cell != (col, row)]
        tgt.keypoint_mask[row, col] = True
        tgt.wh_target[:, row, col] = (bw, bh)
        tgt.offset_target[:, row, col] = (cx - col, cy - row)
        tgt.objects.append(ObjectTarget((col, row), (cx, cy), (bw, bh), box.class_id))
    return tgt
