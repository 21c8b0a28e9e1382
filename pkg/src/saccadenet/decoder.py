"""Network outputs -> ranked detections."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal, Optional

import numpy as np

from .autodiff import Tensor, maxpool3x3_same
from .network import ModelParams, NetworkConfig, NetworkOutputs, aggregate_refine

Box = tuple[float, float, float, float]
RefineFn = Callable[[np.ndarray, np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class DecoderConfig:
    top_k: int = 100
    score_threshold: float = 0.0
    nms_mode: Literal["pp", "iou"] = "pp"
    iou_threshold: float = 0.5
    use_refinement: bool = True
    refine_iterations: Optional[int] = None  # None: take it from the network config

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError("iou_threshold must lie in (0, 1)")
        if self.nms_mode not in ("pp", "iou"):
            raise ValueError(f"unknown nms_mode {self.nms_mode!r}")


@dataclass
class Detection:
    class_id: int
    score: float
    coarse_box: Box
    refined_box: Optional[Box] = None

    @property
    def box(self) -> Box:
        """The best available box: refined when present."""
        return self.refined_box if self.refined_box is not None else self.coarse_box

    def to_json(self) -> dict:
        return {
            "class": self.class_id,
            "score": self.score,
            "box": list(self.coarse_box),
            "refined_box": None if self.refined_box is None else list(self.refined_box),
        }


def peak_nms(heatmap: np.ndarray) -> np.ndarray:
    """Zero every cell that is not the maximum of its 3x3 neighbourhood. Ties survive."""
    heatmap = np.asarray(heatmap, dtype=np.float64)
    pooled = maxpool3x3_same(heatmap).data
    return np.where(pooled == heatmap, heatmap, 0.0)


def topk_peaks(heatmap: np.ndarray, k: int) -> list[tuple[int, tuple[int, int], float]]:
    """Up to ``k`` nonzero cells as ``(class, (col, row), score)``, best first.

    Equal scores are ordered by (class, row, col) ascending.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    c_idx, r_idx, x_idx = np.nonzero(heatmap)
    scores = heatmap[c_idx, r_idx, x_idx]
    order = np.lexsort((x_idx, r_idx, c_idx, -scores))[:k]
    return [(int(c_idx[i]), (int(x_idx[i]), int(r_idx[i])), float(scores[i])) for i in order]


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def iou_nms(detections: list[Detection], threshold: float = 0.5) -> list[Detection]:
    """Greedy per-class suppression, highest score first (stable for equal scores)."""
    if not detections:
        return []
    detections = sorted(detections, key=lambda d: -d.score)
    boxes = np.array([d.box for d in detections])
    classes = np.array([d.class_id for d in detections])
    ious = iou_matrix(boxes, boxes)
    alive = np.ones(len(detections), dtype=bool)
    keep = []
    for i in range(len(detections)):
        if not alive[i]:
            continue
        keep.append(detections[i])
        alive &= ~((ious[i] >= threshold) & (classes == classes[i]))
    return keep


def make_refine_fn(outputs: NetworkOutputs, params: ModelParams, config: NetworkConfig) -> RefineFn:
    feats = outputs.backbone_features

    def refine(centers: np.ndarray, wh: np.ndarray, iterations: int) -> np.ndarray:
        return aggregate_refine(feats, centers, wh, params, config, iterations=iterations).wh

    return refine


def _box(cx, cy, w, h, stride, size) -> Box:
    img_h, img_w = size
    x0 = float(np.clip((cx - w / 2) * stride, 0, img_w))
    y0 = float(np.clip((cy - h / 2) * stride, 0, img_h))
    x1 = float(np.clip((cx + w / 2) * stride, 0, img_w))
    y1 = float(np.clip((cy + h / 2) * stride, 0, img_h))
    return (x0, y0, x1, y1)


def _map(x) -> np.ndarray:
    a = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ValueError("decode works on one image at a time")
        a = a[0]
    return a


def decode(
    outputs: NetworkOutputs,
    config: DecoderConfig,
    network_config: NetworkConfig,
    refine_fn: Optional[RefineFn] = None,
) -> list[Detection]:
    """Peak picking (or raw top-k + IoU NMS), box assembly and optional refinement."""
    hm = _map(outputs.center_heatmap)
    wh_map = _map(outputs.wh_map)
    off_map = _map(outputs.offset_map)
    candidates = peak_nms(hm) if config.nms_mode == "pp" else hm
    peaks = [p for p in topk_peaks(candidates, config.top_k) if p[2] > config.score_threshold]
    if not peaks:
        return []
    cols = np.array([p[1][0] for p in peaks])
    rows = np.array([p[1][1] for p in peaks])
    centers = np.stack([cols + off_map[0, rows, cols], rows + off_map[1, rows, cols]], axis=1)
    wh = np.maximum(np.stack([wh_map[0, rows, cols], wh_map[1, rows, cols]], axis=1), 0.0)

    refined = None
    iterations = network_config.refine_iterations if config.refine_iterations is None else config.refine_iterations
    if config.use_refinement and refine_fn is not None:
        refined = np.maximum(refine_fn(centers, wh, iterations), 0.0)

    stride, size = network_config.output_stride, network_config.input_size
    dets = []
    for i, (cls, _, score) in enumerate(peaks):
        coarse = _box(centers[i, 0], centers[i, 1], wh[i, 0], wh[i, 1], stride, size)
        ref = None if refined is None else _box(centers[i, 0], centers[i, 1], refined[i, 0], refined[i, 1], stride, size)
        dets.append(Detection(cls, score, coarse, ref))
    if config.nms_mode == "iou":
        dets = iou_nms(dets, config.iou_threshold)
    return dets


def oracle_outputs(target) -> NetworkOutputs:
    """Idealised network outputs: the encoded ground-truth maps themselves."""
    return NetworkOutputs(
        center_heatmap=target.center_heatmap,
        wh_map=target.wh_target,
        offset_map=target.offset_target,
        backbone_features=None,
    )
