"""IoU, greedy matching and 101-point interpolated average precision."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .decoder import iou_matrix

REPORT_THRESHOLDS = (0.5, 0.7, 0.9)
COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
SIZE_BUCKETS = {
    "small": (0.0, 64.0**2),
    "medium": (64.0**2, 128.0**2),
    "large": (128.0**2, np.inf),
}


def iou(a, b) -> float:
    return float(iou_matrix(a, b)[0, 0])


def box_area(box) -> float:
    return max(0.0, box[2] - box[0]) * max(0.0, box[3] - box[1])


def in_bucket(area: float, bucket: Optional[str]) -> bool:
    """Buckets are (lo, hi]; the small bucket also includes 0."""
    if bucket is None:
        return True
    lo, hi = SIZE_BUCKETS[bucket]
    return (area >= lo if lo == 0 else area > lo) and area <= hi


@dataclass
class ScoredBox:
    class_id: int
    score: float
    box: tuple[float, float, float, float]


def _as_scored(d) -> ScoredBox:
    if isinstance(d, ScoredBox):
        return d
    return ScoredBox(int(d.class_id), float(d.score), tuple(d.box))


def _gt_tuple(g):
    if hasattr(g, "as_tuple"):
        return int(g.class_id), g.as_tuple()
    return int(g[0]), tuple(g[1])


def match_detections(detections_per_image, gts_per_image, iou_threshold: float, size_bucket: Optional[str] = None):
    """Greedy class-aware matching in global score order.

    Returns ``(scores, labels, n_gt)`` where label is 1 (true positive),
    0 (false positive) or -1 (ignored: matched an out-of-bucket GT, or an
    unmatched detection that is itself outside the bucket).
    """
    dets = [[_as_scored(d) for d in img_dets] for img_dets in detections_per_image]
    gts = [[_gt_tuple(g) for g in img_gts] for img_gts in gts_per_image]
    entries = sorted(
        ((-d.score, img, j) for img, img_dets in enumerate(dets) for j, d in enumerate(img_dets)),
    )
    overlaps = []
    for img, img_dets in enumerate(dets):
        img_gts = gts[img] if img < len(gts) else []
        if img_dets and img_gts:
            ov = iou_matrix([d.box for d in img_dets], [b for _, b in img_gts])
            same = np.array([d.class_id for d in img_dets])[:, None] == np.array([c for c, _ in img_gts])[None, :]
            overlaps.append(np.where(same, ov, -1.0))
        else:
            overlaps.append(np.zeros((len(img_dets), len(img_gts))))
    ignored = [np.array([not in_bucket(box_area(b), size_bucket) for _, b in img_gts], dtype=bool) for img_gts in gts]
    matched = [np.zeros(len(img_gts), dtype=bool) for img_gts in gts]
    n_gt = int(sum((~ig).sum() for ig in ignored))

    scores, labels = [], []
    for neg_score, img, j in entries:
        scores.append(-neg_score)
        best = -1
        if img < len(gts) and len(gts[img]):
            ov = np.where(matched[img], -1.0, overlaps[img][j])
            ok = ov >= iou_threshold
            # in-bucket GTs first, then the highest IoU
            for pool in (ok & ~ignored[img], ok & ignored[img]):
                if pool.any():
                    best = int(np.argmax(np.where(pool, ov, -np.inf)))
                    break
        if best >= 0:
            matched[img][best] = True
            labels.append(-1 if ignored[img][best] else 1)
        else:
            labels.append(0 if in_bucket(box_area(dets[img][j].box), size_bucket) else -1)
    return np.array(scores), np.array(labels, dtype=np.int64), n_gt


def pr_curve(labels: np.ndarray, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    keep = labels >= 0
    tp = np.cumsum(labels[keep] == 1)
    fp = np.cumsum(labels[keep] == 0)
    recall = tp / max(n_gt, 1)
    precision = tp / np.maximum(tp + fp, 1)
    return precision, recall


def interpolated_precision(precision: np.ndarray, recall: np.ndarray) -> np.ndarray:
    """Precision at each of the 101 recall points (max precision to the right)."""
    out = np.zeros(len(RECALL_POINTS))
    if len(precision) == 0:
        return out
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    valid = idx < len(recall)
    out[valid] = envelope[idx[valid]]
    return out


def match_and_ap(detections_per_image, gts_per_image, iou_threshold: float, size_bucket: Optional[str] = None) -> Optional[float]:
    """AP for one IoU threshold, or ``None`` when no GT falls in scope."""
    _, labels, n_gt = match_detections(detections_per_image, gts_per_image, iou_threshold, size_bucket)
    if n_gt == 0:
        return None
    precision, recall = pr_curve(labels, n_gt)
    return float(interpolated_precision(precision, recall).mean())


@dataclass
class EvalReport:
    ap_per_threshold: dict[float, Optional[float]]
    map_coco: Optional[float]
    ap_small: Optional[float]
    ap_medium: Optional[float]
    ap_large: Optional[float]
    pr_curves: dict[float, dict[str, list[float]]] = field(default_factory=dict)
    num_images: int = 0
    num_gt: int = 0
    num_detections: int = 0

    @property
    def ap50(self) -> Optional[float]:
        return self.ap_per_threshold.get(0.5)

    @property
    def ap70(self) -> Optional[float]:
        return self.ap_per_threshold.get(0.7)

    @property
    def ap90(self) -> Optional[float]:
        return self.ap_per_threshold.get(0.9)

    def to_json(self) -> dict:
        return {
            "ap_per_threshold": {f"{k:.2f}": v for k, v in self.ap_per_threshold.items()},
            "map_coco": self.map_coco,
            "ap_small": self.ap_small,
            "ap_medium": self.ap_medium,
            "ap_large": self.ap_large,
            "pr_curves": {f"{k:.2f}": v for k, v in self.pr_curves.items()},
            "num_images": self.num_images,
            "num_gt": self.num_gt,
            "num_detections": self.num_detections,
        }

    @classmethod
    def from_json(cls, data: dict) -> "EvalReport":
        return cls(
            ap_per_threshold={float(k): v for k, v in data["ap_per_threshold"].items()},
            map_coco=data["map_coco"],
            ap_small=data["ap_small"],
            ap_medium=data["ap_medium"],
            ap_large=data["ap_large"],
            pr_curves={float(k): v for k, v in data["pr_curves"].items()},
            num_images=data["num_images"],
            num_gt=data["num_gt"],
            num_detections=data["num_detections"],
        )

    def table(self) -> str:
        def fmt(v):
            return "   n/a" if v is None else f"{100 * v:6.2f}"

        head = f"{'AP@50':>6} {'AP@70':>6} {'AP@90':>6} {'AP@S':>6} {'AP@M':>6} {'AP@L':>6} {'mAP':>6}"
        row = " ".join(fmt(v) for v in (self.ap50, self.ap70, self.ap90, self.ap_small, self.ap_medium, self.ap_large, self.map_coco))
        return f"{head}\n{row}"


def _mean_defined(values: Sequence[Optional[float]]) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate(detections_per_image, gts_per_image) -> EvalReport:
    """All report metrics; size-bucket APs average the ten COCO thresholds."""
    if len(detections_per_image) != len(gts_per_image):
        raise ValueError(f"{len(detections_per_image)} detection lists for {len(gts_per_image)} images")
    per_thr = {}
    curves = {}
    for t in sorted(set(REPORT_THRESHOLDS) | set(COCO_THRESHOLDS)):
        _, labels, n_gt = match_detections(detections_per_image, gts_per_image, t)
        if n_gt == 0:
            per_thr[t] = None
            continue
        precision, recall = pr_curve(labels, n_gt)
        interp = interpolated_precision(precision, recall)
        per_thr[t] = float(interp.mean())
        if t in REPORT_THRESHOLDS:
            curves[t] = {"recall": RECALL_POINTS.tolist(), "precision": interp.tolist()}
    buckets = {
        b: _mean_defined([match_and_ap(detections_per_image, gts_per_image, t, b) for t in COCO_THRESHOLDS])
        for b in SIZE_BUCKETS
    }
    return EvalReport(
        ap_per_threshold={t: per_thr[t] for t in REPORT_THRESHOLDS},
        map_coco=_mean_defined([per_thr[t] for t in COCO_THRESHOLDS]) if per_thr[COCO_THRESHOLDS[0]] is not None else None,
        ap_small=buckets["small"],
        ap_medium=buckets["medium"],
        ap_large=buckets["large"],
        pr_curves=curves,
        num_images=len(gts_per_image),
        num_gt=sum(len(g) for g in gts_per_image),
        num_detections=sum(len(d) for d in detections_per_image),
    )


def write_report(report: EvalReport, path) -> None:
    with open(path, "w") as f:
        json.dump(report.to_json(), f, indent=2, sort_keys=True)


def read_report(path) -> EvalReport:
    with open(path) as f:
        return EvalReport.from_json(json.load(f))
