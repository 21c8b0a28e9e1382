"""Peak-picking vs IoU NMS: cross-mode agreement check and timing."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .decoder import DecoderConfig, decode
from .network import NetworkConfig, NetworkOutputs

BOX_CELLS = 6.0  # box side, feature cells
MIN_SEPARATION = 6  # Chebyshev distance between peaks


@dataclass
class BenchRow:
    size: int
    density: float
    mode: str
    median_ms: float
    p95_ms: float
    detections: float  # mean per map

    def to_json(self) -> dict:
        return dict(self.__dict__)


def synthetic_outputs(rng: np.random.Generator, size: int, num_peaks: int, num_classes: int = 3) -> NetworkOutputs:
    """Heatmap of separated 3x3 blobs with distinct scores; wh fixed, offsets zero.

    Each blob has a strict maximum at its centre, so peak picking keeps
    exactly the centres, and every ring cell's box overlaps its centre's box
    with IoU >= 0.53, so greedy IoU NMS removes exactly the ring cells.
    """
    hm = np.zeros((num_classes, size, size))
    centres: list[tuple[int, int]] = []
    for _ in range(num_peaks * 50):
        if len(centres) == num_peaks:
            break
        r, c = (int(v) for v in rng.integers(1, size - 1, 2))
        if all(max(abs(r - r2), abs(c - c2)) >= MIN_SEPARATION for r2, c2 in centres):
            centres.append((r, c))
    # distinct values everywhere: draw one pool and hand them out
    values = rng.permutation(np.linspace(0.05, 0.95, 9 * max(len(centres), 1) * 2))
    k = 0
    for r, c in centres:
        cls = int(rng.integers(num_classes))
        peak = 0.5 + 0.5 * values[k]
        k += 1
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == dc == 0:
                    continue
                hm[cls, r + dr, c + dc] = peak * (0.2 + 0.7 * values[k])
                k += 1
        hm[cls, r, c] = peak
    wh = np.full((2, size, size), BOX_CELLS)
    off = np.zeros((2, size, size))
    return NetworkOutputs(center_heatmap=hm, wh_map=wh, offset_map=off, backbone_features=None)


def _net(size: int, num_classes: int) -> NetworkConfig:
    return NetworkConfig(num_classes=num_classes, input_size=(4 * size, 4 * size))


def _detection_set(dets) -> set:
    return {(d.class_id, round(d.score, 12), tuple(round(v, 9) for v in d.box)) for d in dets}


def agreement_check(num_maps: int = 100, size: int = 32, num_peaks: int = 8, seed: int = 0) -> tuple[int, int]:
    """Both modes must return the same detections on tie-free maps. Returns (agreeing, total)."""
    rng = np.random.default_rng(seed)
    net = _net(size, 3)
    agree = 0
    for _ in range(num_maps):
        outputs = synthetic_outputs(rng, size, num_peaks)
        k = int(np.count_nonzero(outputs.center_heatmap))
        pp = decode(outputs, DecoderConfig(top_k=k, nms_mode="pp", use_refinement=False), net)
        iou = decode(outputs, DecoderConfig(top_k=k, nms_mode="iou", use_refinement=False), net)
        agree += _detection_set(pp) == _detection_set(iou) and len(pp) == len(iou)
    return agree, num_maps


def run_benchmark(sizes=(32, 64, 128), densities=(0.005, 0.02), repeats: int = 20, top_k: int = 100, seed: int = 0) -> list[BenchRow]:
    """Time ``decode`` in each mode; density is peaks per heatmap cell."""
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    if not sizes or not densities:
        raise ValueError("need at least one size and one density")
    rows = []
    for size in sizes:
        if size < 3:
            raise ValueError(f"heatmap size must be >= 3, got {size}")
        net = _net(size, 3)
        for density in densities:
            if not 0 < density <= 1:
                raise ValueError(f"density must lie in (0, 1], got {density}")
            rng = np.random.default_rng([seed, size, int(density * 1e6)])
            maps = [synthetic_outputs(rng, size, max(1, round(density * size * size))) for _ in range(repeats)]
            for mode in ("pp", "iou"):
                cfg = DecoderConfig(top_k=top_k, nms_mode=mode, use_refinement=False)
                times, counts = [], []
                for outputs in maps:
                    t0 = time.perf_counter()
                    dets = decode(outputs, cfg, net)
                    times.append((time.perf_counter() - t0) * 1e3)
                    counts.append(len(dets))
                rows.append(BenchRow(size, density, mode, float(np.median(times)), float(np.percentile(times, 95)), float(np.mean(counts))))
    return rows


def format_table(rows: list[BenchRow]) -> str:
    lines = [f"{'size':>5} {'density':>8} {'mode':>4} {'median ms':>10} {'p95 ms':>8} {'dets':>6}"]
    for r in rows:
        lines.append(f"{r.size:>5} {r.density:>8.3f} {r.mode:>4} {r.median_ms:>10.3f} {r.p95_ms:>8.3f} {r.detections:>6.1f}")
    return "\n".join(lines)
