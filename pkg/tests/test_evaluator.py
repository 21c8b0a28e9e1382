import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from saccadenet.encoder import GtBox
from saccadenet.evaluator import (
    COCO_THRESHOLDS,
    SIZE_BUCKETS,
    EvalReport,
    ScoredBox,
    box_area,
    evaluate,
    in_bucket,
    iou,
    match_and_ap,
    read_report,
    write_report,
)


def py_iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def oracle_ap(dets, gts, thr):
    """Plain-python greedy matching, then precision/recall recomputed from scratch at every rank."""
    order = sorted(((d.score, i, j) for i, ds in enumerate(dets) for j, d in enumerate(ds)), key=lambda t: -t[0])
    used = [[False] * len(g) for g in gts]
    hits = []
    for _, i, j in order:
        d = dets[i][j]
        best, best_iou = None, thr
        for k, g in enumerate(gts[i]):
            if used[i][k] or g.class_id != d.class_id:
                continue
            v = py_iou(d.box, g.as_tuple())
            if v >= best_iou and (best is None or v > best_iou):
                best, best_iou = k, v
        if best is not None:
            used[i][best] = True
        hits.append(best is not None)
    n_gt = sum(len(g) for g in gts)
    points = []
    for k in range(1, len(hits) + 1):
        tp = sum(hits[:k])
        points.append((tp / n_gt, tp / k))
    total = 0.0
    for r in np.linspace(0, 1, 101):
        total += max([p for rec, p in points if rec >= r], default=0.0)
    return total / 101


def random_scene(rng, n_gt=4, n_det=7):
    gts = []
    for _ in range(n_gt):
        x, y = rng.uniform(0, 40, 2)
        w, h = rng.uniform(4, 20, 2)
        gts.append(GtBox(int(rng.integers(2)), x, y, x + w, y + h))
    dets = []
    for _ in range(n_det):
        if gts and rng.random() < 0.7:
            g = gts[int(rng.integers(len(gts)))]
            box = tuple(np.add(g.as_tuple(), rng.normal(0, 2, 4)))
            box = (box[0], box[1], max(box[2], box[0] + 1), max(box[3], box[1] + 1))
            cls = g.class_id if rng.random() < 0.9 else 1 - g.class_id
        else:
            x, y = rng.uniform(0, 40, 2)
            box, cls = (x, y, x + 10, y + 10), int(rng.integers(2))
        dets.append(ScoredBox(cls, float(rng.random()), box))
    return dets, gts


def test_iou_examples():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7)
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0


def test_single_match_and_miss():
    g = [[GtBox(0, 0, 0, 10, 10)]]
    assert match_and_ap([[ScoredBox(0, 0.9, (0, 0, 10, 9))]], g, 0.5) == 1.0
    assert match_and_ap([[ScoredBox(0, 0.9, (20, 20, 30, 30))]], g, 0.5) == 0.0


def test_no_gt_in_scope_is_absent():
    assert match_and_ap([[ScoredBox(0, 0.9, (0, 0, 5, 5))]], [[]], 0.5) is None
    assert match_and_ap([[]], [[GtBox(0, 0, 0, 5, 5)]], 0.5, "large") is None


@pytest.mark.parametrize("seed", range(20))
def test_ap_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    scenes = [random_scene(rng, int(rng.integers(1, 5)), int(rng.integers(0, 9))) for _ in range(3)]
    dets, gts = [s[0] for s in scenes], [s[1] for s in scenes]
    for thr in (0.5, 0.7, 0.9):
        assert match_and_ap(dets, gts, thr) == pytest.approx(oracle_ap(dets, gts, thr), abs=1e-9)


def test_perfect_and_empty_detectors():
    rng = np.random.default_rng(0)
    gts = [random_scene(rng)[1] for _ in range(4)]
    perfect = [[ScoredBox(g.class_id, 1.0, g.as_tuple()) for g in img] for img in gts]
    r = evaluate(perfect, gts)
    assert r.ap50 == r.ap70 == r.ap90 == r.map_coco == 1.0
    empty = evaluate([[] for _ in gts], gts)
    assert empty.ap50 == empty.ap90 == empty.map_coco == 0.0


def test_jittered_detector_scores_lower_at_strict_threshold():
    rng = np.random.default_rng(1)
    gts = [random_scene(rng)[1] for _ in range(20)]
    # +-0.3 cell at stride 4 is +-1.2 px
    dets = [[ScoredBox(g.class_id, float(rng.random()), tuple(np.add(g.as_tuple(), rng.uniform(-1.2, 1.2, 4)))) for g in img] for img in gts]
    r = evaluate(dets, gts)
    assert r.ap50 > r.ap90


@given(st.integers(0, 10_000))
def test_ap_monotone_in_threshold(seed):
    rng = np.random.default_rng(seed)
    scenes = [random_scene(rng) for _ in range(2)]
    dets, gts = [s[0] for s in scenes], [s[1] for s in scenes]
    aps = [match_and_ap(dets, gts, t) for t in COCO_THRESHOLDS]
    assert all(a >= b - 1e-12 for a, b in zip(aps, aps[1:]))


@given(st.integers(0, 10_000))
def test_ap_invariant_to_monotone_score_transform(seed):
    rng = np.random.default_rng(seed)
    dets, gts = random_scene(rng)
    warped = [ScoredBox(d.class_id, float(np.exp(3 * d.score) - 7), d.box) for d in dets]
    for t in (0.5, 0.75):
        assert match_and_ap([dets], [gts], t) == match_and_ap([warped], [gts], t)


def test_duplicate_detection_is_false_positive():
    g = [[GtBox(0, 0, 0, 10, 10), GtBox(0, 20, 20, 30, 30)]]
    clean = [[ScoredBox(0, 0.9, (0, 0, 10, 10)), ScoredBox(0, 0.5, (20, 20, 30, 30))]]
    dup = [clean[0] + [ScoredBox(0, 0.7, (0, 0, 10, 10))]]
    assert match_and_ap(clean, g, 0.5) == 1.0
    assert match_and_ap(dup, g, 0.5) < 1.0


def test_buckets_partition_gt():
    rng = np.random.default_rng(2)
    areas = list(rng.uniform(0, 40000, 200)) + [0.0, 64.0**2, 128.0**2]
    for a in areas:
        assert sum(in_bucket(a, b) for b in SIZE_BUCKETS) == 1


def test_size_bucket_ignores_out_of_bucket():
    small, large = GtBox(0, 0, 0, 10, 10), GtBox(0, 100, 100, 300, 300)
    gts = [[small, large]]
    dets = [[ScoredBox(0, 0.9, large.as_tuple()), ScoredBox(0, 0.8, small.as_tuple()), ScoredBox(0, 0.7, (50, 0, 60, 10))]]
    # large detection matches an out-of-bucket GT: ignored; the stray small box is a false positive
    assert match_and_ap(dets, gts, 0.5, "small") == pytest.approx(1.0)
    stray_first = [[ScoredBox(0, 0.95, (50, 0, 60, 10)), ScoredBox(0, 0.8, small.as_tuple())]]
    assert match_and_ap(stray_first, gts, 0.5, "small") == pytest.approx(0.5)
    # unmatched large detection outside the small bucket is ignored rather than counted
    big_stray = [[ScoredBox(0, 0.95, (400, 400, 600, 600)), ScoredBox(0, 0.8, small.as_tuple())]]
    assert match_and_ap(big_stray, gts, 0.5, "small") == 1.0
    assert match_and_ap(dets, gts, 0.5, "large") == 1.0
    assert match_and_ap(dets, gts, 0.5, "medium") is None


def test_report_fields_and_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    scenes = [random_scene(rng) for _ in range(5)]
    r = evaluate([s[0] for s in scenes], [s[1] for s in scenes])
    for v in (r.ap50, r.ap70, r.ap90, r.map_coco, r.ap_small):
        assert 0.0 <= v <= 1.0
    assert r.ap_large is None  # no GT larger than 64^2 px here
    for curve in r.pr_curves.values():
        p = np.array(curve["precision"])
        assert (np.diff(p) <= 1e-12).all()
    path = tmp_path / "r.json"
    write_report(r, path)
    back = read_report(path)
    assert back.to_json() == r.to_json()
    json.loads(path.read_text())
    assert "AP@50" in r.table()


def test_empty_split_reports_absent():
    r = evaluate([], [])
    assert r.ap50 is None and r.map_coco is None and r.ap_small is None
    assert "n/a" in r.table()


def test_mismatched_lengths():
    with pytest.raises(ValueError):
        evaluate([[]], [])


def test_box_area():
    assert box_area((0, 0, 3, 4)) == 12
    assert box_area((3, 0, 1, 4)) == 0
