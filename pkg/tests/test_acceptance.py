"""End-to-end acceptance suite: one PASS/FAIL line per criterion.

Criteria 5-7 share one set of training runs (full model and the
no-aggregation ablation, three seeds each). Trained checkpoints are cached
under the pytest cache directory, keyed by the training configuration and a
hash of the package sources, so a rerun on unchanged code re-evaluates the
same weights instead of retraining. Set ``SACCADENET_FRESH_TRAINING=1`` to
force retraining.
"""

import dataclasses
import hashlib
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

import saccadenet
from saccadenet import gradcheck
from saccadenet.cli import main
from saccadenet.data import DatasetConfig, generate_dataset, generate_scene, scene_rng
from saccadenet.decoder import DecoderConfig, Detection, decode, iou_nms, oracle_outputs, peak_nms, topk_peaks
from saccadenet.encoder import GtBox, encode_targets, gaussian_radius
from saccadenet.evaluator import iou
from saccadenet.network import NetworkConfig
from saccadenet.trainer import TrainConfig, evaluate_params, load_checkpoint, save_checkpoint, train

SEEDS = (0, 1, 2)
DATA = DatasetConfig()  # 500 train / 100 val, 64x64, 3 classes
FULL = NetworkConfig()
NO_AGG = dataclasses.replace(FULL, use_aggregation=False)
TRAIN = dict(learning_rate=1e-3, epochs=30, lr_drop_epoch=25)
AP50_THRESHOLD = 0.80  # frozen after the first baseline run (AP50 ~ 0.94)
TIME_BUDGET_S = 30 * 60


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\n[acceptance] {'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
    assert ok, detail


# --------------------------------------------------------------------------
# 1. gradients


def test_criterion_1_gradient_suite(capsys):
    lines = []
    t0 = time.perf_counter()
    ok = gradcheck.run_suite(seeds=range(20), log=lines.append)
    elapsed = time.perf_counter() - t0
    failed = [line for line in lines if line.startswith("FAIL")]
    report(capsys, 1, ok and elapsed < 120, f"{len(lines) - 1} checks over 20 seeds, {len(failed)} failed, {elapsed:.1f}s (limit 120s)")


# --------------------------------------------------------------------------
# 2. oracle equivalences


def _brute_local_max(hm):
    out = np.zeros_like(hm)
    c, h, w = hm.shape
    for k in range(c):
        for i in range(h):
            for j in range(w):
                if hm[k, i, j] >= hm[k, max(0, i - 1) : i + 2, max(0, j - 1) : j + 2].max():
                    out[k, i, j] = hm[k, i, j]
    return out


def _reference_nms(dets, thr):
    kept = []
    for d in sorted(dets, key=lambda d: -d.score):
        if all(k.class_id != d.class_id or iou(k.box, d.box) < thr for k in kept):
            kept.append(d)
    return kept


def _full_sort(hm, k):
    cells = sorted((-hm[c, r, x], c, r, x) for c, r, x in zip(*np.nonzero(hm)))
    return [(c, (x, r), -s) for s, c, r, x in cells[:k]]


def test_criterion_2_oracle_equivalences(capsys):
    rng = np.random.default_rng(2024)
    peak_ok = 0
    for m in range(50):
        hm = rng.random((3, 24, 24))
        if m % 2:
            hm = np.round(hm * 5) / 5  # plateaus and ties
        peak_ok += np.array_equal(peak_nms(hm), _brute_local_max(hm))

    xy = rng.uniform(0, 48, (200, 2))
    wh = rng.uniform(4, 20, (200, 2))
    scores = rng.permutation(200) / 200 + 0.001
    dets = [Detection(int(rng.integers(3)), float(s), (x, y, x + w, y + h)) for (x, y), (w, h), s in zip(xy, wh, scores)]
    nms_ok = [(d.class_id, d.score, d.box) for d in iou_nms(dets, 0.5)] == [(d.class_id, d.score, d.box) for d in _reference_nms(dets, 0.5)]

    topk_ok = 0
    for m in range(20):
        hm = np.round(rng.random((3, 16, 16)), 1)
        topk_ok += all(topk_peaks(hm, k) == _full_sort(hm, k) for k in (1, 10, 100, 768))
    ok = peak_ok == 50 and nms_ok and topk_ok == 20
    report(capsys, 2, ok, f"peak_nms {peak_ok}/50 maps exact, iou_nms on 200 boxes {'exact' if nms_ok else 'MISMATCH'}, topk {topk_ok}/20 maps exact")


# --------------------------------------------------------------------------
# 3. radius guarantee


def _single_corner_sweep_ok(w, h, d, t=0.3):
    box = (0.0, 0.0, w, h)
    for dx in range(-d, d + 1):
        for dy in range(-d, d + 1):
            for moved in ((dx, dy, w, h), (0, dy, w + dx, h), (dx, 0, w, h + dy), (0, 0, w + dx, h + dy)):
                if moved[2] <= moved[0] or moved[3] <= moved[1] or iou(box, moved) < t:
                    return False
    return True


def test_criterion_3_radius_guarantee(capsys):
    rng = np.random.default_rng(3)
    sizes = rng.uniform(1, 24, size=(100, 2))
    good = sum(_single_corner_sweep_ok(w, h, math.floor(gaussian_radius(w, h))) for w, h in sizes)
    report(capsys, 3, good == 100, f"{good}/100 random boxes keep IoU >= 0.3 under every single-corner move <= floor(radius)")


# --------------------------------------------------------------------------
# 4. encode/decode round trip


def test_criterion_4_round_trip(capsys):
    cfg = DatasetConfig(objects_per_image=(1, 6))
    worst, found, total = 0.0, 0, 0
    for i in range(50):
        _, boxes, _ = generate_scene(cfg, scene_rng(4, i))
        dets = decode(oracle_outputs(encode_targets(boxes, FULL)), DecoderConfig(), FULL)
        for b in boxes:
            total += 1
            same = [d for d in dets if d.class_id == b.class_id]
            if not same:
                continue
            err = min(np.abs(np.subtract(d.box, b.as_tuple())).max() for d in same)
            found += err < 0.5
            worst = max(worst, err)
    ok = found == total and worst < 0.5
    report(capsys, 4, ok, f"recall {found}/{total} over 50 scenes, max coordinate error {worst:.2e} px (limit 0.5)")


# --------------------------------------------------------------------------
# 5-7. training


def _source_hash():
    h = hashlib.sha256()
    for p in sorted(Path(saccadenet.__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def trained(request):
    """{(variant, seed): (checkpoint, train_seconds)} for the full model and the ablation."""
    key = hashlib.sha256(
        json.dumps([dataclasses.asdict(DATA), dataclasses.asdict(FULL), TRAIN, SEEDS, _source_hash()], sort_keys=True).encode()
    ).hexdigest()[:16]
    cache = Path(request.config.cache.mkdir(f"saccadenet-acceptance-{key}"))
    fresh = os.environ.get("SACCADENET_FRESH_TRAINING") == "1"
    train_set = None
    runs = {}
    for variant, net in (("full", FULL), ("no-aggregation", NO_AGG)):
        for seed in SEEDS:
            ckpt_path = cache / f"{variant}-{seed}.bin"
            meta_path = cache / f"{variant}-{seed}.json"
            if fresh or not (ckpt_path.exists() and meta_path.exists()):
                if train_set is None:
                    train_set, _ = generate_dataset(DATA)
                t0 = time.perf_counter()
                ckpt = train(train_set, net, TrainConfig(seed=seed, **TRAIN))
                seconds = time.perf_counter() - t0
                save_checkpoint(ckpt, ckpt_path)
                meta_path.write_text(json.dumps({"seconds": seconds}))
            runs[variant, seed] = (load_checkpoint(ckpt_path), json.loads(meta_path.read_text())["seconds"])
    return runs


@pytest.fixture(scope="session")
def val_set():
    return generate_dataset(DATA)[1]


@pytest.fixture(scope="session")
def scores(trained, val_set):
    out = {}
    for (variant, seed), (ckpt, _) in trained.items():
        r = evaluate_params(ckpt.params, val_set, ckpt.net_config)
        out[variant, seed] = (r.ap50, r.ap70, r.ap90)
    return out


@pytest.mark.slow
def test_criterion_5_desk_scale_training(trained, scores, capsys):
    ap50 = [scores["full", s][0] for s in SEEDS]
    slowest = max(sec for (v, _), (_, sec) in trained.items())
    epochs = TRAIN["epochs"]
    ok = all(a >= AP50_THRESHOLD for a in ap50) and slowest <= TIME_BUDGET_S and epochs <= 60
    detail = f"val AP@50 per seed {', '.join(f'{a:.3f}' for a in ap50)} (threshold {AP50_THRESHOLD}), {epochs} epochs, slowest run {slowest / 60:.1f} min (budget 30)"
    report(capsys, 5, ok, detail)


@pytest.mark.slow
def test_criterion_6_ablation_direction(scores, capsys):
    full = np.mean([scores["full", s] for s in SEEDS], axis=0)
    abl = np.mean([scores["no-aggregation", s] for s in SEEDS], axis=0)
    gap50, gap90 = full[0] - abl[0], full[2] - abl[2]
    ok = full[2] > abl[2] and gap90 > gap50
    detail = (
        f"mean AP@90 full {full[2]:.3f} vs ablation {abl[2]:.3f}; "
        f"gap at AP@90 {gap90:+.3f} vs gap at AP@50 {gap50:+.3f} (3 seeds)"
    )
    report(capsys, 6, ok, detail)


@pytest.mark.slow
def test_criterion_7_iterative_refinement(trained, val_set, capsys):
    ap70 = {}
    for it in (0, 1, 2):
        vals = []
        for s in SEEDS:
            ckpt = trained["full", s][0]
            vals.append(evaluate_params(ckpt.params, val_set, ckpt.net_config, DecoderConfig(refine_iterations=it)).ap70)
        ap70[it] = float(np.mean(vals))
    ok = ap70[1] >= ap70[0]
    report(capsys, 7, ok, "mean AP@70 by refine iterations " + ", ".join(f"{k}: {v:.3f}" for k, v in ap70.items()))


# --------------------------------------------------------------------------
# 8. NMS benchmark


def test_criterion_8_nms_benchmark(tmp_path, capsys):
    code = main(["bench-nms", "--precheck-maps", "100", "--repeats", "5", "--out", str(tmp_path / "bench")])
    manifest = json.loads((tmp_path / "bench" / "manifest.json").read_text())
    agree = manifest["extra"]["agreement"]
    ok = code == 0 and agree == {"agree": 100, "total": 100} and (tmp_path / "bench" / "bench.json").exists()
    report(capsys, 8, ok, f"bench-nms exit {code}, cross-mode agreement {agree['agree']}/{agree['total']} tie-free maps")


# --------------------------------------------------------------------------
# 9. determinism


def _tree_bytes(root: Path, skip=("manifest.json",)):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


def test_criterion_9_determinism(tmp_path, capsys):
    data_cfg = tmp_path / "data.json"
    data_cfg.write_text(json.dumps({"seed": 9, "num_images": 16, "num_val_images": 4}))
    run_cfg = tmp_path / "run.json"
    run_cfg.write_text(json.dumps({"network": {"head_hidden_channels": 8}, "train": {"epochs": 2, "lr_drop_epoch": 2, "seed": 5}}))
    for tag in ("a", "b"):
        assert main(["gen-data", "--config", str(data_cfg), "--out", str(tmp_path / f"data_{tag}")]) == 0
        assert main(["train", "--data", str(tmp_path / f"data_{tag}"), "--config", str(run_cfg), "--out", str(tmp_path / f"run_{tag}")]) == 0
    data_same = _tree_bytes(tmp_path / "data_a") == _tree_bytes(tmp_path / "data_b")
    log_same = (tmp_path / "run_a" / "train_log.jsonl").read_bytes() == (tmp_path / "run_b" / "train_log.jsonl").read_bytes()
    ckpt_same = (tmp_path / "run_a" / "checkpoint.bin").read_bytes() == (tmp_path / "run_b" / "checkpoint.bin").read_bytes()
    ok = data_same and log_same and ckpt_same
    report(capsys, 9, ok, f"datasets byte-identical: {data_same}, loss logs byte-identical: {log_same}, checkpoints byte-identical: {ckpt_same}")
