import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from saccadenet.data import (
    CLASS_COLORS,
    AugmentConfig,
    DatasetConfig,
    DatasetFormatError,
    augment,
    circle_mask,
    generate_dataset,
    generate_scene,
    hflip,
    mask_hull,
    read_dataset,
    read_ppm,
    rectangle_mask,
    rescale,
    scene_rng,
    write_dataset,
    write_ppm,
)
from saccadenet.encoder import GtBox
from saccadenet.evaluator import iou

SMALL = DatasetConfig(seed=7, num_images=12, num_val_images=4)


def test_seed_42_is_deterministic():
    cfg = DatasetConfig(seed=42)
    a = generate_scene(cfg, scene_rng(42, 0))
    b = generate_scene(cfg, scene_rng(42, 0))
    assert a[0].tobytes() == b[0].tobytes() and a[1] == b[1]


def test_dataset_is_pure_function_of_config():
    a, _ = generate_dataset(SMALL)
    b, _ = generate_dataset(SMALL)
    for x, y in zip(a.samples, b.samples):
        assert x.image.tobytes() == y.image.tobytes() and x.boxes == y.boxes
    c, _ = generate_dataset(dataclasses.replace(SMALL, seed=8))
    assert any(x.image.tobytes() != y.image.tobytes() for x, y in zip(a.samples, c.samples))


def test_train_and_val_differ():
    tr, va = generate_dataset(SMALL)
    assert all(t.image.tobytes() != v.image.tobytes() for t, v in zip(tr.samples, va.samples))


def test_rectangle_hull():
    assert mask_hull(rectangle_mask(64, 64, 8, 8, 24, 24)) == (8, 8, 24, 24)


def test_circle_hull():
    assert mask_hull(circle_mask(64, 64, 16, 16, 6)) == (10, 10, 22, 22)


@pytest.mark.parametrize("seed", range(30))
def test_scene_invariants(seed):
    cfg = DatasetConfig()
    img, boxes, _ = generate_scene(cfg, scene_rng(3, seed))
    assert img.shape == (3, 64, 64) and img.min() >= 0 and img.max() <= 1
    np.testing.assert_array_equal(np.round(img * 255) / 255, img)
    cells = set()
    for i, b in enumerate(boxes):
        assert 0 <= b.x_min < b.x_max <= 64 and 0 <= b.y_min < b.y_max <= 64
        assert b.width >= 4 and b.height >= 4
        cells.add((int(b.center[0] // 4), int(b.center[1] // 4)))
        for other in boxes[:i]:
            assert iou(b.as_tuple(), other.as_tuple()) <= 0.3
    assert len(cells) == len(boxes)


@pytest.mark.parametrize("seed", range(20))
def test_single_object_box_is_tight_hull_of_pixels(seed):
    cfg = DatasetConfig(objects_per_image=(1, 1), background_noise=0.0)
    img, boxes, _ = generate_scene(cfg, scene_rng(11, seed))
    (b,) = boxes
    fg = np.abs(img - np.round(0.45 * 255) / 255).max(axis=0) > 0.02
    assert mask_hull(fg) == b.as_tuple()


def test_placement_failures_counted():
    cfg = DatasetConfig(objects_per_image=(30, 30), size_range=(0.4, 0.45))
    _, boxes, failures = generate_scene(cfg, scene_rng(0, 0))
    assert failures > 0 and len(boxes) + failures == 30


def test_config_validation():
    with pytest.raises(ValueError):
        DatasetConfig(objects_per_image=(3, 1))
    with pytest.raises(ValueError):
        DatasetConfig(size_range=(0.01, 0.2))  # < 4 px boxes
    with pytest.raises(ValueError):
        DatasetConfig(classes=("hexagon",))
    with pytest.raises(ValueError):
        AugmentConfig(hflip_prob=1.5)
    with pytest.raises(ValueError):
        AugmentConfig(scale_range=(0.0, 1.0))


# --- augmentation


@given(st.integers(0, 10_000))
def test_flip_twice_is_identity(seed):
    cfg = DatasetConfig()
    img, boxes, _ = generate_scene(cfg, scene_rng(5, seed))
    img2, boxes2 = hflip(*hflip(img, boxes))
    np.testing.assert_array_equal(img2, img)
    assert boxes2 == boxes


def test_flip_mirrors_x():
    img = np.zeros((3, 8, 10))
    _, (b,) = hflip(img, [GtBox(0, 1, 2, 4, 6)])
    assert b.as_tuple() == (6, 2, 9, 6)


def test_scale_one_is_identity():
    cfg = DatasetConfig()
    img, boxes, _ = generate_scene(cfg, scene_rng(1, 1))
    out, out_boxes = rescale(img, boxes, 1.0)
    np.testing.assert_allclose(out, img, atol=1e-12)
    for a, b in zip(boxes, out_boxes):
        assert np.abs(np.subtract(a.as_tuple(), b.as_tuple())).max() < 1e-9


def test_scale_half_box():
    _, (b,) = rescale(np.zeros((3, 64, 64)), [GtBox(0, 8, 8, 24, 24)], 0.5)
    assert b.as_tuple() == (20, 20, 28, 28)


def test_scale_up_clips_and_drops():
    img = np.zeros((3, 64, 64))
    boxes = [GtBox(0, 0, 0, 10, 10), GtBox(1, 28, 28, 36, 36), GtBox(2, 0, 20, 16, 44)]
    _, out = rescale(img, boxes, 1.3)
    classes = [b.class_id for b in out]
    assert 0 not in classes  # fully pushed off the canvas
    assert 1 in classes
    # class 2 is clipped at x = 0 but keeps >= 25 % of its area
    clipped = next(b for b in out if b.class_id == 2)
    assert clipped.x_min == 0.0


def test_min_visible_threshold():
    # after s=1.3 the box spans x in [-9.6+..]; keep or drop according to min_visible
    box = GtBox(0, 0, 20, 8, 44)
    _, keep = rescale(np.zeros((3, 64, 64)), [box], 1.3, min_visible=0.0)
    _, drop = rescale(np.zeros((3, 64, 64)), [box], 1.3, min_visible=0.9)
    assert len(keep) == 1 and len(drop) == 0


def test_scale_resamples_content():
    img = np.zeros((1, 8, 8))
    img[0, :, 4:] = 1.0
    out, _ = rescale(img, [], 2.0, fill=0.0)
    # the step edge stays at the centre column boundary under centred zoom
    assert out[0, 0, 3] < 0.5 < out[0, 0, 4]


@pytest.mark.parametrize("seed", range(10))
def test_augment_keeps_class_colors(seed):
    cfg = DatasetConfig(classes=("rectangle",), objects_per_image=(1, 2))
    img, boxes, _ = generate_scene(cfg, scene_rng(9, seed))
    aug_img, aug_boxes = augment(img, boxes, AugmentConfig(hflip_prob=0.5, scale_range=(0.6, 1.3)), np.random.default_rng(seed))
    for b in aug_boxes:
        x0, y0 = int(np.ceil(b.x_min)) + 1, int(np.ceil(b.y_min)) + 1
        x1, y1 = int(np.floor(b.x_max)) - 1, int(np.floor(b.y_max)) - 1
        if x1 <= x0 or y1 <= y0:
            continue
        mean = aug_img[:, y0:y1, x0:x1].mean(axis=(1, 2))
        assert np.argmin(np.abs(CLASS_COLORS - mean).sum(axis=1)) == b.class_id
        assert np.abs(mean - CLASS_COLORS[b.class_id]).max() < 0.15


def test_augment_disabled_is_identity():
    img = np.random.default_rng(0).random((3, 8, 8))
    out, boxes = augment(img, [GtBox(0, 1, 1, 3, 3)], AugmentConfig(enabled=False), np.random.default_rng(0))
    assert out is img and boxes == [GtBox(0, 1, 1, 3, 3)]


# --- storage


def test_write_read_round_trip(tmp_path):
    tr, _ = generate_dataset(SMALL)
    checksum = write_dataset(tr, tmp_path / "train")
    back = read_dataset(tmp_path / "train")
    assert back.checksum == checksum and back.config == SMALL
    for a, b in zip(tr.samples, back.samples):
        assert a.image.tobytes() == b.image.tobytes()
        assert a.boxes == b.boxes and a.name == b.name
    names = sorted(p.name for p in (tmp_path / "train").iterdir())
    assert names[:3] == ["00000.ppm", "00001.ppm", "00002.ppm"]
    line = json.loads((tmp_path / "train" / "labels.jsonl").read_text().splitlines()[0])
    assert set(line) == {"image", "boxes"}
    assert set(line["boxes"][0]) == {"class", "x_min", "y_min", "x_max", "y_max"}


def test_ppm_round_trip(tmp_path):
    img = np.round(np.random.default_rng(0).random((3, 5, 7)) * 255) / 255
    write_ppm(tmp_path / "a.ppm", img)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), img)


def test_truncated_image_names_file(tmp_path):
    tr, _ = generate_dataset(SMALL)
    write_dataset(tr, tmp_path / "d")
    p = tmp_path / "d" / "00003.ppm"
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(DatasetFormatError, match="00003.ppm.*truncated"):
        read_dataset(tmp_path / "d")


def test_bad_ppm_header(tmp_path):
    (tmp_path / "x.ppm").write_bytes(b"P3\n2 2\n255\n")
    with pytest.raises(DatasetFormatError, match="magic"):
        read_ppm(tmp_path / "x.ppm")
    (tmp_path / "y.ppm").write_bytes(b"P6\n2 z\n255\n" + bytes(12))
    with pytest.raises(DatasetFormatError, match="byte 5"):
        read_ppm(tmp_path / "y.ppm")


def test_missing_image_detected(tmp_path):
    tr, _ = generate_dataset(SMALL)
    write_dataset(tr, tmp_path / "d")
    (tmp_path / "d" / "00005.ppm").unlink()
    with pytest.raises(DatasetFormatError, match="missing image 00005.ppm"):
        read_dataset(tmp_path / "d")


def test_malformed_label_line_reports_offset(tmp_path):
    tr, _ = generate_dataset(SMALL)
    write_dataset(tr, tmp_path / "d")
    labels = tmp_path / "d" / "labels.jsonl"
    lines = labels.read_bytes().splitlines(keepends=True)
    offset = len(lines[0]) + len(lines[1])
    lines[2] = b'{"image": "00002.ppm", "boxes": [\n'
    labels.write_bytes(b"".join(lines))
    with pytest.raises(DatasetFormatError, match=f"line 3 \\(byte {offset}\\)"):
        read_dataset(tmp_path / "d")


def test_checksum_mismatch(tmp_path):
    tr, _ = generate_dataset(SMALL)
    write_dataset(tr, tmp_path / "d")
    p = tmp_path / "d" / "00001.ppm"
    raw = bytearray(p.read_bytes())
    raw[-1] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(DatasetFormatError, match="checksum"):
        read_dataset(tmp_path / "d")


def test_missing_labels(tmp_path):
    with pytest.raises(DatasetFormatError, match="labels"):
        read_dataset(tmp_path)
