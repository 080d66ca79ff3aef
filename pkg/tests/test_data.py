import json
import time

import numpy as np
import pytest

from pssdet.data import (AnnotationError, Scene, SynthConfig, generate, generate_scenes, hflip, load_annotations,
                         load_dataset, read_ppm, render_scene, save_annotations, write_ppm)


def same_scene(a, b):
    return (np.array_equal(a.image, b.image) and np.array_equal(a.boxes, b.boxes)
            and np.array_equal(a.classes, b.classes))


def test_same_seed_is_bitwise_identical():
    a, b = generate_scenes(3, 20), generate_scenes(3, 20)
    assert all(same_scene(x, y) for x, y in zip(a, b))
    c = generate_scenes(4, 20)
    assert not all(same_scene(x, y) for x, y in zip(a, c))


def test_per_image_independence():
    full = generate_scenes(9, 12)
    alone = render_scene(9, 7, SynthConfig())
    assert same_scene(full[7], alone)


def test_zero_overlap_cap_gives_disjoint_boxes():
    cfg = SynthConfig(overlap_cap=0.0)
    for s in generate_scenes(1, 100, cfg):
        b = s.boxes
        for i in range(len(b)):
            for j in range(i + 1, len(b)):
                iw = min(b[i, 2], b[j, 2]) - max(b[i, 0], b[j, 0])
                ih = min(b[i, 3], b[j, 3]) - max(b[i, 1], b[j, 1])
                assert iw <= 0 or ih <= 0


def test_class_histogram_near_uniform():
    scenes = generate_scenes(0, 500)
    counts = np.bincount(np.concatenate([s.classes for s in scenes]), minlength=3)
    expected = counts.sum() / 3
    assert np.all(np.abs(counts - expected) <= 0.2 * expected)


def test_objects_valid_and_detectable():
    for s in generate_scenes(2, 200):
        assert 1 <= s.num_objects <= 3
        w = s.boxes[:, 2] - s.boxes[:, 0]
        h = s.boxes[:, 3] - s.boxes[:, 1]
        assert np.all(np.minimum(w, h) >= 6)
        assert np.all(s.boxes[:, :2] >= 0) and np.all(s.boxes[:, 2] <= 64) and np.all(s.boxes[:, 3] <= 64)
        assert s.image.shape == (3, 64, 64) and 0 <= s.image.min() and s.image.max() <= 1


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(min_size=4)
    with pytest.raises(ValueError):
        SynthConfig(height=60)
    with pytest.raises(ValueError):
        SynthConfig(min_objects=4, max_objects=3)


def test_ppm_round_trip(tmp_path):
    img = generate_scenes(5, 1)[0].image
    write_ppm(tmp_path / "a.ppm", img)
    raw = (tmp_path / "a.ppm").read_bytes()
    assert raw.startswith(b"P6\n64 64\n255\n") and len(raw) == len(b"P6\n64 64\n255\n") + 64 * 64 * 3
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)
    (tmp_path / "b.ppm").write_bytes(b"P6\n# comment\n2 1\n255\n" + bytes(range(6)))
    assert read_ppm(tmp_path / "b.ppm").shape == (3, 1, 2)
    (tmp_path / "c.ppm").write_bytes(b"P5\n2 1\n255\n\0\0")
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "c.ppm")


def test_generate_and_load_round_trip(tmp_path):
    scenes = generate(7, 10, tmp_path)
    loaded = load_dataset(tmp_path)
    assert [s.image_id for s in loaded] == [s.image_id for s in scenes]
    assert all(same_scene(a, b) for a, b in zip(scenes, loaded))
    assert json.loads((tmp_path / "annotations.json").read_text())["info"]["seed"] == 7


def test_annotation_round_trip(tmp_path):
    scenes = generate_scenes(8, 30)
    save_annotations(tmp_path / "a.json", scenes)
    back = load_annotations(tmp_path / "a.json")
    save_annotations(tmp_path / "b.json", back)
    assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()


def test_out_of_bounds_box_rejected_with_record_index(tmp_path):
    doc = {"images": [
        {"id": 0, "file": "x.ppm", "width": 64, "height": 64, "objects": [{"class": 0, "bbox": [1, 1, 5, 5]}]},
        {"id": 1, "file": "y.ppm", "width": 64, "height": 64, "objects": [{"class": 0, "bbox": [1, 1, 70, 5]}]},
    ]}
    (tmp_path / "a.json").write_text(json.dumps(doc))
    with pytest.raises(AnnotationError, match="record 1"):
        load_annotations(tmp_path / "a.json")


def test_malformed_annotations(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(AnnotationError, match="malformed"):
        load_annotations(tmp_path / "bad.json")
    (tmp_path / "nofile.json").write_text(json.dumps({"images": [{"id": 0, "width": 64, "height": 64,
                                                                  "objects": []}]}))
    with pytest.raises(AnnotationError, match="record 0"):
        load_annotations(tmp_path / "nofile.json")


def test_500_records_parse_quickly(tmp_path):
    scenes = [Scene(None, np.array([0, 1, 2]), np.tile([[1.0, 2.0, 30.0, 40.0]], (3, 1)), image_id=i,
                    file=f"images/{i:06d}.ppm", width=64, height=64) for i in range(500)]
    save_annotations(tmp_path / "a.json", scenes)
    t0 = time.perf_counter()
    assert len(load_annotations(tmp_path / "a.json")) == 500
    assert time.perf_counter() - t0 < 1.0


def test_hflip():
    img = np.arange(2 * 3 * 4, dtype=float).reshape(2, 3, 4)
    boxes = np.array([[0.0, 1.0, 1.5, 2.0]])
    out, fb = hflip(img, boxes)
    assert np.array_equal(out[:, :, 0], img[:, :, 3])
    assert fb.tolist() == [[2.5, 1.0, 4.0, 2.0]]
    back, bb = hflip(out, fb)
    assert np.array_equal(back, img) and np.array_equal(bb, boxes)
