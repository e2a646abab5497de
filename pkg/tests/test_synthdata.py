import json
import shutil

import numpy as np
import pytest

from mtlab.metrics import Box
from mtlab.synthdata import (MIN_PURITY, TASKS, SceneSpec, box_purity, generate_dataset, generate_sample,
                             ground_depth, horizon_row, in_memory_dataset, load_dataset, validate_sample)


@pytest.fixture(scope="module")
def hundred():
    spec = SceneSpec(seed=123)
    return spec, [generate_sample(spec, i) for i in range(100)]


def test_scene_spec_validation():
    with pytest.raises(ValueError, match="multiple of 32"):
        SceneSpec(image_size=48)
    with pytest.raises(ValueError, match="subset"):
        SceneSpec(det_classes=("cyclist",))
    with pytest.raises(ValueError):
        SceneSpec(moving_fraction=1.5)
    s = SceneSpec(image_size=32, seed=9)
    assert SceneSpec.from_json(json.loads(json.dumps(s.to_json()))) == s


def test_generation_is_deterministic():
    spec = SceneSpec(seed=5)
    a, b = generate_sample(spec, 17), generate_sample(spec, 17)
    assert a.equals(b)
    assert a.frame_curr.tobytes() == b.frame_curr.tobytes()
    assert not a.equals(generate_sample(spec, 18))
    assert not a.equals(generate_sample(SceneSpec(seed=6), 17))


def test_static_scene_when_nothing_moves():
    spec = SceneSpec(moving_fraction=0.0, seed=1)
    for i in range(10):
        s = generate_sample(spec, i)
        assert not s.motion_mask.any()
        assert np.array_equal(s.frame_prev, s.frame_curr)


def test_sample_shapes_and_ranges(hundred):
    spec, samples = hundred
    for s in samples:
        assert s.frame_curr.shape == (3, 64, 64) and s.frame_curr.dtype == np.float32
        assert 0 <= s.frame_curr.min() and s.frame_curr.max() <= 1
        assert s.seg_mask.shape == s.depth.shape == s.motion_mask.shape == (64, 64)
        assert len(s.boxes) <= spec.max_objects


def test_hundred_samples_pass_purity_audit(hundred):
    spec, samples = hundred
    n_boxes = 0
    for s in samples:
        for b in s.boxes:
            sid = spec.seg_classes.index(spec.det_classes[b.class_id])
            assert box_purity(s.seg_mask, b, sid) >= MIN_PURITY
            n_boxes += 1
        validate_sample(s, spec)
    assert n_boxes > 100


def test_every_class_appears(hundred):
    spec, samples = hundred
    hist = np.bincount(np.concatenate([s.seg_mask.ravel() for s in samples]), minlength=len(spec.seg_classes))
    assert (hist > 0).all()
    det = {b.class_id for s in samples for b in s.boxes}
    assert det == set(range(len(spec.det_classes)))


def test_motion_only_on_objects(hundred):
    spec, samples = hundred
    objects = [spec.seg_classes.index(c) for c in spec.det_classes]
    moving = 0
    for s in samples:
        m = s.motion_mask.astype(bool)
        assert not (m & ~np.isin(s.seg_mask, objects)).any()
        moving += m.any()
        if not m.any():
            assert np.array_equal(s.frame_prev, s.frame_curr)
    assert moving > 20


def test_ground_depth_decreases_with_row():
    size = 64
    hz = horizon_row(size)
    rows = np.arange(hz + 1, size)
    d = ground_depth(rows, size)
    assert (np.diff(d) < 0).all()
    assert ground_depth(hz - 3, size) == 1.0


def test_road_depth_strictly_decreasing(hundred):
    spec, samples = hundred
    road = spec.seg_classes.index("road")
    for s in samples[:20]:
        for col in range(0, 64, 7):
            rows = np.nonzero(s.seg_mask[:, col] == road)[0]
            d = s.depth[rows, col]
            assert (np.diff(d)[np.diff(rows) > 0] < 0).all()


def test_validate_catches_bad_box():
    spec = SceneSpec(seed=2)
    s = generate_sample(spec, 0)
    s.boxes = list(s.boxes) + [Box(0, 0.5, 0.1, 0.1, 0.1)]  # sky region
    with pytest.raises(ValueError, match="purity"):
        validate_sample(s, spec, name="sample 7")


# --- dataset I/O ------------------------------------------------------------------

def test_dataset_layout_and_round_trip(tmp_path):
    spec = SceneSpec(image_size=32, seed=3)
    man = generate_dataset(spec, 8, 2, tmp_path / "d")
    assert len(list((tmp_path / "d" / "samples").iterdir())) == 10
    assert (len(man.splits["train"]), len(man.splits["val"])) == (8, 2)
    d0 = tmp_path / "d" / "samples" / "00000"
    assert sorted(p.name for p in d0.iterdir()) == sorted(
        ["frame_prev.tns", "frame_curr.tns", "seg.tns", "depth.tns", "motion.tns", "labels.json"])
    ds = load_dataset(tmp_path / "d")
    mem = in_memory_dataset(spec, 8, 2)
    for i in range(10):
        assert ds.samples[i].equals(mem.samples[i])
    assert [s.seg_mask.tobytes() for s in ds.split("val")] == [s.seg_mask.tobytes() for s in mem.split("val")]


def test_regeneration_is_byte_identical(tmp_path):
    spec = SceneSpec(image_size=32, seed=4)
    generate_dataset(spec, 3, 1, tmp_path / "a", label_drop={"detection": 0.5})
    generate_dataset(spec, 3, 1, tmp_path / "b", label_drop={"detection": 0.5})
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert load_dataset(tmp_path / "a").fingerprint == load_dataset(tmp_path / "b").fingerprint


def test_label_drop_count_is_seeded(tmp_path):
    spec = SceneSpec(image_size=32, seed=8, max_objects=2)
    generate_dataset(spec, 40, 4, tmp_path / "d", label_drop={"detection": 0.5})
    counts = []
    for i in range(44):
        labels = json.loads((tmp_path / "d" / "samples" / f"{i:05d}" / "labels.json").read_text())
        counts.append(labels["boxes"] is None)
        if i >= 40:
            assert labels["boxes"] is not None  # validation samples keep their labels
    n = sum(counts)
    assert 10 <= n <= 30
    ds = load_dataset(tmp_path / "d")
    assert sum("detection" not in s.task_labels_present for s in ds) == n
    shutil.rmtree(tmp_path / "d")
    generate_dataset(spec, 40, 4, tmp_path / "d", label_drop={"detection": 0.5})
    assert sum("detection" not in s.task_labels_present for s in load_dataset(tmp_path / "d")) == n


def test_truncated_tensor_names_file(tmp_path):
    generate_dataset(SceneSpec(image_size=32), 2, 1, tmp_path)
    f = tmp_path / "samples" / "00001" / "depth.tns"
    f.write_bytes(f.read_bytes()[:-10])
    with pytest.raises(ValueError, match=r"00001.*depth\.tns|depth\.tns"):
        load_dataset(tmp_path)


def test_manifest_count_mismatch(tmp_path):
    generate_dataset(SceneSpec(image_size=32), 2, 1, tmp_path)
    shutil.rmtree(tmp_path / "samples" / "00002")
    with pytest.raises(ValueError, match="found 2 on disk"):
        load_dataset(tmp_path)


def test_invariant_violation_names_sample(tmp_path):
    generate_dataset(SceneSpec(image_size=32, seed=2), 2, 0, tmp_path)
    lab = tmp_path / "samples" / "00001" / "labels.json"
    d = json.loads(lab.read_text())
    d["boxes"] = [{"class_id": 0, "x": 0.5, "y": 0.05, "w": 0.1, "h": 0.1}]
    lab.write_text(json.dumps(d))
    with pytest.raises(ValueError, match="sample 1"):
        load_dataset(tmp_path)


def test_ppm_render(tmp_path):
    generate_dataset(SceneSpec(image_size=32), 1, 0, tmp_path, ppm=True)
    blob = (tmp_path / "samples" / "00000" / "frame_curr.ppm").read_bytes()
    assert blob.startswith(b"P6\n32 32\n255\n") and len(blob) == len(b"P6\n32 32\n255\n") + 32 * 32 * 3


def test_tasks_constant():
    assert set(TASKS) == {"segmentation", "detection", "depth", "motion"}


def test_in_memory_label_drop_matches_disk(tmp_path):
    spec = SceneSpec(image_size=32, seed=8, max_objects=2)
    generate_dataset(spec, 12, 2, tmp_path / "d", label_drop={"detection": 0.5})
    disk = load_dataset(tmp_path / "d")
    mem = in_memory_dataset(spec, 12, 2, label_drop={"detection": 0.5})
    assert [s.task_labels_present for s in disk] == [s.task_labels_present for s in mem]
