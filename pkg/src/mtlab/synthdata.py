"""Deterministic synthetic driving scenes: frame pairs with five label types.

A scene is a ground plane below a horizon: a road trapezoid flanked by
sidewalk bands, with vehicles (rectangles) and persons (ellipses) standing
on it. Object size grows as depth shrinks. Some objects move a few pixels
between the previous and current frame; everything else is static, so the
two frames differ only where something moved.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .metrics import Box
from .tensor import read_tns, write_tns

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
TASKS = ("segmentation", "detection", "depth", "motion")
SAMPLE_FILES = ("frame_prev", "frame_curr", "seg", "depth", "motion")
MIN_PURITY = 0.6


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    seg_classes: tuple[str, ...] = ("background", "road", "sidewalk", "vehicle", "person")
    det_classes: tuple[str, ...] = ("vehicle", "person")
    max_objects: int = 5
    moving_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seg_classes", tuple(self.seg_classes))
        object.__setattr__(self, "det_classes", tuple(self.det_classes))
        if self.image_size % 32 or self.image_size < 32:
            raise ValueError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if not set(self.det_classes) <= set(self.seg_classes):
            raise ValueError("det_classes must be a subset of seg_classes")
        for name in ("background", "road", "sidewalk"):
            if name not in self.seg_classes:
                raise ValueError(f"seg_classes must include '{name}'")
        if not 0 <= self.moving_fraction <= 1:
            raise ValueError("moving_fraction must lie in [0, 1]")
        if self.max_objects < 0:
            raise ValueError("max_objects must be >= 0")

    def to_json(self) -> dict:
        d = asdict(self)
        d["seg_classes"] = list(self.seg_classes)
        d["det_classes"] = list(self.det_classes)
        return d

    @classmethod
    def from_json(cls, d) -> "SceneSpec":
        return cls(**d)


@dataclass
class Sample:
    frame_prev: np.ndarray  # [3,H,W] float32 in [0,1]
    frame_curr: np.ndarray
    seg_mask: np.ndarray  # [H,W] int64 class ids
    boxes: list[Box]
    depth: np.ndarray  # [H,W] float32 in [0,1]
    motion_mask: np.ndarray  # [H,W] int64 in {0,1}
    task_labels_present: frozenset[str] = frozenset(TASKS)

    def equals(self, other: "Sample") -> bool:
        return (all(np.array_equal(getattr(self, f), getattr(other, f))
                    for f in ("frame_prev", "frame_curr", "seg_mask", "depth", "motion_mask"))
                and self.boxes == other.boxes
                and self.task_labels_present == other.task_labels_present)

    def flipped(self) -> "Sample":
        """Left-right mirror image with every label mirrored to match."""
        return Sample(self.frame_prev[:, :, ::-1].copy(), self.frame_curr[:, :, ::-1].copy(),
                      self.seg_mask[:, ::-1].copy(), [replace(b, x=1.0 - b.x) for b in self.boxes],
                      self.depth[:, ::-1].copy(), self.motion_mask[:, ::-1].copy(), self.task_labels_present)


# --- scene geometry ---------------------------------------------------------

def horizon_row(size: int) -> int:
    return int(round(0.375 * size))


def ground_depth(row, size: int):
    """Normalized depth of a ground-plane row; strictly decreasing below the horizon."""
    hz = horizon_row(size)
    r = np.asarray(row, dtype=np.float64)
    return np.where(r <= hz, 1.0, 1.0 / (1.0 + (r - hz) / (0.1 * size)))


@dataclass
class _Object:
    cls: str
    x0: int
    y0: int
    w: int
    h: int
    dx: int
    dy: int
    color: np.ndarray
    texture: np.ndarray

    def mask(self, size: int, shift=(0, 0)) -> np.ndarray:
        m = np.zeros((size, size), dtype=bool)
        x0, y0 = self.x0 - shift[0], self.y0 - shift[1]
        m[y0:y0 + self.h, x0:x0 + self.w] = self.local_mask()
        return m

    def local_mask(self) -> np.ndarray:
        if self.cls != "person":
            return np.ones((self.h, self.w), dtype=bool)
        yy, xx = np.mgrid[0:self.h, 0:self.w]
        ey = (yy + 0.5 - self.h / 2) / (self.h / 2)
        ex = (xx + 0.5 - self.w / 2) / (self.w / 2)
        return ex * ex + ey * ey <= 1.0


PALETTE = {
    "sky": (0.55, 0.72, 0.92),
    "grass": (0.32, 0.55, 0.26),
    "road": (0.38, 0.38, 0.40),
    "sidewalk": (0.78, 0.72, 0.60),
}
VEHICLE_COLORS = np.array([(0.85, 0.15, 0.12), (0.12, 0.22, 0.80), (0.95, 0.85, 0.15), (0.10, 0.10, 0.12)])
PERSON_COLORS = np.array([(0.90, 0.35, 0.75), (0.98, 0.55, 0.10)])


def _place_objects(spec: SceneSpec, rng, road_center, road_half):
    size = spec.image_size
    hz = horizon_row(size)
    lo_row = hz + int(0.5 * (size - hz))
    n = int(rng.integers(0, spec.max_objects + 1))
    placed: list[_Object] = []
    taken = np.zeros((size, size), dtype=bool)
    for _ in range(n):
        cls = spec.det_classes[int(rng.integers(len(spec.det_classes)))]
        moving = rng.random() < spec.moving_fraction
        for _attempt in range(100):
            bottom = int(rng.integers(lo_row, size))
            reach = bottom - hz + 3
            if cls == "person":
                h = max(8, int(round(0.6 * reach)))
                w = max(5, int(round(0.5 * h)))
            else:
                w = max(6, int(round(0.55 * reach)))
                h = max(4, int(round(0.6 * w)))
            if cls == "vehicle":
                cx = road_center + rng.uniform(-0.8, 0.8) * road_half(bottom)
            else:
                cx = rng.uniform(0, size)
            x0 = int(round(cx - w / 2))
            y0 = bottom - h + 1
            dx = dy = 0
            if moving:
                dx = int(rng.integers(2, 7)) * (1 if rng.random() < 0.5 else -1)
                dy = int(rng.integers(-1, 2))
            px0, py0 = x0 - dx, y0 - dy
            if min(x0, y0, px0, py0) < 0 or max(x0, px0) + w > size or max(y0, py0) + h > size:
                continue
            # keep a one-pixel gap to every other object, in both frames
            box_now = (slice(max(0, y0 - 1), y0 + h + 1), slice(max(0, x0 - 1), x0 + w + 1))
            box_prev = (slice(max(0, py0 - 1), py0 + h + 1), slice(max(0, px0 - 1), px0 + w + 1))
            if taken[box_now].any() or taken[box_prev].any():
                continue
            palette = PERSON_COLORS if cls == "person" else VEHICLE_COLORS
            color = palette[int(rng.integers(len(palette)))] + rng.uniform(-0.05, 0.05, 3)
            texture = rng.normal(0.0, 0.03, (3, h, w))
            obj = _Object(cls, x0, y0, w, h, dx, dy, color, texture)
            taken[y0:y0 + h, x0:x0 + w] = True
            taken[py0:py0 + h, px0:px0 + w] = True
            placed.append(obj)
            break
        else:
            log.debug("object skipped after 100 placement attempts")
    return placed


def _render_object(img, obj: _Object, shift=(0, 0)):
    x0, y0 = obj.x0 - shift[0], obj.y0 - shift[1]
    m = obj.local_mask()
    patch = img[:, y0:y0 + obj.h, x0:x0 + obj.w]
    patch[:, m] = (obj.color[:, None, None] + obj.texture)[:, m]


def generate_sample(spec: SceneSpec, index: int) -> Sample:
    """Render sample ``index``; a pure function of ``(spec, index)``."""
    if index < 0:
        raise ValueError("index must be >= 0")
    size = spec.image_size
    rng = np.random.default_rng([spec.seed & 0xFFFFFFFFFFFFFFFF, index])
    cls_id = {n: i for i, n in enumerate(spec.seg_classes)}
    hz = horizon_row(size)

    road_center = size / 2 + rng.uniform(-0.15, 0.15) * size
    top_half = rng.uniform(0.04, 0.08) * size
    bottom_half = rng.uniform(0.30, 0.42) * size
    walk_frac = rng.uniform(0.4, 0.6)

    def road_half(row):
        t = (np.asarray(row, dtype=np.float64) - hz) / (size - 1 - hz)
        return top_half + t * (bottom_half - top_half)

    rows = np.arange(size)[:, None] + 0.5
    cols = np.arange(size)[None, :] + 0.5
    ground = np.broadcast_to(rows > hz + 0.5, (size, size))
    dist = np.abs(cols - road_center)
    half = road_half(rows - 0.5)
    road = ground & (dist <= half)
    walk = ground & ~road & (dist <= half * (1 + walk_frac))

    seg = np.full((size, size), cls_id["background"], dtype=np.int64)
    seg[road] = cls_id["road"]
    seg[walk] = cls_id["sidewalk"]

    img = np.empty((3, size, size))
    sky_shade = 1.0 - 0.25 * (np.arange(size)[:, None] / max(hz, 1))
    img[:] = np.array(PALETTE["sky"])[:, None, None] * sky_shade
    for mask, key in ((ground, "grass"), (walk, "sidewalk"), (road, "road")):
        img[:, mask] = np.array(PALETTE[key])[:, None]
    img += rng.normal(0.0, 0.03, img.shape)

    depth = np.broadcast_to(ground_depth(np.arange(size), size)[:, None], (size, size)).copy()

    objects = _place_objects(spec, rng, road_center, road_half)
    curr = img.copy()
    prev = img.copy()
    motion = np.zeros((size, size), dtype=np.int64)
    boxes = []
    for obj in sorted(objects, key=lambda o: o.y0 + o.h):
        m = obj.mask(size)
        seg[m] = cls_id[obj.cls]
        depth[m] = ground_depth(obj.y0 + obj.h - 1, size)
        _render_object(curr, obj)
        _render_object(prev, obj, shift=(obj.dx, obj.dy))
        if obj.dx or obj.dy:
            motion[m] = 1
        boxes.append(Box(spec.det_classes.index(obj.cls), (obj.x0 + obj.w / 2) / size,
                         (obj.y0 + obj.h / 2) / size, obj.w / size, obj.h / size))
    return Sample(np.clip(prev, 0, 1).astype(np.float32), np.clip(curr, 0, 1).astype(np.float32),
                  seg, boxes, depth.astype(np.float32), motion)


# --- validation -------------------------------------------------------------

def box_purity(seg: np.ndarray, box: Box, seg_id: int) -> float:
    size = seg.shape[0]
    x0, y0, x1, y1 = (int(round(v * size)) for v in box.corners())
    region = seg[max(0, y0):y1, max(0, x0):x1]
    return float((region == seg_id).mean()) if region.size else 0.0


def validate_sample(sample: Sample, spec: SceneSpec, name: str = "sample") -> None:
    size = spec.image_size
    problems = []
    for f in ("frame_prev", "frame_curr"):
        a = getattr(sample, f)
        if a.shape != (3, size, size) or a.min() < 0 or a.max() > 1:
            problems.append(f"{f} must be [3,{size},{size}] within [0,1]")
    for f in ("seg_mask", "depth", "motion_mask"):
        if getattr(sample, f).shape != (size, size):
            problems.append(f"{f} must be [{size},{size}]")
    if problems:
        raise ValueError(f"{name}: " + "; ".join(problems))
    seg = sample.seg_mask
    if seg.min() < 0 or seg.max() >= len(spec.seg_classes):
        problems.append("segmentation ids out of range")
    if not np.isin(sample.motion_mask, (0, 1)).all():
        problems.append("motion mask is not binary")
    obj_ids = [spec.seg_classes.index(c) for c in spec.det_classes]
    if (sample.motion_mask.astype(bool) & ~np.isin(seg, obj_ids)).any():
        problems.append("motion mask marks non-object pixels")
    if sample.depth.min() < 0 or sample.depth.max() > 1:
        problems.append("depth outside [0,1]")
    road = seg == spec.seg_classes.index("road")
    d = np.where(road, sample.depth, np.nan)
    steps = np.diff(d, axis=0)
    if (steps[np.isfinite(steps)] >= 0).any():
        problems.append("road depth does not decrease with row")
    for b in sample.boxes:
        sid = spec.seg_classes.index(spec.det_classes[b.class_id])
        if box_purity(seg, b, sid) < MIN_PURITY:
            problems.append(f"box {b} below {MIN_PURITY:.0%} class purity")
    if problems:
        raise ValueError(f"{name}: " + "; ".join(problems))


# --- dataset I/O --------------------------------------------------------------

@dataclass
class Manifest:
    spec: SceneSpec
    num_samples: int
    splits: dict[str, list[int]]
    label_drop: dict[str, float] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def to_json(self) -> dict:
        return {"format_version": self.format_version, "spec": self.spec.to_json(),
                "num_samples": self.num_samples, "splits": self.splits,
                "label_drop": self.label_drop}

    @classmethod
    def from_json(cls, d) -> "Manifest":
        return cls(SceneSpec.from_json(d["spec"]), int(d["num_samples"]),
                   {k: list(v) for k, v in d["splits"].items()},
                   dict(d.get("label_drop", {})), int(d.get("format_version", FORMAT_VERSION)))


def sample_dir(root, index: int) -> Path:
    return Path(root) / "samples" / f"{index:05d}"


def _dropped_tasks(spec: SceneSpec, index: int, label_drop) -> set[str]:
    rng = np.random.default_rng([spec.seed & 0xFFFFFFFFFFFFFFFF, index, 0xD209])
    # one draw per task in fixed order, so adding a task never reshuffles others
    draws = {t: rng.random() for t in TASKS}
    return {t for t, rate in label_drop.items() if draws[t] < rate}


def write_sample(root, index: int, sample: Sample, ppm=False) -> None:
    d = sample_dir(root, index)
    d.mkdir(parents=True, exist_ok=True)
    write_tns(d / "frame_prev.tns", sample.frame_prev)
    write_tns(d / "frame_curr.tns", sample.frame_curr)
    write_tns(d / "seg.tns", sample.seg_mask)
    write_tns(d / "depth.tns", sample.depth)
    write_tns(d / "motion.tns", sample.motion_mask)
    labels = {
        "boxes": [b.to_json() for b in sample.boxes] if "detection" in sample.task_labels_present else None,
        "task_labels_present": sorted(sample.task_labels_present),
    }
    (d / "labels.json").write_text(json.dumps(labels, indent=1, sort_keys=True) + "\n")
    if ppm:
        write_ppm(d / "frame_curr.ppm", sample.frame_curr)
        write_ppm(d / "frame_prev.ppm", sample.frame_prev)


def write_ppm(path, image: np.ndarray) -> None:
    img = (np.clip(np.asarray(image).transpose(1, 2, 0), 0, 1) * 255 + 0.5).astype(np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def generate_dataset(spec: SceneSpec, n_train: int, n_val: int, out_dir,
                     label_drop: dict[str, float] | None = None, ppm=False) -> Manifest:
    """Write ``n_train + n_val`` samples; label dropping only touches training samples."""
    label_drop = dict(label_drop or {})
    for t, rate in label_drop.items():
        if t not in TASKS or not 0 <= rate <= 1:
            raise ValueError(f"bad label drop entry {t}={rate}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = list(range(n_train))
    val = list(range(n_train, n_train + n_val))
    for i in train + val:
        s = generate_sample(spec, i)
        if i < n_train and label_drop:
            s.task_labels_present = frozenset(TASKS) - _dropped_tasks(spec, i, label_drop)
        write_sample(out, i, s, ppm=ppm)
    man = Manifest(spec, n_train + n_val, {"train": train, "val": val}, label_drop)
    (out / "manifest.json").write_text(json.dumps(man.to_json(), indent=1, sort_keys=True) + "\n")
    return man


def read_sample(root, index: int, spec: SceneSpec) -> Sample:
    d = sample_dir(root, index)
    labels_path = d / "labels.json"
    try:
        labels = json.loads(labels_path.read_text())
    except (OSError, ValueError) as exc:
        raise ValueError(f"{labels_path}: cannot read labels ({exc})") from None
    arr = {f: read_tns(d / f"{f}.tns") for f in SAMPLE_FILES}
    boxes = [Box.from_json(b) for b in labels["boxes"]] if labels.get("boxes") is not None else []
    return Sample(arr["frame_prev"], arr["frame_curr"], arr["seg"].astype(np.int64), boxes,
                  arr["depth"], arr["motion"].astype(np.int64),
                  frozenset(labels.get("task_labels_present", TASKS)))


@dataclass
class Dataset:
    root: Path
    manifest: Manifest
    samples: dict[int, Sample]
    fingerprint: str

    @property
    def spec(self) -> SceneSpec:
        return self.manifest.spec

    def split(self, name: str) -> list[Sample]:
        return [self.samples[i] for i in self.manifest.splits[name]]

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples[i] for i in sorted(self.samples))


def load_dataset(root, validate=True) -> Dataset:
    root = Path(root)
    mpath = root / "manifest.json"
    try:
        man = Manifest.from_json(json.loads(mpath.read_text()))
    except (OSError, ValueError, KeyError) as exc:
        raise ValueError(f"{mpath}: invalid manifest ({exc})") from None
    ids = sorted(i for ids in man.splits.values() for i in ids)
    if ids != list(range(man.num_samples)):
        raise ValueError(f"{mpath}: splits do not cover samples 0..{man.num_samples - 1} exactly once")
    on_disk = sorted(p.name for p in (root / "samples").iterdir()) if (root / "samples").is_dir() else []
    if len(on_disk) != man.num_samples:
        raise ValueError(f"{mpath}: manifest lists {man.num_samples} samples, found {len(on_disk)} on disk")
    digest = hashlib.sha256(mpath.read_bytes())
    samples = {}
    for i in ids:
        d = sample_dir(root, i)
        for f in SAMPLE_FILES:
            digest.update((d / f"{f}.tns").read_bytes() if (d / f"{f}.tns").exists() else b"")
        s = read_sample(root, i, man.spec)
        if validate:
            validate_sample(s, man.spec, name=f"sample {i} ({d})")
        samples[i] = s
        digest.update((d / "labels.json").read_bytes())
    return Dataset(root, man, samples, digest.hexdigest()[:16])


def in_memory_dataset(spec: SceneSpec, n_train: int, n_val: int,
                      label_drop: dict[str, float] | None = None) -> Dataset:
    """Same samples as :func:`generate_dataset` without touching disk."""
    label_drop = dict(label_drop or {})
    samples = {i: generate_sample(spec, i) for i in range(n_train + n_val)}
    for i in range(n_train):
        if label_drop:
            samples[i].task_labels_present = frozenset(TASKS) - _dropped_tasks(spec, i, label_drop)
    man = Manifest(spec, n_train + n_val, {"train": list(range(n_train)),
                                            "val": list(range(n_train, n_train + n_val))}, label_drop)
    h = hashlib.sha256(json.dumps(man.to_json(), sort_keys=True).encode()).hexdigest()[:16]
    return Dataset(Path("<memory>"), man, samples, h)
