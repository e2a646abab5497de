"""Segmentation IoU, detection AP, depth accuracy and grid box coding."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned box; ``x, y`` is the centre, all in normalized image units."""
    class_id: int
    x: float
    y: float
    w: float
    h: float
    confidence: float | None = None

    def corners(self):
        return (self.x - self.w / 2, self.y - self.h / 2, self.x + self.w / 2, self.y + self.h / 2)

    def validate(self):
        if not (0 <= self.x <= 1 and 0 <= self.y <= 1):
            raise ValueError(f"box centre outside image: {self}")
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box must have positive size: {self}")
        return self

    def to_json(self) -> dict:
        d = asdict(self)
        if d["confidence"] is None:
            del d["confidence"]
        return d

    @classmethod
    def from_json(cls, d) -> "Box":
        return cls(**d)


def box_iou(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


# --- segmentation -----------------------------------------------------------

def confusion_matrix(pred, gt, num_classes: int, ignore_id=None) -> np.ndarray:
    """counts[g, p]: pixels of ground-truth class g predicted as p."""
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shape mismatch: {pred.size} vs {gt.size} pixels")
    keep = np.ones(gt.shape, bool) if ignore_id is None else gt != ignore_id
    pred, gt = pred[keep], gt[keep]
    return np.bincount(gt * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray) -> tuple[dict[int, float], float]:
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    per = {c: float(tp[c] / denom[c]) for c in range(len(tp)) if denom[c] > 0}
    mean = float(np.mean(list(per.values()))) if per else 0.0
    return per, mean


def class_iou_report(pred_mask, gt_mask, num_classes: int, ignore_id=None):
    """Per-class Jaccard index and their mean.

    Classes absent from both prediction and ground truth are left out.
    """
    if np.shape(pred_mask) != np.shape(gt_mask):
        raise ValueError(f"mask shape mismatch: {np.shape(pred_mask)} vs {np.shape(gt_mask)}")
    return iou_from_confusion(confusion_matrix(pred_mask, gt_mask, num_classes, ignore_id))


# --- detection --------------------------------------------------------------

def average_precision(tp: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated area under the precision/recall curve."""
    if n_gt == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def match_class(preds: Sequence[tuple[float, int, int, Box]], gts_by_image: Mapping[int, list[Box]],
                iou_threshold: float) -> list[bool]:
    """Greedy one-to-one matching in descending confidence order."""
    order = sorted(preds, key=lambda p: (-p[0], p[1], p[2]))
    used = {img: [False] * len(b) for img, b in gts_by_image.items()}
    flags = []
    for conf, img, _, box in order:
        best, best_j = -1.0, -1
        for j, gt in enumerate(gts_by_image.get(img, ())):
            if used[img][j]:
                continue
            iou = box_iou(box, gt)
            if iou >= iou_threshold and iou > best:
                best, best_j = iou, j
        if best_j >= 0:
            used[img][best_j] = True
        flags.append(best_j >= 0)
    return flags


def detection_ap(preds: Sequence[Sequence[Box]], gts: Sequence[Sequence[Box]],
                 iou_threshold: float = 0.5, num_classes: int | None = None):
    """Per-class AP and their unweighted mean over classes present in the ground truth.

    ``preds[i]`` and ``gts[i]`` are the boxes of image ``i``. Confidence ties
    resolve by image index, then by position in the image's prediction list.
    """
    if len(preds) != len(gts):
        raise ValueError("preds and gts must cover the same images")
    classes = {b.class_id for img in gts for b in img}
    if num_classes is not None:
        classes &= set(range(num_classes))
    per = {}
    for c in sorted(classes):
        gt_c = {i: [b for b in img if b.class_id == c] for i, img in enumerate(gts)}
        n_gt = sum(len(v) for v in gt_c.values())
        p_c = [(b.confidence if b.confidence is not None else 1.0, i, k, b)
               for i, img in enumerate(preds) for k, b in enumerate(img) if b.class_id == c]
        per[c] = average_precision(match_class(p_c, gt_c, iou_threshold), n_gt)
    mean = float(np.mean(list(per.values()))) if per else 0.0
    return per, mean


def encode_boxes(boxes: Iterable[Box], num_classes: int, grid: int) -> np.ndarray:
    """Target grid [5+C, S, S]: objectness, cell offsets, sqrt sizes, one-hot class.

    One box per cell; when two centres share a cell the larger box wins.
    """
    out = np.zeros((5 + num_classes, grid, grid), dtype=np.float64)
    area = np.zeros((grid, grid))
    for b in boxes:
        c = min(int(b.x * grid), grid - 1)
        r = min(int(b.y * grid), grid - 1)
        if out[0, r, c] and area[r, c] >= b.w * b.h:
            continue
        area[r, c] = b.w * b.h
        out[:, r, c] = 0.0
        out[0, r, c] = 1.0
        out[1, r, c] = b.x * grid - c
        out[2, r, c] = b.y * grid - r
        out[3, r, c] = math.sqrt(b.w)
        out[4, r, c] = math.sqrt(b.h)
        out[5 + b.class_id, r, c] = 1.0
    return out


def decode_cell(grid_values: np.ndarray, r: int, c: int) -> tuple[float, float, float, float]:
    s = grid_values.shape[-1]
    tx, ty, tw, th = grid_values[1:5, r, c]
    return (c + tx) / s, (r + ty) / s, float(tw) ** 2, float(th) ** 2


def nms(boxes: Sequence[Box], iou_threshold: float) -> list[Box]:
    """Per-class greedy suppression, highest confidence first (stable)."""
    kept: list[Box] = []
    for b in sorted(boxes, key=lambda b: -b.confidence):
        if all(k.class_id != b.class_id or box_iou(k, b) <= iou_threshold for k in kept):
            kept.append(b)
    return kept


def decode_detections(pred_grid, conf_threshold: float = 0.25, nms_iou: float = 0.45) -> list[Box]:
    """Grid -> boxes. Confidence is objectness times the best class probability."""
    g = np.asarray(pred_grid, dtype=np.float64)
    s = g.shape[-1]
    cands = []
    for r in range(s):
        for c in range(s):
            cls = int(np.argmax(g[5:, r, c]))
            conf = float(g[0, r, c] * g[5 + cls, r, c])
            if conf < conf_threshold or conf <= 0:
                continue
            x, y, w, h = decode_cell(g, r, c)
            x0, y0 = max(0.0, x - w / 2), max(0.0, y - h / 2)
            x1, y1 = min(1.0, x + w / 2), min(1.0, y + h / 2)
            if x1 <= x0 or y1 <= y0:
                continue
            cands.append(Box(cls, (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0, conf))
    return nms(cands, nms_iou)


# --- depth ------------------------------------------------------------------

def depth_accuracy(pred, gt, threshold: float = 1.25, floor: float = 1e-3) -> float:
    """Fraction of pixels with max(pred/gt, gt/pred) < threshold."""
    p = np.maximum(np.asarray(pred, dtype=np.float64), floor)
    g = np.maximum(np.asarray(gt, dtype=np.float64), floor)
    ratio = np.maximum(p / g, g / p)
    return float((ratio < threshold).mean())


# --- report -----------------------------------------------------------------

@dataclass
class MetricsReport:
    per_class_iou: dict = field(default_factory=dict)
    mean_iou: float | None = None
    per_class_ap: dict = field(default_factory=dict)
    mean_ap: float | None = None
    depth_accuracy: float | None = None
    motion_iou: float | None = None
    losses: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["per_class_iou"] = {str(k): v for k, v in self.per_class_iou.items()}
        d["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        return d

    @classmethod
    def from_json(cls, d) -> "MetricsReport":
        d = dict(d)
        d["per_class_iou"] = {int(k): v for k, v in d.get("per_class_iou", {}).items()}
        d["per_class_ap"] = {int(k): v for k, v in d.get("per_class_ap", {}).items()}
        return cls(**d)

    def csv_row(self, model: str, seg_names: Sequence[str], det_names: Sequence[str]) -> list:
        row = [model]
        row += [_fmt(self.per_class_iou.get(i)) for i in range(len(seg_names))]
        row += [_fmt(self.mean_iou)]
        row += [_fmt(self.per_class_ap.get(i)) for i in range(len(det_names))]
        row += [_fmt(self.mean_ap), _fmt(self.depth_accuracy), _fmt(self.motion_iou)]
        return row

    def to_csv(self, model: str, seg_names, det_names) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model"] + [f"IoU {n}" for n in seg_names] + ["mean IoU"]
                   + [f"AP {n}" for n in det_names] + ["mAP", "depth accuracy", "motion IoU"])
        w.writerow(self.csv_row(model, seg_names, det_names))
        return buf.getvalue()


def _fmt(v):
    return "" if v is None else f"{v:.6f}"
