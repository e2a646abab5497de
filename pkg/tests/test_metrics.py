import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtlab.metrics import (Box, MetricsReport, average_precision, box_iou, class_iou_report,
                           decode_detections, depth_accuracy, detection_ap, encode_boxes, nms)


def corner_box(c, x0, y0, w, h, conf=None, frame=1.0):
    """Build from a top-left corner in an arbitrary frame."""
    return Box(c, (x0 + w / 2) / frame, (y0 + h / 2) / frame, w / frame, h / frame, conf)


# --- box IoU ---------------------------------------------------------------------

def test_box_iou_examples():
    a = Box(0, 0.5, 0.5, 0.2, 0.3)
    assert box_iou(a, a) == pytest.approx(1.0)
    assert box_iou(a, Box(0, 0.1, 0.1, 0.1, 0.1)) == 0.0
    assert box_iou(corner_box(0, 0, 0, 2, 2, frame=4), corner_box(0, 1, 1, 2, 2, frame=4)) == pytest.approx(1 / 7)


def test_box_validation_and_json():
    with pytest.raises(ValueError):
        Box(0, 1.2, 0.5, 0.1, 0.1).validate()
    with pytest.raises(ValueError):
        Box(0, 0.5, 0.5, 0.0, 0.1).validate()
    b = Box(1, 0.25, 0.5, 0.1, 0.2, 0.9)
    assert Box.from_json(json.loads(json.dumps(b.to_json()))) == b
    assert "confidence" not in Box(0, 0.5, 0.5, 0.1, 0.1).to_json()


def pixel_iou(a, b, res=400):
    """Rasterise both boxes on a fine lattice and count."""
    ys, xs = np.mgrid[0:res, 0:res] / res + 0.5 / res
    def inside(bx):
        x0, y0, x1, y1 = bx.corners()
        return (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)
    ia, ib = inside(a), inside(b)
    u = (ia | ib).sum()
    return (ia & ib).sum() / u if u else 0.0


def test_box_iou_matches_lattice_count():
    # boxes snapped to the 1/40 lattice so the raster count is exact
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b = [corner_box(0, *rng.integers(0, 20, 2), *rng.integers(1, 20, 2), frame=40) for _ in range(2)]
        assert box_iou(a, b) == pytest.approx(pixel_iou(a, b), abs=1e-9)


# --- class IoU --------------------------------------------------------------------

def iou_oracle(pred, gt, n, ignore=None):
    per = {}
    for c in range(n):
        tp = fp = fn = 0
        for p, g in zip(pred.ravel(), gt.ravel()):
            if ignore is not None and g == ignore:
                continue
            tp += p == c and g == c
            fp += p == c and g != c
            fn += p != c and g == c
        if tp + fp + fn:
            per[c] = tp / (tp + fp + fn)
    return per, (sum(per.values()) / len(per) if per else 0.0)


def test_iou_trivial_cases():
    gt = np.array([[0, 1], [2, 2]])
    per, mean = class_iou_report(gt, gt, 4)
    assert per == {0: 1.0, 1: 1.0, 2: 1.0} and mean == 1.0
    gt = np.zeros((4, 4), int)
    gt[:2] = 1
    per, _ = class_iou_report(np.zeros((4, 4), int), gt, 2)
    assert per[1] == 0.0
    with pytest.raises(ValueError):
        class_iou_report(np.zeros((2, 2)), np.zeros((2, 3)), 2)


def test_iou_matches_pixel_counting_oracle_200_cases():
    rng = np.random.default_rng(11)
    for _ in range(200):
        n = int(rng.integers(2, 6))
        h, w = rng.integers(1, 17, 2)
        gt = rng.integers(0, n, (h, w))
        pred = np.where(rng.random((h, w)) < 0.6, gt, rng.integers(0, n, (h, w)))
        ignore = n if rng.random() < 0.3 else None
        if ignore is not None:
            gt = np.where(rng.random((h, w)) < 0.2, ignore, gt)
        per, mean = class_iou_report(pred, gt, n + 1 if ignore is not None else n, ignore)
        ref_per, ref_mean = iou_oracle(pred, gt, n, ignore)
        assert per == ref_per
        assert mean == pytest.approx(ref_mean, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_mean_iou_is_one_iff_equal(seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 3, (6, 6))
    _, mean = class_iou_report(gt, gt, 3)
    assert mean == 1.0
    pred = gt.copy()
    pred[rng.integers(0, 6), rng.integers(0, 6)] += 1
    pred %= 3
    assert class_iou_report(pred, gt, 3)[1] < 1.0


# --- AP ------------------------------------------------------------------------------

def ap_oracle(preds, gts, thr=0.5):
    """Exhaustive PR enumeration: walk every rank cutoff, then take the interpolated envelope."""
    classes = sorted({b.class_id for img in gts for b in img})
    out = {}
    for c in classes:
        items = [(b.confidence, i, k, b) for i, img in enumerate(preds) for k, b in enumerate(img)
                 if b.class_id == c]
        items.sort(key=lambda t: (-t[0], t[1], t[2]))
        gt_c = [[b for b in img if b.class_id == c] for img in gts]
        n_gt = sum(map(len, gt_c))
        used = [[False] * len(g) for g in gt_c]
        points = []
        tp = fp = 0
        for _, i, _, b in items:
            cands = [(box_iou(b, g), j) for j, g in enumerate(gt_c[i]) if not used[i][j]]
            cands = [t for t in cands if t[0] >= thr]
            if cands:
                best = max(cands, key=lambda t: (t[0], -t[1]))
                used[i][best[1]] = True
                tp += 1
            else:
                fp += 1
            points.append((tp / n_gt, tp / (tp + fp)))
        ap, prev_r = 0.0, 0.0
        for r, _ in points:
            if r > prev_r:
                ap += (r - prev_r) * max(p for rr, p in points if rr >= r)
                prev_r = r
        out[c] = ap
    return out


def test_ap_trivial_cases():
    gt = [[Box(0, 0.5, 0.5, 0.2, 0.2)]]
    per, mean = detection_ap([[Box(0, 0.5, 0.5, 0.2, 0.2, 0.9)]], gt)
    assert per == {0: 1.0} and mean == 1.0
    assert detection_ap([[]], gt) == ({0: 0.0}, 0.0)
    assert detection_ap([[]], [[]]) == ({}, 0.0)


def test_ap_ten_ranked_four_gt():
    # ranked hits/misses: hand-computed all-point AP
    flags = [1, 0, 1, 1, 0, 0, 0, 1, 0, 0]
    # precision at each hit: 1/1, 2/3, 3/4, 4/8
    expected = 0.25 * (1 + 0.75 + 0.75 + 0.5)
    assert average_precision(flags, 4) == pytest.approx(expected, abs=1e-12)


def _random_instance(rng):
    n_img = int(rng.integers(1, 4))
    gts, preds = [], []
    for _ in range(n_img):
        g = [corner_box(int(rng.integers(0, 2)), *rng.uniform(0, 0.7, 2), *rng.uniform(0.1, 0.3, 2))
             for _ in range(int(rng.integers(0, 5)))]
        p = []
        for b in g:
            if rng.random() < 0.7:
                j = rng.normal(0, 0.04, 2)
                p.append(Box(b.class_id, b.x + j[0], b.y + j[1], b.w, b.h, float(rng.random())))
        p += [corner_box(int(rng.integers(0, 2)), *rng.uniform(0, 0.7, 2), *rng.uniform(0.1, 0.3, 2),
                         conf=float(rng.random())) for _ in range(int(rng.integers(0, 4)))]
        gts.append(g)
        preds.append(p)
    return preds, gts


def test_ap_matches_exhaustive_oracle_200_cases():
    rng = np.random.default_rng(5)
    for _ in range(200):
        preds, gts = _random_instance(rng)
        per, mean = detection_ap(preds, gts)
        ref = ap_oracle(preds, gts)
        assert per.keys() == ref.keys()
        for c in ref:
            assert per[c] == pytest.approx(ref[c], abs=1e-9)


def test_ap_invariant_to_monotone_confidence_transform():
    rng = np.random.default_rng(6)
    for _ in range(50):
        preds, gts = _random_instance(rng)
        warped = [[Box(b.class_id, b.x, b.y, b.w, b.h, float(np.exp(3 * b.confidence) - 0.5)) for b in img]
                  for img in preds]
        assert detection_ap(preds, gts) == detection_ap(warped, gts)


def test_ap_tie_break_is_deterministic():
    gt = [[Box(0, 0.5, 0.5, 0.2, 0.2)], [Box(0, 0.5, 0.5, 0.2, 0.2)]]
    hit, miss = Box(0, 0.5, 0.5, 0.2, 0.2, 0.5), Box(0, 0.1, 0.1, 0.1, 0.1, 0.5)
    a = detection_ap([[hit], [miss]], gt)[0][0]
    b = detection_ap([[miss], [hit]], gt)[0][0]
    assert a == 0.5 and b == pytest.approx(0.25)  # earlier image wins the tied rank


# --- grid coding ------------------------------------------------------------------------

def test_encode_decode_round_trip():
    boxes = [Box(0, 0.3, 0.4, 0.2, 0.1), Box(1, 0.8, 0.7, 0.1, 0.3)]
    grid = encode_boxes(boxes, 2, 8)
    assert grid[0].sum() == 2
    grid = grid.copy()
    out = decode_detections(grid)
    assert sorted((b.class_id, round(b.x, 9), round(b.y, 9), round(b.w, 9), round(b.h, 9)) for b in out) == \
        [(0, 0.3, 0.4, 0.2, 0.1), (1, 0.8, 0.7, 0.1, 0.3)]


def test_encode_larger_box_wins_shared_cell():
    small, big = Box(0, 0.51, 0.51, 0.05, 0.05), Box(1, 0.52, 0.52, 0.2, 0.2)
    for order in ([small, big], [big, small]):
        g = encode_boxes(order, 2, 4)
        assert g[0].sum() == 1 and g[6].sum() == 1


def test_decode_trivial_cases():
    assert decode_detections(np.zeros((7, 4, 4))) == []
    g = np.zeros((7, 4, 4))
    g[:, 2, 1] = [0.9, 0.5, 0.5, 0.5, 0.5, 0.1, 0.9]
    (b,) = decode_detections(g)
    assert (b.class_id, b.x, b.y, b.w, b.h) == (1, 0.375, 0.625, 0.25, 0.25)
    assert b.confidence == pytest.approx(0.81)


def test_nms_suppresses_overlap():
    a = corner_box(0, 0.0, 0.0, 0.4, 0.4, 0.9)
    # same height, shifted so IoU = 0.6
    shift = 0.4 * (1 - 0.6) / (1 + 0.6)
    b = corner_box(0, shift, 0.0, 0.4, 0.4, 0.8)
    assert box_iou(a, b) == pytest.approx(0.6)
    assert nms([b, a], 0.45) == [a]
    other = Box(1, b.x, b.y, b.w, b.h, 0.8)
    assert nms([a, other], 0.45) == [a, other]


# --- depth ----------------------------------------------------------------------------------

def test_depth_accuracy_examples():
    gt = np.random.default_rng(0).uniform(0.1, 1, (8, 8))
    assert depth_accuracy(gt, gt) == 1.0
    assert depth_accuracy(2 * gt, gt) == 0.0


def test_depth_accuracy_matches_loop():
    rng = np.random.default_rng(1)
    p, g = rng.uniform(0, 1, (6, 7)), rng.uniform(0, 1, (6, 7))
    hits = 0
    for a, b in zip(p.ravel(), g.ravel()):
        a, b = max(a, 1e-3), max(b, 1e-3)
        hits += max(a / b, b / a) < 1.25
    assert depth_accuracy(p, g) == hits / p.size


def test_metrics_report_round_trip():
    r = MetricsReport({0: 0.9, 1: 0.5}, 0.7, {0: 0.4}, 0.4, 0.8, None, {"segmentation": 0.1})
    assert MetricsReport.from_json(json.loads(json.dumps(r.to_json()))) == r
    lines = r.to_csv("stl", ["bg", "road"], ["car"]).splitlines()
    assert lines[0].startswith("model,IoU bg,IoU road,mean IoU,AP car")
    assert lines[1] == "stl,0.900000,0.500000,0.700000,0.400000,0.400000,0.800000,"
