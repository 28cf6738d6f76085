"""Tests for anchor generation, delta coding, matching, refinement and suppression."""
import math

import numpy as np
import pytest

from anchors import (
    NO_MATCH,
    Box,
    decode_deltas,
    encode_deltas,
    filter_negatives,
    generate_anchors,
    iou,
    iou_matrix,
    match_anchors,
    nms,
    pyramid_anchors,
    refine_anchors,
)
from config_manager import AnchorConfig
from constants import AIRCRAFT, BACKGROUND


def _random_boxes(rng, n, extent=200.0, min_side=4.0, max_side=60.0):
    xy = rng.uniform(0, extent, size=(n, 2))
    wh = rng.uniform(min_side, max_side, size=(n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def _brute_iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def _brute_match(anchors, gts, thresh):
    """Threshold assignment, then each gt in turn claims its best unclaimed anchor."""
    n = len(anchors)
    assigned = [NO_MATCH] * n
    for a in range(n):
        best, best_g = -1.0, NO_MATCH
        for g in range(len(gts)):
            v = _brute_iou(anchors[a], gts[g])
            if v > best:
                best, best_g = v, g
        if best >= thresh:
            assigned[a] = best_g
    claimed = set()
    for g in range(len(gts)):
        best, best_a = -1.0, None
        for a in range(n):
            if a in claimed:
                continue
            v = _brute_iou(anchors[a], gts[g])
            if v > best:
                best, best_a = v, a
        claimed.add(best_a)
        assigned[best_a] = g
    return np.array(assigned)


def _brute_nms(boxes, scores, thresh):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(_brute_iou(boxes[i], boxes[k]) <= thresh for k in kept):
            kept.append(i)
    return kept


def test_p2_anchor_geometry():
    cfg = AnchorConfig()
    anchors = generate_anchors(cfg, "P2", 80, 80)
    assert len(anchors) == 19200
    # cell (0, 0): ratios 0.5, 1.0, 2.0 in order
    assert anchors[1].tolist() == [-12.0, -12.0, 20.0, 20.0]
    w = anchors[2, 2] - anchors[2, 0]
    h = anchors[2, 3] - anchors[2, 1]
    assert w == pytest.approx(32 / math.sqrt(2), abs=1e-9)
    assert h == pytest.approx(32 * math.sqrt(2), abs=1e-9)
    assert w * h == pytest.approx(32 * 32)


def test_anchor_cells_run_row_major():
    anchors = generate_anchors(AnchorConfig(), "P3", 2, 3)
    centres = ((anchors[:, :2] + anchors[:, 2:]) / 2)[::3]
    assert centres.tolist() == [[8, 8], [24, 8], [40, 8], [8, 24], [24, 24], [40, 24]]


def test_pyramid_anchor_counts():
    counts = [len(a) for a in pyramid_anchors(AnchorConfig(), 640)]
    assert counts == [19200, 4800, 1200]


def test_iou_examples_and_symmetry():
    assert iou(Box(0, 0, 10, 10), Box(0, 0, 10, 10)) == 1.0
    assert iou(Box(0, 0, 10, 10), Box(20, 20, 30, 30)) == 0.0
    assert iou(Box(0, 0, 10, 10), Box(5, 5, 15, 15)) == pytest.approx(1 / 7, abs=1e-12)
    rng = np.random.default_rng(0)
    a = _random_boxes(rng, 30)
    b = _random_boxes(rng, 20)
    m = iou_matrix(a, b)
    assert np.allclose(m, iou_matrix(b, a).T)
    assert np.all((m >= 0) & (m <= 1))
    assert np.allclose(np.diag(iou_matrix(a, a)), 1.0)


def test_box_validity():
    assert Box(0, 0, 1, 1).is_valid()
    assert not Box(0, 0, 0, 1).is_valid()
    assert Box(2, 3, 6, 11).area == 32


def test_encode_examples():
    assert np.allclose(encode_deltas([0, 0, 32, 32], [0, 0, 32, 32]), 0.0)
    assert encode_deltas([0, 0, 32, 32], [8, 8, 40, 40]).tolist() == pytest.approx([2.5, 2.5, 0.0, 0.0])


def test_encode_decode_round_trip():
    rng = np.random.default_rng(1)
    anchors = _random_boxes(rng, 500)
    gts = _random_boxes(rng, 500)
    boxes, clamped = decode_deltas(anchors, encode_deltas(anchors, gts))
    assert not clamped.any()
    assert np.max(np.abs(boxes - gts)) < 1e-9


def test_decode_clamps_tiny_sides():
    boxes, clamped = decode_deltas(np.array([[0.0, 0.0, 4.0, 4.0]]), np.array([[0.0, 0.0, -20.0, 0.0]]))
    assert clamped.tolist() == [True]
    assert boxes[0, 2] - boxes[0, 0] == pytest.approx(1.0)
    assert boxes[0, 3] - boxes[0, 1] == pytest.approx(4.0)


def test_exact_anchor_match_is_only_positive():
    anchors = np.array([[x, y, x + 16.0, y + 16.0] for y in range(0, 100, 20) for x in range(0, 100, 20)], dtype=float)
    gt = anchors[13:14].copy()
    match = match_anchors(anchors, gt)
    assert np.flatnonzero(match.positive).tolist() == [13]
    assert match.labels[13] == AIRCRAFT
    assert np.allclose(match.targets[13], 0.0)


def test_forced_match_without_overlap_above_threshold():
    anchors = generate_anchors(AnchorConfig(), "P2", 4, 4)
    gt = np.array([[5.0, 5.0, 11.0, 9.0]])
    assert iou_matrix(anchors, gt).max() < 0.5
    match = match_anchors(anchors, gt)
    assert match.num_positive == 1


def test_no_ground_truth_means_all_background():
    anchors = generate_anchors(AnchorConfig(), "P2", 3, 3)
    match = match_anchors(anchors, np.zeros((0, 4)))
    assert match.num_positive == 0
    assert np.all(match.labels == BACKGROUND)


def test_matching_equals_brute_force_on_random_scenes():
    rng = np.random.default_rng(2)
    anchors = generate_anchors(AnchorConfig(), "P3", 8, 8)
    for _ in range(10):
        gts = _random_boxes(rng, int(rng.integers(1, 6)), extent=100.0, min_side=10.0, max_side=80.0)
        match = match_anchors(anchors, gts)
        assert match.gt_index.tolist() == _brute_match(anchors, gts, 0.5).tolist()
        for g in range(len(gts)):
            assert np.any(match.gt_index == g)


def test_refine_zero_deltas_keeps_anchors():
    anchors = generate_anchors(AnchorConfig(), "P4", 2, 2)
    refined = refine_anchors(anchors, np.zeros((len(anchors), 4)), np.zeros((len(anchors), 2)))
    assert np.allclose(refined.boxes, anchors, rtol=0, atol=1e-12)
    assert np.allclose(refined.objectness, 0.5)
    assert np.allclose(refined.objectness + refined.background, 1.0)


def test_refine_with_encoded_deltas_reaches_ground_truth():
    rng = np.random.default_rng(3)
    anchors = _random_boxes(rng, 50)
    gts = _random_boxes(rng, 50)
    refined = refine_anchors(anchors, encode_deltas(anchors, gts), rng.standard_normal((50, 2)))
    assert np.max(np.abs(refined.boxes - gts)) < 1e-9


def test_filter_negatives_predicate():
    assert filter_negatives(np.zeros(5)).tolist() == [0, 1, 2, 3, 4]
    assert filter_negatives(np.ones(5)).tolist() == []
    rng = np.random.default_rng(4)
    bg = rng.uniform(0.95, 1.0, size=200)
    bg[::17] = 0.99
    assert filter_negatives(bg, 0.99).tolist() == [i for i, p in enumerate(bg) if p <= 0.99]


def test_nms_examples():
    boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10], [50, 50, 60, 60]], dtype=float)
    assert nms(boxes, np.array([0.9, 0.8, 0.7])).tolist() == [0, 2]
    assert nms(boxes[[0, 2]], np.array([0.2, 0.6])).tolist() == [1, 0]


def test_nms_equals_brute_force_on_clusters():
    rng = np.random.default_rng(5)
    for _ in range(10):
        centres = rng.uniform(0, 200, size=(4, 2))
        boxes = []
        for c in centres:
            for _ in range(8):
                jitter = rng.normal(0, 4, size=2)
                size = rng.uniform(15, 30, size=2)
                boxes.append([*(c + jitter), *(c + jitter + size)])
        boxes = np.array(boxes)
        scores = rng.uniform(0, 1, size=len(boxes))
        kept = nms(boxes, scores, 0.45, pre_top_k=1000, keep=200)
        assert kept.tolist() == _brute_nms(boxes, scores, 0.45)
        assert np.all(np.diff(scores[kept]) <= 0)
        overlaps = iou_matrix(boxes[kept], boxes[kept])
        np.fill_diagonal(overlaps, 0.0)
        assert np.all(overlaps <= 0.45)


def test_nms_respects_keep_and_pre_top_k():
    boxes = np.array([[i * 20.0, 0, i * 20.0 + 10, 10] for i in range(10)])
    scores = np.linspace(1.0, 0.1, 10)
    assert nms(boxes, scores, keep=3).tolist() == [0, 1, 2]
    assert nms(boxes, scores, pre_top_k=4).tolist() == [0, 1, 2, 3]
