"""Anchor boxes: generation, overlap, delta coding, matching, refinement and suppression.

Boxes are (x1, y1, x2, y2) in image pixels. Collections of boxes are numpy
arrays of shape (n, 4); a single box may be passed as a :class:`Box`.
"""
import logging
import math
from typing import List, NamedTuple

import numpy as np

from config_manager import AnchorConfig
from constants import AIRCRAFT, BACKGROUND, LEVELS, VARIANCE_CENTER, VARIANCE_SIZE

logger = logging.getLogger(__name__)

# largest size change a decoded delta may express (exp argument bound)
_MAX_LOG_SCALE = math.log(1000.0 / 16.0)

NO_MATCH = -1


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def is_valid(self) -> bool:
        return self.x2 > self.x1 and self.y2 > self.y1


class MatchResult(NamedTuple):
    gt_index: np.ndarray  # (A,) matched ground truth or NO_MATCH
    labels: np.ndarray    # (A,) class id, BACKGROUND for unmatched
    targets: np.ndarray   # (A, 4) encoded deltas, zero for unmatched

    @property
    def positive(self) -> np.ndarray:
        return self.gt_index != NO_MATCH

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


class Detections(NamedTuple):
    """Detections of one image, highest score first."""

    boxes: np.ndarray   # (n, 4)
    scores: np.ndarray  # (n,)
    labels: np.ndarray  # (n,)

    @classmethod
    def empty(cls) -> "Detections":
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.scores)


class RefinedAnchors(NamedTuple):
    boxes: np.ndarray
    objectness: np.ndarray
    background: np.ndarray
    clamped: np.ndarray


def as_boxes(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 4)
    return arr.reshape(-1, 4)


def generate_anchors(cfg: AnchorConfig, level: str, feature_h: int, feature_w: int) -> np.ndarray:
    """Anchors for every cell of a level, cells row-major and ratios innermost.

    Ratio rho is height over width at constant area: w = scale / sqrt(rho),
    h = scale * sqrt(rho). Cell (x, y) is centred on ((x+0.5)s, (y+0.5)s).
    """
    idx = LEVELS.index(level)
    scale = float(cfg.scales[idx])
    stride = float(cfg.strides[idx])
    ratios = np.asarray(cfg.ratios, dtype=np.float64)
    ws = scale / np.sqrt(ratios)
    hs = scale * np.sqrt(ratios)
    ys, xs = np.meshgrid(np.arange(feature_h), np.arange(feature_w), indexing="ij")
    cx = ((xs.reshape(-1, 1) + 0.5) * stride).repeat(len(ratios), axis=1)
    cy = ((ys.reshape(-1, 1) + 0.5) * stride).repeat(len(ratios), axis=1)
    boxes = np.stack([cx - ws / 2, cy - hs / 2, cx + ws / 2, cy + hs / 2], axis=-1)
    return boxes.reshape(-1, 4)


def pyramid_anchors(cfg: AnchorConfig, input_size: int) -> List[np.ndarray]:
    """Anchors of P2, P3 and P4 for a square input."""
    return [generate_anchors(cfg, level, input_size // s, input_size // s)
            for level, s in zip(LEVELS, cfg.strides)]


def iou(a, b) -> float:
    return float(iou_matrix(as_boxes(a), as_boxes(b))[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU, shape (len(a), len(b))."""
    a = as_boxes(a)
    b = as_boxes(b)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def _centre_size(boxes: np.ndarray):
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    return boxes[..., 0] + 0.5 * w, boxes[..., 1] + 0.5 * h, w, h


def encode_deltas(anchors, gts) -> np.ndarray:
    """(dx, dy, dw, dh) taking ``anchors`` onto ``gts`` under the (0.1, 0.2) variances."""
    anchors = np.asarray(anchors, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    acx, acy, aw, ah = _centre_size(anchors)
    gcx, gcy, gw, gh = _centre_size(gts)
    return np.stack([
        (gcx - acx) / (aw * VARIANCE_CENTER),
        (gcy - acy) / (ah * VARIANCE_CENTER),
        np.log(gw / aw) / VARIANCE_SIZE,
        np.log(gh / ah) / VARIANCE_SIZE,
    ], axis=-1)


def decode_deltas(anchors, deltas):
    """Inverse of :func:`encode_deltas`.

    Returns ``(boxes, clamped)``; decoded sides below one pixel are widened
    to one pixel about their centre and flagged in ``clamped``.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    acx, acy, aw, ah = _centre_size(anchors)
    cx = acx + deltas[..., 0] * VARIANCE_CENTER * aw
    cy = acy + deltas[..., 1] * VARIANCE_CENTER * ah
    w = aw * np.exp(np.minimum(deltas[..., 2] * VARIANCE_SIZE, _MAX_LOG_SCALE))
    h = ah * np.exp(np.minimum(deltas[..., 3] * VARIANCE_SIZE, _MAX_LOG_SCALE))
    clamped = (w < 1.0) | (h < 1.0)
    if np.any(clamped):
        logger.debug("Clamped %d decoded boxes to a one-pixel side", int(np.sum(clamped)))
        w = np.maximum(w, 1.0)
        h = np.maximum(h, 1.0)
    boxes = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)
    return boxes, clamped


def match_anchors(anchors: np.ndarray, gts, pos_thresh: float = 0.5, gt_labels=None) -> MatchResult:
    """Assign ground truths to anchors.

    Every anchor with IoU >= ``pos_thresh`` to some ground truth takes its
    highest-IoU ground truth (lower index on ties). Then each ground truth,
    in order, claims its highest-IoU anchor (lower anchor index on ties) that
    no earlier ground truth has claimed; claimed anchors override the
    threshold assignment so every ground truth keeps at least one anchor.
    """
    anchors = as_boxes(anchors)
    gts = as_boxes(gts)
    n = len(anchors)
    gt_index = np.full(n, NO_MATCH, dtype=np.int64)
    labels = np.full(n, BACKGROUND, dtype=np.int64)
    targets = np.zeros((n, 4), dtype=np.float64)
    if len(gts) == 0 or n == 0:
        return MatchResult(gt_index, labels, targets)
    gt_labels = np.full(len(gts), AIRCRAFT, dtype=np.int64) if gt_labels is None else np.asarray(gt_labels)

    overlaps = iou_matrix(anchors, gts)
    best_gt = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(n), best_gt]
    above = best_iou >= pos_thresh
    gt_index[above] = best_gt[above]

    claimed = np.zeros(n, dtype=bool)
    for g in range(len(gts)):
        order = np.argsort(-overlaps[:, g], kind="mergesort")
        for a in order:
            if not claimed[a]:
                claimed[a] = True
                gt_index[a] = g
                break

    pos = gt_index != NO_MATCH
    labels[pos] = gt_labels[gt_index[pos]]
    targets[pos] = encode_deltas(anchors[pos], gts[gt_index[pos]])
    return MatchResult(gt_index, labels, targets)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def refine_anchors(anchors: np.ndarray, arm_deltas: np.ndarray, arm_scores: np.ndarray) -> RefinedAnchors:
    """Apply ARM deltas to anchors and turn the 2-way ARM logits into probabilities.

    ``arm_scores`` columns are (background, object).
    """
    anchors = as_boxes(anchors)
    boxes, clamped = decode_deltas(anchors, np.asarray(arm_deltas, dtype=np.float64).reshape(-1, 4))
    probs = softmax(np.asarray(arm_scores, dtype=np.float64).reshape(-1, 2))
    return RefinedAnchors(boxes, probs[:, 1], probs[:, 0], clamped)


def filter_negatives(background: np.ndarray, neg_filter: float = 0.99) -> np.ndarray:
    """Indices of anchors whose background probability does not exceed ``neg_filter``."""
    return np.flatnonzero(np.asarray(background) <= neg_filter)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float = 0.45,
        pre_top_k: int = 1000, keep: int = 200) -> np.ndarray:
    """Greedy suppression; returns kept indices in descending score order."""
    boxes = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="mergesort")[:pre_top_k]
    kept: List[int] = []
    while order.size and len(kept) < keep:
        i = order[0]
        kept.append(int(i))
        if order.size == 1:
            break
        overlaps = iou_matrix(boxes[i:i + 1], boxes[order[1:]])[0]
        order = order[1:][overlaps <= iou_thresh]
    return np.asarray(kept, dtype=np.int64)
