"""Detection evaluation: COCO-style AP suite, precision/recall/F1 and PR curves.

Only the aircraft class is evaluated. Boxes are (x1, y1, x2, y2) pixels.
"""
import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from anchors import Detections, as_boxes, iou_matrix  # noqa: E402
from config_manager import EvalConfig  # noqa: E402
from constants import AREA_MEDIUM, AREA_SMALL, IOU_THRESHOLDS, MAX_DETS_PER_IMAGE, RECALL_POINTS  # noqa: E402
from utils import atomic_write_bytes, atomic_write_text, ordered_map  # noqa: E402

logger = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = "afran"

RECALL_GRID = np.linspace(0.0, 1.0, RECALL_POINTS)

# (name, predicate on box area)
AREA_RANGES = (
    ("all", lambda a: np.ones_like(a, dtype=bool)),
    ("small", lambda a: a < AREA_SMALL),
    ("medium", lambda a: (a >= AREA_SMALL) & (a <= AREA_MEDIUM)),
    ("large", lambda a: a > AREA_MEDIUM),
)

CURVE_THRESHOLDS = {"iou50": 0.5, "iou75": 0.75}
CURVE_HEADER = ("recall", "precision")


def box_areas(boxes) -> np.ndarray:
    b = as_boxes(boxes)
    return (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])


class ImageMatch(NamedTuple):
    """Matching outcome of one image for every IoU threshold of one area range."""

    scores: np.ndarray    # (D,) detection scores, highest first
    matched: np.ndarray   # (T, D) detection matched a ground truth
    ignored: np.ndarray   # (T, D) detection excluded from the count
    num_gt: int           # ground truths inside the area range


def match_image(det_boxes: np.ndarray, det_scores: np.ndarray, gt_boxes: np.ndarray,
                gt_ignore: np.ndarray, iou_thresholds: Sequence[float],
                det_ignore_area: np.ndarray | None = None) -> ImageMatch:
    """Greedy highest-score-first matching of one image.

    Each detection takes the unmatched ground truth of highest IoU at or
    above the threshold; in-range ground truths are preferred over ignored
    ones. A detection matched to an ignored ground truth is ignored, as is an
    unmatched detection whose own area falls outside the range.
    """
    det_boxes = as_boxes(det_boxes)
    det_scores = np.asarray(det_scores, dtype=np.float64)
    gt_boxes = as_boxes(gt_boxes)
    gt_ignore = np.asarray(gt_ignore, dtype=bool)

    d_order = np.argsort(-det_scores, kind="mergesort")
    det_boxes = det_boxes[d_order]
    det_scores = det_scores[d_order]
    g_order = np.argsort(gt_ignore, kind="mergesort")
    gt_boxes = gt_boxes[g_order]
    gt_ignore = gt_ignore[g_order]

    t_count, d_count, g_count = len(iou_thresholds), len(det_boxes), len(gt_boxes)
    matched = np.zeros((t_count, d_count), dtype=bool)
    ignored = np.zeros((t_count, d_count), dtype=bool)
    if d_count and g_count:
        overlaps = iou_matrix(det_boxes, gt_boxes)
        for t, thresh in enumerate(iou_thresholds):
            gt_taken = np.zeros(g_count, dtype=bool)
            for d in range(d_count):
                best = min(thresh, 1 - 1e-10)
                m = -1
                for g in range(g_count):
                    if gt_taken[g]:
                        continue
                    if m > -1 and not gt_ignore[m] and gt_ignore[g]:
                        break
                    if overlaps[d, g] < best:
                        continue
                    best = overlaps[d, g]
                    m = g
                if m == -1:
                    continue
                gt_taken[m] = True
                matched[t, d] = True
                ignored[t, d] = gt_ignore[m]
    if det_ignore_area is not None and d_count:
        outside = np.asarray(det_ignore_area, dtype=bool)[d_order]
        ignored |= ~matched & outside[None, :]
    return ImageMatch(det_scores, matched, ignored, int(np.sum(~gt_ignore)))


def interpolated_precision(matches: Sequence[ImageMatch], t: int) -> Tuple[Optional[float], List[Tuple[float, float]]]:
    """101-point interpolated AP at threshold index ``t`` plus the sampled curve.

    Detections of all images are ranked by score with a stable sort over the
    image-then-rank concatenation, so equal scores keep image order. Returns
    ``(None, [])`` when no ground truth is in range.
    """
    num_gt = sum(m.num_gt for m in matches)
    if num_gt == 0:
        return None, []
    scores = np.concatenate([m.scores for m in matches])
    matched = np.concatenate([m.matched[t] for m in matches])
    ignored = np.concatenate([m.ignored[t] for m in matches])
    order = np.argsort(-scores, kind="mergesort")
    keep = order[~ignored[order]]
    tp = np.cumsum(matched[keep])
    fp = np.cumsum(~matched[keep])
    if tp.size == 0:
        return 0.0, []
    recall = tp / num_gt
    precision = tp / (tp + fp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    valid = idx < len(precision)
    sampled = np.zeros(RECALL_POINTS)
    sampled[valid] = precision[idx[valid]]
    curve = [(float(r), float(p)) for r, p, ok in zip(RECALL_GRID, sampled, valid) if ok]
    return float(sampled.mean()), curve


@dataclass(frozen=True)
class EvalReport:
    AP: Optional[float]
    AP50: Optional[float]
    AP75: Optional[float]
    APs: Optional[float]
    APm: Optional[float]
    APl: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    F1: Optional[float]
    num_images: int
    num_gt: int
    num_detections: int
    pr_curves: Dict[str, List[Tuple[float, float]]] = field(default_factory=dict)
    params_total: Optional[int] = None
    mac_total: Optional[int] = None
    anchor_alignment: Optional[dict] = None

    def to_dict(self) -> dict:
        data = asdict(self)
        data["pr_curves"] = {k: [list(p) for p in v] for k, v in self.pr_curves.items()}
        return data

    def with_extras(self, **extras) -> "EvalReport":
        return replace(self, **extras)


def _mean_or_none(values: Sequence[Optional[float]]) -> Optional[float]:
    if any(v is None for v in values):
        return None
    return float(np.mean(values))


def _above(dets: Detections, thresh: float) -> Detections:
    keep = np.asarray(dets.scores) >= thresh
    return Detections(as_boxes(dets.boxes)[keep], np.asarray(dets.scores)[keep], np.asarray(dets.labels)[keep])


def _image_matches(item) -> Dict[str, ImageMatch]:
    dets, gts = item
    gts = as_boxes(gts)
    gt_area = box_areas(gts)
    det_area = box_areas(dets.boxes)
    order = np.argsort(-np.asarray(dets.scores), kind="mergesort")[:MAX_DETS_PER_IMAGE]
    boxes = as_boxes(dets.boxes)[order]
    scores = np.asarray(dets.scores)[order]
    out = {}
    for name, in_range in AREA_RANGES:
        out[name] = match_image(boxes, scores, gts, ~in_range(gt_area), IOU_THRESHOLDS,
                                det_ignore_area=~in_range(det_area[order]))
    return out


def precision_recall_f1(detections: Sequence[Detections], annotations: Sequence[np.ndarray],
                        conf_thresh: float = 0.5, iou_thresh: float = 0.5):
    """Counts at a single operating point: (precision, recall, F1).

    Precision is absent without detections, recall without ground truths.
    """
    tp = num_det = num_gt = 0
    for dets, gts in zip(detections, annotations):
        kept = _above(dets, conf_thresh)
        gts = as_boxes(gts)
        m = match_image(kept.boxes, kept.scores, gts, np.zeros(len(gts), dtype=bool), (iou_thresh,))
        tp += int(m.matched[0].sum())
        num_det += len(kept)
        num_gt += len(gts)
    p = tp / num_det if num_det else None
    r = tp / num_gt if num_gt else None
    if p is None or r is None:
        f1 = None
    else:
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def evaluate(detections: Sequence[Detections], annotations: Sequence[np.ndarray],
             cfg: EvalConfig = EvalConfig(), workers: int | None = None) -> EvalReport:
    """AP suite at ``cfg.ap_conf_thresh`` and P/R/F1 at ``cfg.pr_conf_thresh``.

    ``annotations[n]`` holds the (k, 4) ground-truth boxes of image n.
    """
    if len(detections) != len(annotations):
        raise ValueError(f"evaluate: {len(detections)} detection sets for {len(annotations)} images")
    filtered = [_above(d, cfg.ap_conf_thresh) for d in detections]
    per_image = ordered_map(_image_matches, list(zip(filtered, annotations)), workers)

    def area_ap(name: str, t: int):
        return interpolated_precision([m[name] for m in per_image], t)

    ap_all = [area_ap("all", t)[0] for t in range(len(IOU_THRESHOLDS))]
    curves = {}
    for key, thresh in CURVE_THRESHOLDS.items():
        curves[key] = area_ap("all", IOU_THRESHOLDS.index(thresh))[1]
    sized = {name: _mean_or_none([area_ap(name, t)[0] for t in range(len(IOU_THRESHOLDS))])
             for name, _ in AREA_RANGES[1:]}
    p, r, f1 = precision_recall_f1(detections, annotations, cfg.pr_conf_thresh, cfg.pr_iou_thresh)
    num_gt = int(sum(len(as_boxes(g)) for g in annotations))
    if num_gt == 0:
        logger.warning("Evaluating %d images without ground truth; AP is absent", len(annotations))
    return EvalReport(
        AP=_mean_or_none(ap_all),
        AP50=ap_all[IOU_THRESHOLDS.index(0.5)],
        AP75=ap_all[IOU_THRESHOLDS.index(0.75)],
        APs=sized["small"], APm=sized["medium"], APl=sized["large"],
        precision=p, recall=r, F1=f1,
        num_images=len(annotations), num_gt=num_gt,
        num_detections=int(sum(len(d) for d in detections)),
        pr_curves=curves,
    )


# ── detections interchange ───────────────────────────────────────────────────

def detections_to_record(image_id: str, dets: Detections) -> dict:
    return {
        "image_id": image_id,
        "boxes": as_boxes(dets.boxes).tolist(),
        "scores": np.asarray(dets.scores, dtype=np.float64).tolist(),
        "labels": np.asarray(dets.labels, dtype=np.int64).tolist(),
    }


def write_detections(path: Path, records: Sequence[Tuple[str, Detections]]) -> Path:
    """One JSON line per image: {image_id, boxes, scores, labels}."""
    lines = [json.dumps(detections_to_record(i, d), sort_keys=True) for i, d in records]
    return atomic_write_text(Path(path), "".join(line + "\n" for line in lines))


def read_detections(path: Path) -> List[Tuple[str, Detections]]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                dets = Detections(as_boxes(rec["boxes"]), np.asarray(rec["scores"], dtype=np.float64),
                                  np.asarray(rec["labels"], dtype=np.int64))
                out.append((str(rec["image_id"]), dets))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed detections record: {exc}") from exc
    return out


# ── curves ───────────────────────────────────────────────────────────────────

def save_svg(fig, target: Path) -> Path:
    """Render ``fig`` to SVG without a timestamp so reruns give identical bytes."""
    buf = io.BytesIO()
    try:
        fig.savefig(buf, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
    return atomic_write_bytes(Path(target), buf.getvalue())


def _write_curve_csv(target: Path, points: Sequence[Tuple[float, float]]) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_HEADER)
    for r, p in points:
        writer.writerow((repr(float(r)), repr(float(p))))
    return atomic_write_text(target, buf.getvalue())


def plot_pr_curves(curves: Dict[str, List[Tuple[float, float]]], target: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    for key, points in curves.items():
        if points:
            r, p = zip(*points)
            ax.plot(r, p, label=f"IoU {CURVE_THRESHOLDS.get(key, key)}")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    if any(curves.values()):
        ax.legend(loc="lower left")
    return save_svg(fig, target)


def plot_loss_curves(rows: Sequence[dict], target: Path) -> Path:
    """Per-step loss components from the training log."""
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [int(r["step"]) for r in rows]
    for key in ("L_total", "L_ARM", "L_ADM"):
        ax.plot(steps, [float(r[key]) for r in rows], label=key)
    ax.set_xlabel("Step")
    ax.set_ylabel("Loss")
    if rows:
        ax.legend(loc="upper right")
    return save_svg(fig, target)


def emit_curves(report: EvalReport, out_dir: Path, loss_rows: Sequence[dict] | None = None) -> List[Path]:
    """Write PR curves (CSV per IoU threshold and one SVG) and, given log rows, the loss curves SVG."""
    out_dir = Path(out_dir)
    written = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for key in CURVE_THRESHOLDS:
            written.append(_write_curve_csv(out_dir / f"pr_curve_{key}.csv", report.pr_curves.get(key, [])))
        written.append(plot_pr_curves(report.pr_curves, out_dir / "pr_curves.svg"))
        if loss_rows is not None:
            written.append(plot_loss_curves(loss_rows, out_dir / "loss_curves.svg"))
    except OSError as exc:
        logger.error("Could not write curves to %s: %s", out_dir, exc)
        raise
    logger.info("Wrote %d curve files to %s", len(written), out_dir)
    return written
