"""The assembled detector: parameters, training loss and inference."""
import logging
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Sequence, Tuple

import numpy as np

from adm_head import adm_forward, arm_forward, head_layers
from anchors import (
    Detections,
    decode_deltas,
    filter_negatives,
    iou_matrix,
    match_anchors,
    nms,
    pyramid_anchors,
    refine_anchors,
    softmax,
)
from backbone import backbone_forward, backbone_layers, build_pyramid, pyramid_layers
from checkpoint import check_compatible, load_checkpoint
from config_manager import NetConfig
from constants import LEVELS
from conv_ops import LayerSpec, Params, init_layer_params
from deform_ops import dlcm_zero_init
from losses import HeadTargets, LossReport, total_loss
from tensor import Tensor, anchor_rows, concat, no_grad

logger = logging.getLogger(__name__)


def to_tensor(images: Sequence[np.ndarray]) -> Tensor:
    """Stack 8-bit single-channel images into an (N, 1, H, W) input scaled to [0, 1]."""
    stack = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    return Tensor(stack[:, None, :, :] / 255.0)


def layer_table(net: NetConfig) -> List[LayerSpec]:
    """Every parameterised layer of the network, in parameter order."""
    return backbone_layers(net) + pyramid_layers(net) + head_layers(net)


class RowLayout(NamedTuple):
    """Per-row bookkeeping for anchor rows of a batch.

    Rows run level by level; inside a level, image by image, then cells
    row-major, then anchors.
    """

    image: np.ndarray
    level: np.ndarray
    cell_x: np.ndarray
    cell_y: np.ndarray
    anchors: np.ndarray

    def rows_of_image(self, n: int) -> np.ndarray:
        return np.flatnonzero(self.image == n)


@dataclass
class ForwardPass:
    pyramid: Tuple[Tensor, Tensor, Tensor]
    arm_logits: Tensor  # (R, 2, 1, 1)
    arm_deltas: Tensor  # (R, 4, 1, 1)
    layout: RowLayout


class AnchorAlignment(NamedTuple):
    """How well a set of anchors covers the ground truths."""

    mean_max_iou: float | None
    max_iou: float | None
    anchors_over_half: int
    num_gt: int = 0

    def as_dict(self) -> dict:
        return {"mean_max_iou": self.mean_max_iou, "max_iou": self.max_iou,
                "anchors_iou_ge_0.5": self.anchors_over_half, "num_gt": self.num_gt}

    @classmethod
    def merge(cls, parts: Sequence["AnchorAlignment"]) -> "AnchorAlignment":
        """Combine statistics of disjoint image batches."""
        counted = [p for p in parts if p.num_gt]
        over = sum(p.anchors_over_half for p in parts)
        if not counted:
            return cls(None, None, over, 0)
        total = sum(p.num_gt for p in counted)
        mean = sum(p.mean_max_iou * p.num_gt for p in counted) / total
        return cls(mean, max(p.max_iou for p in counted), over, total)


class AfranNet:
    """Parameters plus the forward, loss and detection passes of the detector."""

    def __init__(self, net: NetConfig, params: Params | None = None, seed: int = 0):
        self.net = net
        self.layers = layer_table(net)
        self.params = params if params is not None else self.init_params(np.random.default_rng(seed))
        self._layouts: Dict[Tuple[int, int], RowLayout] = {}

    def init_params(self, rng: np.random.Generator) -> Params:
        heads = [l.name for l in self.layers if l.name.startswith(("arm.", "adm.")) and not l.name.endswith(".deform")]
        return init_layer_params(self.layers, rng, zero_init=dlcm_zero_init(self.layers), small_init=heads)

    def parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self.params.items())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        """Replace parameter values; shapes must match the layer table exactly."""
        check_compatible({name: p.shape for name, p in self.params.items()}, arrays)
        for name, arr in arrays.items():
            self.params[name].data = np.array(arr, dtype=np.float64)

    @classmethod
    def from_checkpoint(cls, path, net: NetConfig | None = None) -> "AfranNet":
        """Build the network from an archive, using its stored config unless ``net`` is given."""
        ckpt = load_checkpoint(path)
        model = cls(net if net is not None else ckpt.net_config())
        model.load_arrays(ckpt.params)
        return model

    def layout(self, batch: int, size: int) -> RowLayout:
        key = (batch, size)
        if key not in self._layouts:
            a = self.net.head.anchors_per_cell
            parts = {k: [] for k in RowLayout._fields}
            for lvl, (level, boxes) in enumerate(zip(LEVELS, pyramid_anchors(self.net.anchors, size))):
                side = size // self.net.anchors.strides[lvl]
                ys, xs = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
                cx = np.repeat(xs.reshape(-1), a)
                cy = np.repeat(ys.reshape(-1), a)
                for n in range(batch):
                    parts["image"].append(np.full(len(boxes), n, dtype=np.int64))
                    parts["level"].append(np.full(len(boxes), lvl, dtype=np.int64))
                    parts["cell_x"].append(cx)
                    parts["cell_y"].append(cy)
                    parts["anchors"].append(boxes)
            self._layouts[key] = RowLayout(**{k: np.concatenate(v) for k, v in parts.items()})
        return self._layouts[key]

    # ── passes ───────────────────────────────────────────────────────────────

    def forward(self, images: Tensor) -> ForwardPass:
        taps = backbone_forward(images, self.params, self.net)
        pyramid = build_pyramid(taps, self.params, self.net)
        logits, deltas = [], []
        for level, tap in zip(LEVELS, taps):
            cls_map, reg_map = arm_forward(tap, self.params, level, self.net)
            logits.append(anchor_rows(cls_map, 2))
            deltas.append(anchor_rows(reg_map, 4))
        return ForwardPass(pyramid, concat(logits, axis=0), concat(deltas, axis=0),
                           self.layout(images.shape[0], images.shape[2]))

    def _refine(self, fp: ForwardPass):
        refined = refine_anchors(fp.layout.anchors, fp.arm_deltas.data.reshape(-1, 4),
                                 fp.arm_logits.data.reshape(-1, 2))
        active = filter_negatives(refined.background, self.net.anchors.neg_filter)
        return refined, active

    def _adm(self, fp: ForwardPass, rows: np.ndarray, refined_boxes: np.ndarray):
        """ADM logits and deltas for the given anchor rows, concatenated level by level."""
        logits, deltas, order = [], [], []
        for lvl, level in enumerate(LEVELS):
            sel = rows[fp.layout.level[rows] == lvl]
            if sel.size == 0:
                continue
            cls_t, reg_t = adm_forward(
                fp.pyramid[lvl], fp.layout.image[sel], (fp.layout.cell_x[sel], fp.layout.cell_y[sel]),
                refined_boxes[sel], self.params, level, self.net,
            )
            logits.append(cls_t)
            deltas.append(reg_t)
            order.append(sel)
        if not order:
            return None, None, np.zeros(0, dtype=np.int64)
        return concat(logits, axis=0), concat(deltas, axis=0), np.concatenate(order)

    def loss(self, images: Tensor, gts: Sequence[np.ndarray], ohem_ratio: int = 3,
             alpha: float = 1.0) -> Tuple[Tensor, LossReport]:
        """Training loss of a batch; ``gts[n]`` holds the (k, 4) boxes of image n."""
        fp = self.forward(images)
        layout = fp.layout
        pos_thresh = self.net.anchors.pos_thresh

        arm_labels = np.zeros(len(layout.image), dtype=np.int64)
        arm_targets = np.zeros((len(layout.image), 4))
        for n in range(images.shape[0]):
            rows = layout.rows_of_image(n)
            match = match_anchors(layout.anchors[rows], gts[n], pos_thresh)
            arm_labels[rows] = np.where(match.positive, 1, 0)
            arm_targets[rows] = match.targets
        arm = HeadTargets(fp.arm_logits, fp.arm_deltas, arm_labels, arm_targets, layout.image)

        refined, active = self._refine(fp)
        adm_logits, adm_deltas, order = self._adm(fp, active, refined.boxes)
        adm_labels = np.zeros(len(order), dtype=np.int64)
        adm_targets = np.zeros((len(order), 4))
        for n in range(images.shape[0]):
            pick = np.flatnonzero(layout.image[order] == n)
            if pick.size == 0:
                continue
            match = match_anchors(refined.boxes[order[pick]], gts[n], pos_thresh)
            adm_labels[pick] = match.labels
            adm_targets[pick] = match.targets
        if adm_logits is None:
            adm_logits = Tensor(np.zeros((0, self.net.head.num_classes, 1, 1)))
            adm_deltas = Tensor(np.zeros((0, 4, 1, 1)))
        adm = HeadTargets(adm_logits, adm_deltas, adm_labels, adm_targets, layout.image[order])
        return total_loss(arm, adm, ohem_ratio, alpha)

    def detect(self, images: Tensor, conf_thresh: float = 0.0) -> List[Detections]:
        """Detections per image: ARM, negative filtering, ADM, decoding against refined boxes, NMS."""
        nms_cfg = self.net.nms
        size = images.shape[2]
        with no_grad():
            fp = self.forward(images)
            refined, active = self._refine(fp)
            adm_logits, adm_deltas, order = self._adm(fp, active, refined.boxes)
        results = []
        if adm_logits is None:
            return [Detections.empty() for _ in range(images.shape[0])]
        probs = softmax(adm_logits.data.reshape(len(order), -1))
        boxes, _ = decode_deltas(refined.boxes[order], adm_deltas.data.reshape(-1, 4))
        boxes = np.clip(boxes, 0.0, float(size))
        floor = max(nms_cfg.score_floor, conf_thresh)
        for n in range(images.shape[0]):
            on_image = fp.layout.image[order] == n
            kept_boxes, kept_scores, kept_labels = [], [], []
            for cls in range(1, self.net.head.num_classes):
                mask = on_image & (probs[:, cls] > floor)
                idx = np.flatnonzero(mask)
                if idx.size == 0:
                    continue
                keep = idx[nms(boxes[idx], probs[idx, cls], nms_cfg.iou_thresh, nms_cfg.pre_top_k, nms_cfg.keep)]
                kept_boxes.append(boxes[keep])
                kept_scores.append(probs[keep, cls])
                kept_labels.append(np.full(len(keep), cls, dtype=np.int64))
            if not kept_scores:
                results.append(Detections.empty())
                continue
            all_scores = np.concatenate(kept_scores)
            top = np.argsort(-all_scores, kind="mergesort")[:nms_cfg.keep]
            results.append(Detections(np.concatenate(kept_boxes)[top], all_scores[top],
                                      np.concatenate(kept_labels)[top]))
        return results

    def anchor_alignment(self, images: Tensor, gts: Sequence[np.ndarray]) -> Dict[str, AnchorAlignment]:
        """Per-gt best IoU of the initial anchors versus the ARM-refined anchors."""
        with no_grad():
            fp = self.forward(images)
            refined, _ = self._refine(fp)
        return {
            "initial": alignment_stats(fp.layout, fp.layout.anchors, gts),
            "refined": alignment_stats(fp.layout, refined.boxes, gts),
        }


def alignment_stats(layout: RowLayout, boxes: np.ndarray, gts: Sequence[np.ndarray]) -> AnchorAlignment:
    best, over = [], 0
    for n, gt in enumerate(gts):
        gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
        if len(gt) == 0:
            continue
        overlaps = iou_matrix(boxes[layout.rows_of_image(n)], gt)
        best.extend(overlaps.max(axis=0).tolist())
        over += int(np.sum(overlaps.max(axis=1) >= 0.5))
    if not best:
        return AnchorAlignment(None, None, over, 0)
    return AnchorAlignment(float(np.mean(best)), float(np.max(best)), over, len(best))
