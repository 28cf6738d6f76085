"""Two-stage detection loss with online hard example mining."""
import logging
from dataclasses import dataclass
from typing import NamedTuple, Tuple

import numpy as np

from constants import BACKGROUND
from tensor import DTYPE, ShapeError, Tensor, add, record, scale, take_rows, total

logger = logging.getLogger(__name__)


class HeadTargets(NamedTuple):
    """Predictions of one head stage next to what they are trained towards.

    ``logits`` is (M, C, 1, 1), ``deltas`` (M, 4, 1, 1); ``labels`` (M,)
    class ids with BACKGROUND for negatives, ``targets`` (M, 4) encoded
    deltas, ``image_index`` (M,) the batch image of each row.
    """

    logits: Tensor
    deltas: Tensor
    labels: np.ndarray
    targets: np.ndarray
    image_index: np.ndarray


@dataclass(frozen=True)
class LossReport:
    total: float
    arm: float
    adm: float
    arm_conf: float
    arm_reg: float
    adm_conf: float
    adm_reg: float
    arm_pos: int
    adm_pos: int

    def as_row(self) -> dict:
        return {
            "L_total": self.total, "L_ARM": self.arm, "L_ADM": self.adm,
            "L_ARM_conf": self.arm_conf, "L_ARM_reg": self.arm_reg,
            "L_ADM_conf": self.adm_conf, "L_ADM_reg": self.adm_reg,
            "N_ARM": self.arm_pos, "N_ADM": self.adm_pos,
        }


def smooth_l1(x: float) -> float:
    ax = abs(x)
    return 0.5 * x * x if ax < 1.0 else ax - 0.5


def cross_entropy_rows(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Softmax cross entropy of each row, shape (M, 1, 1, 1)."""
    m, c = logits.shape[:2]
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (m,):
        raise ShapeError(f"cross_entropy_rows: {labels.shape[0] if labels.ndim else 0} labels for {m} rows")
    z = logits.data.reshape(m, c)
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(m)
    loss = log_norm - shifted[rows, labels]
    probs = np.exp(shifted - log_norm[:, None])

    def backward(g):
        grad = probs.copy()
        grad[rows, labels] -= 1.0
        return ((grad * g.reshape(m, 1)).reshape(logits.shape),)

    return record(loss.reshape(m, 1, 1, 1), (logits,), backward)


def smooth_l1_rows(pred: Tensor, target: np.ndarray) -> Tensor:
    """Smooth L1 summed over the four coordinates of each row, shape (M, 1, 1, 1)."""
    m = pred.shape[0]
    diff = pred.data.reshape(m, -1) - np.asarray(target, dtype=DTYPE).reshape(m, -1)
    small = np.abs(diff) < 1.0
    values = np.where(small, 0.5 * diff * diff, np.abs(diff) - 0.5).sum(axis=1)
    slope = np.where(small, diff, np.sign(diff))

    def backward(g):
        return ((slope * g.reshape(m, 1)).reshape(pred.shape),)

    return record(values.reshape(m, 1, 1, 1), (pred,), backward)


def hard_negative_mask(row_loss: np.ndarray, labels: np.ndarray, image_index: np.ndarray,
                       ohem_ratio: int = 3) -> np.ndarray:
    """Per image, keep the min(ratio * positives, negatives) highest-loss negatives.

    Equal losses keep the lower row index.
    """
    labels = np.asarray(labels)
    image_index = np.asarray(image_index)
    keep = np.zeros(len(labels), dtype=bool)
    for img in np.unique(image_index):
        rows = np.flatnonzero(image_index == img)
        pos = int(np.sum(labels[rows] != BACKGROUND))
        neg_rows = rows[labels[rows] == BACKGROUND]
        count = min(ohem_ratio * pos, len(neg_rows))
        if count == 0:
            continue
        order = np.argsort(-row_loss[neg_rows], kind="mergesort")
        keep[neg_rows[order[:count]]] = True
    return keep


def _zero() -> Tensor:
    return Tensor(np.zeros((1, 1, 1, 1)))


def conf_loss(logits: Tensor, labels: np.ndarray, image_index: np.ndarray | None = None,
              ohem_ratio: int = 3) -> Tensor:
    """Cross entropy over positives plus mined hard negatives, divided by the positive count.

    Returns zero when there are no positives.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if image_index is None:
        image_index = np.zeros(len(labels), dtype=np.int64)
    num_pos = int(np.sum(labels != BACKGROUND))
    if num_pos == 0 or len(labels) == 0:
        return _zero()
    rows = cross_entropy_rows(logits, labels)
    selected = (labels != BACKGROUND) | hard_negative_mask(rows.data.reshape(-1), labels, image_index, ohem_ratio)
    return scale(total(take_rows(rows, np.flatnonzero(selected))), 1.0 / num_pos)


def reg_loss(pred: Tensor, targets: np.ndarray, positive: np.ndarray) -> Tensor:
    """Smooth L1 over the positives' deltas, divided by the positive count (zero without positives)."""
    positive = np.asarray(positive, dtype=bool)
    num_pos = int(positive.sum())
    if num_pos == 0:
        return _zero()
    idx = np.flatnonzero(positive)
    rows = smooth_l1_rows(take_rows(pred, idx), np.asarray(targets)[idx])
    return scale(total(rows), 1.0 / num_pos)


def part_loss(head: HeadTargets, ohem_ratio: int = 3, alpha: float = 1.0) -> Tuple[Tensor, float, float, int]:
    """One stage's (L_conf + alpha * L_reg) / N with its parts."""
    labels = np.asarray(head.labels, dtype=np.int64)
    num_pos = int(np.sum(labels != BACKGROUND))
    if len(labels) == 0:
        return _zero(), 0.0, 0.0, 0
    conf = conf_loss(head.logits, labels, head.image_index, ohem_ratio)
    reg = reg_loss(head.deltas, head.targets, labels != BACKGROUND)
    return add(conf, scale(reg, alpha)), conf.item(), reg.item(), num_pos


def total_loss(arm: HeadTargets, adm: HeadTargets, ohem_ratio: int = 3,
               alpha: float = 1.0) -> Tuple[Tensor, LossReport]:
    """L_total = L_ARM + L_ADM.

    ``arm`` rows are every anchor with 2-way labels against the initial
    anchors; ``adm`` rows are the anchors that survived negative filtering,
    labelled and encoded against their refined boxes.
    """
    arm_t, arm_conf, arm_reg, arm_pos = part_loss(arm, ohem_ratio, alpha)
    adm_t, adm_conf, adm_reg, adm_pos = part_loss(adm, ohem_ratio, alpha)
    total_t = add(arm_t, adm_t)
    report = LossReport(
        total=total_t.item(), arm=arm_t.item(), adm=adm_t.item(),
        arm_conf=arm_conf, arm_reg=arm_reg, adm_conf=adm_conf, adm_reg=adm_reg,
        arm_pos=arm_pos, adm_pos=adm_pos,
    )
    return total_t, report
