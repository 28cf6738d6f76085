"""Anchor refinement heads on the backbone taps and the anchor-guided detection head.

Feature-plane convention: cell X spans [X, X+1) in feature units and its
centre sits at X+0.5, so a feature coordinate u is read at array index u-0.5.
Kernel points are ordered y-major: point ``j * k + i`` is column i of row j.
"""
import logging
from typing import List, NamedTuple, Tuple

import numpy as np

from affm import source_channels
from config_manager import HeadConfig, NetConfig
from constants import LEVELS, TAP_STRIDES, TAPS
from conv_ops import ConvSpec, LayerSpec, Params, apply_layer, conv1x1, conv2d, conv3x3
from tensor import ShapeError, Tensor, bilinear_gather, relu, reshape

logger = logging.getLogger(__name__)


class SamplingGrid(NamedTuple):
    """Feature-plane coordinates of the k*k kernel points, shape (..., k*k) each."""

    xs: np.ndarray
    ys: np.ndarray


def head_layers(net: NetConfig) -> List[LayerSpec]:
    """ARM heads on the taps and ADM heads on the pyramid, per level."""
    head = net.head
    a = head.anchors_per_cell
    c = net.affm.channels
    layers = []
    for level, tap, stride in zip(LEVELS, TAPS, TAP_STRIDES):
        side = net.input_size // stride
        tap_ch = source_channels(net, tap)
        layers.append(LayerSpec(f"arm.{level}.cls", "conv", conv3x3(tap_ch, 2 * a), (side, side)))
        layers.append(LayerSpec(f"arm.{level}.reg", "conv", conv3x3(tap_ch, 4 * a), (side, side)))
        deform = ConvSpec(c, head.channels, head.k, head.k, padding=head.k // 2)
        layers.append(LayerSpec(f"adm.{level}.deform", "deform", deform, (side, side), repeat=a))
        layers.append(LayerSpec(f"adm.{level}.cls", "conv", conv1x1(head.channels, head.num_classes),
                                (side, side), repeat=a))
        layers.append(LayerSpec(f"adm.{level}.reg", "conv", conv1x1(head.channels, 4), (side, side), repeat=a))
    return layers


def arm_forward(tap: Tensor, params: Params, level: str, net: NetConfig) -> Tuple[Tensor, Tensor]:
    """Sibling 3x3 convs giving (N, 2A, H, W) objectness logits and (N, 4A, H, W) deltas."""
    layers = {l.name: l for l in head_layers(net) if l.name.startswith(f"arm.{level}.")}
    return (apply_layer(tap, params, layers[f"arm.{level}.cls"]),
            apply_layer(tap, params, layers[f"arm.{level}.reg"]))


# ── sampling geometry ────────────────────────────────────────────────────────

def _kernel_steps(k: int) -> Tuple[np.ndarray, np.ndarray]:
    jj, ii = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    return ii.reshape(-1).astype(np.float64), jj.reshape(-1).astype(np.float64)


def base_sampling_points_batch(xs, ys, k: int) -> SamplingGrid:
    """Regular k x k grid around each cell (X, Y): (X - k//2 + i + 0.5, Y - k//2 + j + 0.5)."""
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, 1)
    ys = np.asarray(ys, dtype=np.float64).reshape(-1, 1)
    ii, jj = _kernel_steps(k)
    half = k // 2
    return SamplingGrid(xs - half + ii + 0.5, ys - half + jj + 0.5)


def base_sampling_points(x: int, y: int, k: int) -> SamplingGrid:
    grid = base_sampling_points_batch([x], [y], k)
    return SamplingGrid(grid.xs[0], grid.ys[0])


def aligned_sampling_points_batch(boxes: np.ndarray, k: int, stride: float) -> SamplingGrid:
    """k x k points evenly spanning each refined box, in feature units of the given stride."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    if np.any(w <= 0) or np.any(h <= 0):
        bad = int(np.flatnonzero((w <= 0) | (h <= 0))[0])
        raise ShapeError(f"aligned_sampling_points: degenerate anchor {boxes[bad].tolist()} at row {bad}")
    ii, jj = _kernel_steps(k)
    xs = (k * boxes[:, :1] + w[:, None] * (ii + 0.5)) / (k * stride)
    ys = (k * boxes[:, 1:2] + h[:, None] * (jj + 0.5)) / (k * stride)
    return SamplingGrid(xs, ys)


def aligned_sampling_points(box, k: int, stride: float) -> SamplingGrid:
    grid = aligned_sampling_points_batch(np.asarray(box, dtype=np.float64).reshape(1, 4), k, stride)
    return SamplingGrid(grid.xs[0], grid.ys[0])


def adm_offsets_batch(boxes: np.ndarray, xs, ys, k: int, stride: float) -> SamplingGrid:
    aligned = aligned_sampling_points_batch(boxes, k, stride)
    base = base_sampling_points_batch(xs, ys, k)
    return SamplingGrid(aligned.xs - base.xs, aligned.ys - base.ys)


def adm_offsets(box, x: int, y: int, k: int, stride: float) -> SamplingGrid:
    """Per-point shift from the regular grid at (x, y) to the grid spanning ``box``."""
    grid = adm_offsets_batch(np.asarray(box, dtype=np.float64).reshape(1, 4), [x], [y], k, stride)
    return SamplingGrid(grid.xs[0], grid.ys[0])


# ── detection head ───────────────────────────────────────────────────────────

def adm_features(feature: Tensor, batch_index: np.ndarray, points: SamplingGrid,
                 params: Params, level: str, head: HeadConfig) -> Tensor:
    """k x k deformable conv evaluated once per anchor at the given feature-plane points.

    Returns the (M, head.channels, 1, 1) pre-activation.
    """
    c = feature.shape[1]
    kk = head.k * head.k
    weight = params[f"adm.{level}.deform.weight"]
    if weight.shape != (head.channels, c, head.k, head.k):
        raise ShapeError(f"adm_features: weight shape {weight.shape} != {(head.channels, c, head.k, head.k)}")
    samples = bilinear_gather(feature, batch_index, points.ys - 0.5, points.xs - 0.5)
    flat = reshape(weight, (head.channels, c * kk, 1, 1))
    return conv2d(samples, flat, params.get(f"adm.{level}.deform.bias"), conv1x1(c * kk, head.channels))


def adm_forward(feature: Tensor, batch_index: np.ndarray, cells: Tuple[np.ndarray, np.ndarray],
                refined: np.ndarray, params: Params, level: str, net: NetConfig) -> Tuple[Tensor, Tensor]:
    """Classify and regress each active refined anchor from its aligned deformable sample.

    ``cells`` holds the (X, Y) cell of each anchor on this level and
    ``refined`` its refined box in image pixels. The aligned points are
    sampled directly: this equals a modulated deformable conv with unit mask
    and :func:`adm_offsets_batch` offsets, read at each anchor's cell, without
    evaluating the conv over the whole plane. With the ADM switch off the
    regular grid at the cell is read instead. Returns (M, num_classes, 1, 1)
    logits and (M, 4, 1, 1) deltas relative to the refined boxes.
    """
    head = net.head
    stride = TAP_STRIDES[LEVELS.index(level)]
    xs, ys = cells
    if net.modules.adm:
        points = aligned_sampling_points_batch(refined, head.k, stride)
    else:
        points = base_sampling_points_batch(xs, ys, head.k)
    hidden = relu(adm_features(feature, batch_index, points, params, level, head))
    layers = {l.name: l for l in head_layers(net) if l.name.startswith(f"adm.{level}.")}
    return (apply_layer(hidden, params, layers[f"adm.{level}.cls"]),
            apply_layer(hidden, params, layers[f"adm.{level}.reg"]))
