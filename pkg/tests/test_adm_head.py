"""Tests for the refinement heads and the anchor-guided sampling geometry."""
from dataclasses import replace

import numpy as np
import pytest

from adm_head import (
    adm_features,
    adm_forward,
    adm_offsets,
    adm_offsets_batch,
    aligned_sampling_points,
    aligned_sampling_points_batch,
    arm_forward,
    base_sampling_points,
    base_sampling_points_batch,
    head_layers,
)
from anchors import softmax
from config_manager import ModuleSwitches, NetConfig
from constants import LEVELS, TAP_STRIDES
from conv_ops import conv2d, init_layer_params
from deform_ops import DeformConvSpec, modulated_deform_conv2d
from tensor import ShapeError, Tensor, add, anchor_rows, concat, grad_check, mul, total


def _fixed_point_box(x, y, k, stride):
    half = k // 2
    return np.array([stride * (x - half), stride * (y - half), stride * (x - half + k), stride * (y - half + k)],
                    dtype=float)


def test_base_points_examples():
    grid = base_sampling_points(5, 7, 3)
    assert (grid.xs[0], grid.ys[0]) == (4.5, 6.5)
    assert (grid.xs[8], grid.ys[8]) == (6.5, 8.5)
    single = base_sampling_points(5, 7, 1)
    assert (single.xs.tolist(), single.ys.tolist()) == ([5.5], [7.5])


def test_base_points_are_row_major_in_y():
    """Point j * k + i is column i of kernel row j."""
    grid = base_sampling_points(0, 0, 3)
    assert grid.xs.tolist() == [-0.5, 0.5, 1.5] * 3
    assert grid.ys.tolist() == [-0.5] * 3 + [0.5] * 3 + [1.5] * 3


def test_aligned_points_examples():
    grid = aligned_sampling_points([24, 24, 48, 48], 3, 8)
    assert (grid.xs[0], grid.ys[0]) == (3.5, 3.5)
    assert (grid.xs[8], grid.ys[8]) == (5.5, 5.5)


def test_aligned_points_are_evenly_spaced():
    box = np.array([13.0, 7.0, 61.0, 29.0])
    grid = aligned_sampling_points(box, 3, 16)
    xs = grid.xs.reshape(3, 3)
    ys = grid.ys.reshape(3, 3)
    assert np.allclose(np.diff(xs, axis=1), (box[2] - box[0]) / (3 * 16))
    assert np.allclose(np.diff(ys, axis=0), (box[3] - box[1]) / (3 * 16))


def test_aligned_points_reject_degenerate_box():
    with pytest.raises(ShapeError, match="degenerate"):
        aligned_sampling_points([10, 10, 10, 20], 3, 8)


def test_alignment_fixed_point_gives_zero_offsets_on_every_level():
    for stride in TAP_STRIDES:
        for x, y in ((0, 0), (4, 4), (7, 2)):
            offsets = adm_offsets(_fixed_point_box(x, y, 3, stride), x, y, 3, stride)
            assert np.all(offsets.xs == 0.0)
            assert np.all(offsets.ys == 0.0)


def test_one_stride_shift_moves_offsets_by_one():
    box = _fixed_point_box(4, 4, 3, 8) + np.array([8.0, 0.0, 8.0, 0.0])
    offsets = adm_offsets(box, 4, 4, 3, 8)
    assert np.all(offsets.xs == 1.0)
    assert np.all(offsets.ys == 0.0)


def test_offsets_translate_with_the_anchor():
    """Shifting a box by (dx, dy) pixels moves every offset by (dx, dy) / S."""
    rng = np.random.default_rng(0)
    xy = rng.uniform(0, 300, size=(1000, 2))
    wh = rng.uniform(4, 200, size=(1000, 2))
    boxes = np.concatenate([xy, xy + wh], axis=1)
    cells_x = rng.integers(0, 40, size=1000)
    cells_y = rng.integers(0, 40, size=1000)
    shift = rng.uniform(-50, 50, size=(1000, 2))
    for stride in TAP_STRIDES:
        before = adm_offsets_batch(boxes, cells_x, cells_y, 3, stride)
        moved = boxes + np.concatenate([shift, shift], axis=1)
        after = adm_offsets_batch(moved, cells_x, cells_y, 3, stride)
        assert np.max(np.abs(after.xs - before.xs - shift[:, :1] / stride)) < 1e-12
        assert np.max(np.abs(after.ys - before.ys - shift[:, 1:] / stride)) < 1e-12


def test_offsets_are_aligned_minus_base():
    rng = np.random.default_rng(1)
    xy = rng.uniform(0, 300, size=(50, 2))
    boxes = np.concatenate([xy, xy + rng.uniform(4, 100, size=(50, 2))], axis=1)
    xs = rng.integers(0, 40, size=50)
    ys = rng.integers(0, 40, size=50)
    offsets = adm_offsets_batch(boxes, xs, ys, 3, 16)
    aligned = aligned_sampling_points_batch(boxes, 3, 16)
    base = base_sampling_points_batch(xs, ys, 3)
    assert np.array_equal(offsets.xs, aligned.xs - base.xs)
    assert np.array_equal(offsets.ys, aligned.ys - base.ys)


def test_head_layer_shapes_at_full_size():
    layers = {l.name: l for l in head_layers(NetConfig())}
    assert layers["arm.P2.cls"].spec.out_channels == 6
    assert layers["arm.P2.reg"].spec.out_channels == 12
    assert layers["arm.P2.cls"].plane == (80, 80)
    assert layers["adm.P4.deform"].repeat == 3


def test_arm_maps_and_uniform_objectness_at_zero_init(tiny_net):
    layers = [l for l in head_layers(tiny_net) if l.name.startswith("arm.")]
    params = init_layer_params(layers, np.random.default_rng(0), zero_init=[l.name for l in layers])
    tap = Tensor(np.random.default_rng(1).standard_normal((2, tiny_net.width(512), 8, 8)))
    cls_map, reg_map = arm_forward(tap, params, "P2", tiny_net)
    assert cls_map.shape == (2, 6, 8, 8)
    assert reg_map.shape == (2, 12, 8, 8)
    probs = softmax(anchor_rows(cls_map, 2).data.reshape(-1, 2))
    assert np.all(probs == 0.5)


def test_fixed_point_anchor_reads_plain_conv(tiny_net):
    """With zero offsets the ADM feature at a cell is the plain 3x3 conv at that cell."""
    level = "P3"
    stride = TAP_STRIDES[LEVELS.index(level)]
    c = tiny_net.affm.channels
    layers = [l for l in head_layers(tiny_net) if l.name.startswith(f"adm.{level}.")]
    params = init_layer_params(layers, np.random.default_rng(2))
    feature = Tensor(np.random.default_rng(3).standard_normal((1, c, 4, 4)))
    cells = np.array([[0, 0], [1, 2], [3, 3]])
    boxes = np.stack([_fixed_point_box(x, y, 3, stride) for x, y in cells])
    points = aligned_sampling_points_batch(boxes, 3, stride)
    hidden = adm_features(feature, np.zeros(3, dtype=np.int64), points, params, level, tiny_net.head)
    deform = next(l for l in layers if l.name.endswith(".deform"))
    plain = conv2d(feature, params[f"adm.{level}.deform.weight"], params[f"adm.{level}.deform.bias"], deform.spec)
    for row, (x, y) in enumerate(cells):
        assert np.allclose(hidden.data[row, :, 0, 0], plain.data[0, :, y, x], atol=1e-12)


def test_aligned_sampling_equals_deformable_conv_with_offsets(tiny_net):
    level = "P3"
    stride = TAP_STRIDES[LEVELS.index(level)]
    c = tiny_net.affm.channels
    layers = [l for l in head_layers(tiny_net) if l.name.startswith(f"adm.{level}.")]
    deform = next(l for l in layers if l.name.endswith(".deform"))
    params = init_layer_params(layers, np.random.default_rng(20))
    feature = Tensor(np.random.default_rng(21).standard_normal((1, c, 4, 4)))
    cells_x, cells_y = np.array([0, 2, 3]), np.array([1, 2, 0])
    boxes = np.array([[2.0, 10.0, 30.0, 41.0], [20.0, 25.0, 60.0, 50.0], [33.0, 0.5, 63.0, 20.0]])
    points = aligned_sampling_points_batch(boxes, 3, stride)
    hidden = adm_features(feature, np.zeros(3, dtype=np.int64), points, params, level, tiny_net.head)

    shifts = adm_offsets_batch(boxes, cells_x, cells_y, 3, stride)
    offsets = np.zeros((1, 18, 4, 4))
    offsets[0, 0::2, cells_y, cells_x] = shifts.ys
    offsets[0, 1::2, cells_y, cells_x] = shifts.xs
    out = modulated_deform_conv2d(feature, params[f"adm.{level}.deform.weight"], Tensor(offsets),
                                  Tensor(np.ones((1, 9, 4, 4))), DeformConvSpec(deform.spec),
                                  params[f"adm.{level}.deform.bias"])
    for row, (x, y) in enumerate(zip(cells_x, cells_y)):
        assert np.allclose(hidden.data[row, :, 0, 0], out.data[0, :, y, x], atol=1e-10)


def test_adm_forward_output_shapes(tiny_net):
    level = "P2"
    layers = [l for l in head_layers(tiny_net) if l.name.startswith(f"adm.{level}.")]
    params = init_layer_params(layers, np.random.default_rng(4))
    feature = Tensor(np.random.default_rng(5).standard_normal((2, tiny_net.affm.channels, 8, 8)))
    refined = np.array([[4.0, 4.0, 30.0, 20.0], [-10.0, 40.0, 20.0, 80.0], [50.0, 50.0, 60.0, 70.0]])
    cells = (np.array([1, 0, 6]), np.array([1, 7, 7]))
    for modules in (ModuleSwitches(), ModuleSwitches(adm=False)):
        net = replace(tiny_net, modules=modules)
        logits, deltas = adm_forward(feature, np.array([0, 1, 1]), cells, refined, params, level, net)
        assert logits.shape == (3, 2, 1, 1)
        assert deltas.shape == (3, 4, 1, 1)


def test_grad_check_through_adm_forward(tiny_net):
    level = "P4"
    c = tiny_net.affm.channels
    layers = [l for l in head_layers(tiny_net) if l.name.startswith(f"adm.{level}.")]
    params = init_layer_params(layers, np.random.default_rng(6))
    feature = Tensor(np.random.default_rng(7).standard_normal((1, c, 2, 2)))
    refined = np.array([[3.0, 7.0, 51.0, 40.0], [20.0, 10.0, 60.0, 63.0]])
    cells = (np.array([0, 1]), np.array([0, 1]))
    proj = Tensor(np.random.default_rng(8).standard_normal((2, 6, 1, 1)))

    def f():
        logits, deltas = adm_forward(feature, np.zeros(2, dtype=np.int64), cells, refined, params, level, tiny_net)
        return total(mul(concat([logits, deltas], axis=1), proj))

    inputs = [feature, params[f"adm.{level}.deform.weight"], params[f"adm.{level}.cls.weight"]]
    assert grad_check(f, inputs) < 1e-5


def test_grad_check_arm_head_parameters(tiny_net):
    layers = [l for l in head_layers(tiny_net) if l.name.startswith("arm.P4.")]
    params = init_layer_params(layers, np.random.default_rng(9))
    tap = Tensor(np.random.default_rng(10).standard_normal((1, tiny_net.width(1024), 2, 2)))
    proj_c = Tensor(np.random.default_rng(11).standard_normal((1, 6, 2, 2)))
    proj_r = Tensor(np.random.default_rng(12).standard_normal((1, 12, 2, 2)))

    def f():
        cls_map, reg_map = arm_forward(tap, params, "P4", tiny_net)
        return add(total(mul(cls_map, proj_c)), total(mul(reg_map, proj_r)))

    assert grad_check(f, [params["arm.P4.cls.weight"], params["arm.P4.reg.weight"], params["arm.P4.cls.bias"]]) < 1e-5
