"""Tests for modulated deformable convolution and the lateral connection stack."""
import numpy as np
import pytest

from config_manager import DlcmConfig
from conv_ops import ConvSpec, conv2d, conv3x3, init_layer_params
from deform_ops import (
    DeformConvSpec,
    dlcm_forward,
    dlcm_layers,
    dlcm_zero_init,
    modulated_deform_conv2d,
    modulated_deform_conv2d_reference,
)
from tensor import ShapeError, Tensor, grad_check, mul, relu, scale, sigmoid, total


def _case(rng, n=1, c_in=2, c_out=3, h=6, w=6, spec=None):
    spec = spec or conv3x3(c_in, c_out)
    dspec = DeformConvSpec(spec)
    ho, wo = spec.output_size(h, w)
    x = rng.standard_normal((n, c_in, h, w))
    weights = rng.standard_normal((c_out, c_in, spec.kernel_h, spec.kernel_w))
    offsets = rng.uniform(-1.0, 1.0, size=(n, 2 * dspec.K, ho, wo))
    mask = rng.uniform(0.0, 1.0, size=(n, dspec.K, ho, wo))
    return dspec, x, weights, offsets, mask


def test_zero_offsets_unit_mask_equal_plain_conv_bit_for_bit():
    rng = np.random.default_rng(0)
    for spec in (conv3x3(2, 3), conv3x3(2, 3, dilation=2), ConvSpec(2, 3, 3, 3, stride=2, padding=1)):
        dspec, x, weights, offsets, mask = _case(rng, n=2, spec=spec, h=7, w=7)
        bias = rng.standard_normal((1, 3, 1, 1))
        out = modulated_deform_conv2d(Tensor(x), Tensor(weights), Tensor(np.zeros_like(offsets)),
                                      Tensor(np.ones_like(mask)), dspec, Tensor(bias))
        plain = conv2d(Tensor(x), Tensor(weights), Tensor(bias), spec)
        assert np.array_equal(out.data, plain.data)


def test_zero_mask_leaves_only_bias():
    rng = np.random.default_rng(1)
    dspec, x, weights, offsets, mask = _case(rng)
    bias = np.array([0.5, -1.0, 2.0]).reshape(1, 3, 1, 1)
    out = modulated_deform_conv2d(Tensor(x), Tensor(weights), Tensor(offsets),
                                  Tensor(np.zeros_like(mask)), dspec, Tensor(bias)).data
    assert np.array_equal(out, np.broadcast_to(bias, out.shape))


def test_matches_gather_oracle_on_random_cases():
    """Random offsets in [-1, 1] and masks in [0, 1] agree with the per-position oracle."""
    rng = np.random.default_rng(2)
    for _ in range(40):
        c_in, c_out = (int(v) for v in rng.integers(1, 4, size=2))
        h, w = (int(v) for v in rng.integers(4, 9, size=2))
        spec = conv3x3(c_in, c_out, stride=int(rng.integers(1, 3)), dilation=int(rng.integers(1, 3)))
        dspec, x, weights, offsets, mask = _case(rng, n=int(rng.integers(1, 3)), c_in=c_in, c_out=c_out,
                                                 h=h, w=w, spec=spec)
        out = modulated_deform_conv2d(Tensor(x), Tensor(weights), Tensor(offsets), Tensor(mask), dspec).data
        ref = modulated_deform_conv2d_reference(x, weights, offsets, mask, dspec)
        assert np.max(np.abs(out - ref)) < 1e-9


def test_large_offsets_read_zero_padding():
    """Every point pushed far outside the plane samples zero."""
    rng = np.random.default_rng(3)
    dspec, x, weights, offsets, mask = _case(rng)
    out = modulated_deform_conv2d(Tensor(x), Tensor(weights), Tensor(np.full_like(offsets, 100.0)),
                                  Tensor(mask), dspec).data
    assert not np.any(out)


def test_rejects_inconsistent_offset_and_mask_channels():
    rng = np.random.default_rng(4)
    dspec, x, weights, offsets, mask = _case(rng)
    with pytest.raises(ShapeError, match="offsets"):
        modulated_deform_conv2d(Tensor(x), Tensor(weights), Tensor(offsets[:, :-1]), Tensor(mask), dspec)
    with pytest.raises(ShapeError, match="mask"):
        modulated_deform_conv2d(Tensor(x), Tensor(weights), Tensor(offsets), Tensor(mask[:, :-1]), dspec)


def test_offset_locality():
    """Output at a position ignores input pixels beyond the deformed receptive field."""
    rng = np.random.default_rng(5)
    dspec, x, weights, offsets, mask = _case(rng, h=12, w=12)
    delta = 0.5
    offsets = np.clip(offsets, -delta, delta)
    base = modulated_deform_conv2d(Tensor(x), Tensor(weights), Tensor(offsets), Tensor(mask), dspec).data
    reach = 1 + delta + 1
    bumped = x.copy()
    bumped[0, :, 0, 0] += 10.0
    moved = modulated_deform_conv2d(Tensor(bumped), Tensor(weights), Tensor(offsets), Tensor(mask), dspec).data
    changed = np.argwhere(np.any(base != moved, axis=1)[0])
    assert len(changed)
    assert np.all(changed <= reach)


def test_grad_check_all_four_argument_groups():
    rng = np.random.default_rng(6)
    dspec, x, weights, offsets, mask = _case(rng, c_in=2, c_out=2, h=4, w=4)
    tx, tw, to, tm = Tensor(x), Tensor(weights), Tensor(offsets), Tensor(mask)
    tb = Tensor(rng.standard_normal((1, 2, 1, 1)))
    proj = Tensor(rng.standard_normal((1, 2, 4, 4)))

    def f():
        return total(mul(modulated_deform_conv2d(tx, tw, to, tm, dspec, tb), proj))

    assert grad_check(f, [tx, tw, to, tm, tb]) < 1e-5


def test_dlcm_zero_init_is_half_masked_conv():
    """Zero offset and mask convs reduce the first unit to 0.5 times the plain conv."""
    cfg = DlcmConfig(stack_depth=1, dilation=(1, 1, 1), channels=4)
    layers = dlcm_layers("dlcm.P3", cfg, "P3", (6, 6))
    params = init_layer_params(layers, np.random.default_rng(7), zero_init=dlcm_zero_init(layers))
    x = Tensor(np.random.default_rng(8).standard_normal((1, 4, 6, 6)))
    out = dlcm_forward(x, params, cfg, "P3", "dlcm.P3")
    deform = layers[-1]
    plain = conv2d(x, params[f"{deform.name}.weight"], params[f"{deform.name}.bias"], deform.spec)
    expected = relu(scale(plain, 0.5)).data
    assert np.allclose(out.data, expected, atol=1e-12)


def test_dlcm_preserves_shape_and_composes_units():
    """Two stacked units equal the oracle applied per unit with relu between."""
    cfg = DlcmConfig(stack_depth=2, dilation=(1, 2, 1), channels=3)
    layers = dlcm_layers("dlcm.P3", cfg, "P3", (5, 5))
    assert [l.name for l in layers][:3] == ["dlcm.P3.unit0.offset", "dlcm.P3.unit0.mask", "dlcm.P3.unit0.deform"]
    params = init_layer_params(layers, np.random.default_rng(9), small_init=dlcm_zero_init(layers), small_std=0.1)
    x = Tensor(np.random.default_rng(10).standard_normal((1, 3, 5, 5)))
    out = dlcm_forward(x, params, cfg, "P3", "dlcm.P3")
    assert out.shape == x.shape

    h = x
    for u in range(2):
        off_l, mask_l, dl = layers[3 * u:3 * u + 3]
        offsets = conv2d(h, params[f"{off_l.name}.weight"], params[f"{off_l.name}.bias"], off_l.spec)
        mask = sigmoid(conv2d(h, params[f"{mask_l.name}.weight"], params[f"{mask_l.name}.bias"], mask_l.spec))
        ref = modulated_deform_conv2d_reference(h.data, params[f"{dl.name}.weight"].data, offsets.data,
                                                mask.data, DeformConvSpec(dl.spec))
        h = Tensor(np.maximum(ref + params[f"{dl.name}.bias"].data, 0.0))
    assert np.max(np.abs(out.data - h.data)) < 1e-9


def test_dlcm_plain_variant_uses_single_conv_per_unit():
    cfg = DlcmConfig(stack_depth=2, dilation=(1, 1, 1), channels=2)
    layers = dlcm_layers("dlcm.P4", cfg, "P4", (4, 4), deformable=False)
    assert [l.kind for l in layers] == ["conv", "conv"]


def test_grad_check_dlcm_unit():
    cfg = DlcmConfig(stack_depth=1, dilation=(1, 1, 1), channels=2)
    layers = dlcm_layers("d", cfg, "P2", (4, 4))
    params = init_layer_params(layers, np.random.default_rng(11), small_init=dlcm_zero_init(layers), small_std=0.3)
    x = Tensor(np.random.default_rng(12).standard_normal((1, 2, 4, 4)))
    proj = Tensor(np.random.default_rng(13).standard_normal((1, 2, 4, 4)))
    inputs = [x] + [params[f"{layers[0].name}.weight"], params[f"{layers[1].name}.weight"]]
    assert grad_check(lambda: total(mul(dlcm_forward(x, params, cfg, "P2", "d"), proj)), inputs) < 1e-5


def test_dlcm_rejects_level_without_dilation():
    cfg = DlcmConfig(stack_depth=1, dilation=(1, 1), channels=2)
    with pytest.raises(ShapeError, match="dilation"):
        dlcm_layers("d", cfg, "P4", (4, 4))


def test_dlcm_width_comes_from_its_config():
    cfg = DlcmConfig(stack_depth=1, dilation=(1, 1, 1), channels=6)
    offset, mask, deform = dlcm_layers("d", cfg, "P3", (4, 4))
    assert (deform.spec.in_channels, deform.spec.out_channels) == (6, 6)
    assert (offset.spec.in_channels, offset.spec.out_channels) == (6, 18)
    assert mask.spec.out_channels == 9
    params = init_layer_params([offset, mask, deform], np.random.default_rng(14))
    with pytest.raises(ShapeError, match="channels"):
        dlcm_forward(Tensor(np.zeros((1, 4, 4, 4))), params, cfg, "P3", "d")
