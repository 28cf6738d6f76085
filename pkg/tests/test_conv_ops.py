"""Tests for convolution, transposed convolution and the pooled group attention."""
import math

import numpy as np
import pytest

from conv_ops import (
    ConvSpec,
    LayerSpec,
    adaptive_avgpool_fc_softmax,
    apply_layer,
    conv1x1,
    conv2d,
    conv2d_reference,
    conv3x3,
    deconv2d,
    init_layer_params,
    layer_index,
)
from tensor import ShapeError, Tensor, grad_check, mul, total


def test_identity_kernel_returns_input():
    x = Tensor(np.arange(9, dtype=float).reshape(1, 1, 3, 3))
    w = Tensor(np.ones((1, 1, 1, 1)))
    out = conv2d(x, w, None, ConvSpec(1, 1, 1, 1, has_bias=False))
    assert np.array_equal(out.data, x.data)


def test_all_ones_kernel_sums_patch():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = conv2d(x, w, None, ConvSpec(1, 1, 3, 3, has_bias=False))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv2d_matches_loop_oracle_on_random_specs():
    """Patch-matrix convolution equals the nested-loop oracle for N, C <= 4 and H, W <= 12."""
    rng = np.random.default_rng(0)
    for _ in range(25):
        n, c_in, c_out = rng.integers(1, 5, size=3)
        h, w = rng.integers(5, 13, size=2)
        k = int(rng.choice([1, 3]))
        stride = int(rng.integers(1, 3))
        dilation = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 3))
        spec = ConvSpec(int(c_in), int(c_out), k, k, stride=stride, padding=padding, dilation=dilation)
        x = rng.standard_normal((n, c_in, h, w))
        weights = rng.standard_normal((c_out, c_in, k, k))
        bias = rng.standard_normal((1, c_out, 1, 1))
        out = conv2d(Tensor(x), Tensor(weights), Tensor(bias), spec).data
        ref = conv2d_reference(x, weights, bias, spec)
        assert out.shape == ref.shape
        assert np.max(np.abs(out - ref)) < 1e-9


def test_conv2d_rejects_channel_mismatch():
    x = Tensor(np.ones((1, 2, 5, 5)))
    w = Tensor(np.ones((4, 3, 3, 3)))
    with pytest.raises(ShapeError, match="channels"):
        conv2d(x, w, None, ConvSpec(3, 4, 3, 3, has_bias=False))


def test_conv2d_rejects_empty_output():
    x = Tensor(np.ones((1, 1, 2, 2)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    with pytest.raises(ShapeError, match="empty output"):
        conv2d(x, w, None, ConvSpec(1, 1, 3, 3, has_bias=False))


def test_conv2d_requires_declared_bias():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((2, 1, 1, 1)))
    with pytest.raises(ShapeError, match="bias"):
        conv2d(x, w, None, conv1x1(1, 2))


def test_deconv_doubles_spatial_size():
    x = Tensor(np.ones((1, 1, 20, 20)))
    w = Tensor(np.ones((1, 1, 4, 4)))
    out = deconv2d(x, w, ConvSpec(1, 1, 4, 4, stride=2, padding=1, has_bias=False))
    assert out.shape == (1, 1, 40, 40)


def test_deconv_scatters_delta_into_kernel_block():
    """A single one in the input lands as a 4x4 block of ones in the output."""
    data = np.zeros((1, 1, 5, 5))
    data[0, 0, 2, 2] = 1.0
    out = deconv2d(Tensor(data), Tensor(np.ones((1, 1, 4, 4))),
                   ConvSpec(1, 1, 4, 4, stride=2, padding=1, has_bias=False)).data[0, 0]
    assert out.shape == (10, 10)
    assert np.array_equal(out[3:7, 3:7], np.ones((4, 4)))
    assert out.sum() == 16.0


def test_deconv_is_adjoint_of_conv():
    """deconv2d(g) equals the gradient of conv2d with respect to its input under seed g."""
    rng = np.random.default_rng(1)
    spec = ConvSpec(3, 2, 4, 4, stride=2, padding=1, has_bias=False)
    weights = rng.standard_normal((3, 2, 4, 4))
    g = rng.standard_normal((2, 3, 6, 6))
    z = Tensor(rng.standard_normal((2, 2, 12, 12)), requires_grad=True)
    fwd = ConvSpec(2, 3, 4, 4, stride=2, padding=1, has_bias=False)
    conv2d(z, Tensor(weights), None, fwd).backward(g)
    up = deconv2d(Tensor(g), Tensor(weights), spec).data
    assert np.max(np.abs(up - z.grad)) < 1e-9


def test_grad_check_conv2d():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((1, 2, 5, 5)))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    b = Tensor(rng.standard_normal((1, 3, 1, 1)))
    spec = conv3x3(2, 3)
    assert grad_check(lambda: total(conv2d(x, w, b, spec)), [x, w, b]) < 1e-6


def test_grad_check_strided_dilated_conv_and_deconv():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((1, 2, 6, 6)))
    w = Tensor(rng.standard_normal((2, 2, 3, 3)))
    wd = Tensor(rng.standard_normal((2, 1, 4, 4)))
    bd = Tensor(rng.standard_normal((1, 1, 1, 1)))
    proj = Tensor(rng.standard_normal((1, 1, 6, 6)))
    conv = ConvSpec(2, 2, 3, 3, stride=2, padding=2, dilation=2, has_bias=False)
    up = ConvSpec(2, 1, 4, 4, stride=2, padding=1)

    def f():
        return total(mul(deconv2d(conv2d(x, w, None, conv), wd, up, bd), proj))

    assert grad_check(f, [x, w, wd, bd]) < 1e-5


def test_pooled_attention_constant_input_and_closed_form():
    """Equal logits split evenly; logits (1, 0) give the two-way softmax."""
    x = Tensor(np.full((1, 1, 4, 4), 3.0))
    weight = Tensor(np.zeros((2, 1, 1, 1)))
    even = adaptive_avgpool_fc_softmax(x, weight, Tensor(np.zeros((1, 2, 1, 1))), 2).data.reshape(-1)
    assert even.tolist() == [0.5, 0.5]
    bias = Tensor(np.array([1.0, 0.0]).reshape(1, 2, 1, 1))
    a = adaptive_avgpool_fc_softmax(x, weight, bias, 2).data.reshape(-1)
    e = math.e
    assert a[0] == pytest.approx(e / (e + 1), abs=1e-12)
    assert a[1] == pytest.approx(1 / (e + 1), abs=1e-12)


def test_pooled_attention_reads_pooled_mean():
    """With an identity fc weight the logits equal the pooled constant."""
    x = Tensor(np.full((1, 1, 3, 3), 2.0))
    weight = Tensor(np.array([1.0, 0.0]).reshape(2, 1, 1, 1))
    a = adaptive_avgpool_fc_softmax(x, weight, None, 2).data.reshape(-1)
    assert a[0] == pytest.approx(math.exp(2.0) / (math.exp(2.0) + 1.0), abs=1e-12)


def test_pooled_attention_rejects_single_group():
    with pytest.raises(ShapeError):
        adaptive_avgpool_fc_softmax(Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones((2, 2, 1, 1))), None, 1)


def test_layer_table_initialisation_and_apply():
    """He init fills weights, biases start at zero and zero_init layers stay zero."""
    layers = [
        LayerSpec("a", "conv", conv3x3(1, 4), (8, 8)),
        LayerSpec("b", "conv", conv1x1(4, 2), (8, 8)),
        LayerSpec("up", "deconv", ConvSpec(2, 2, 4, 4, stride=2, padding=1), (8, 8)),
    ]
    params = init_layer_params(layers, np.random.default_rng(0), zero_init=["b"])
    assert params["a.weight"].shape == (4, 1, 3, 3)
    assert params["up.weight"].shape == (2, 2, 4, 4)
    assert not np.any(params["b.weight"].data)
    assert not np.any(params["a.bias"].data)
    x = Tensor(np.random.default_rng(1).standard_normal((1, 1, 8, 8)))
    index = layer_index(layers)
    y = apply_layer(apply_layer(apply_layer(x, params, index["a"]), params, index["b"]), params, index["up"])
    assert y.shape == (1, 2, 16, 16)


def test_layer_index_rejects_duplicates():
    layers = [LayerSpec("a", "conv", conv1x1(1, 1), (1, 1))] * 2
    with pytest.raises(ShapeError, match="duplicate"):
        layer_index(layers)
