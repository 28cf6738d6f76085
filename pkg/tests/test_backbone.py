"""Tests for the backbone taps and the pyramid assembly."""
from dataclasses import replace

import numpy as np
import pytest

from backbone import backbone_forward, backbone_layers, build_pyramid, pyramid_layers
from config_manager import AffmConfig, NetConfig
from conv_ops import init_layer_params
from tensor import ShapeError, Tensor
from tests.conftest import tiny_net_config


def _run(net, seed=0):
    layers = backbone_layers(net) + pyramid_layers(net)
    params = init_layer_params(layers, np.random.default_rng(seed))
    image = Tensor(np.random.default_rng(seed + 1).uniform(0.0, 1.0, size=(2, 1, net.input_size, net.input_size)))
    taps = backbone_forward(image, params, net)
    return taps, build_pyramid(taps, params, net)


def test_tap_planes_follow_strides():
    """640 pixels give 80/40/20 tap planes, 320 pixels give 40/20/10."""
    for size, sides in ((640, (80, 40, 20)), (320, (40, 20, 10))):
        layers = {l.name: l for l in backbone_layers(NetConfig(input_size=size))}
        assert layers["backbone.conv4_3"].plane == (sides[0], sides[0])
        assert layers["backbone.conv5_3"].plane == (sides[1], sides[1])
        assert layers["backbone.conv7"].plane == (sides[2], sides[2])


def test_width_multiplier_scales_tap_channels():
    layers = {l.name: l for l in backbone_layers(NetConfig(width_multiplier=0.125))}
    assert layers["backbone.conv1_1"].spec.in_channels == 1
    assert layers["backbone.conv4_3"].spec.out_channels == 64
    assert layers["backbone.conv5_3"].spec.out_channels == 64
    assert layers["backbone.conv7"].spec.out_channels == 128


def test_forward_taps_and_pyramid_shapes(tiny_net):
    taps, pyramid = _run(tiny_net)
    assert [t.shape for t in taps] == [(2, 32, 8, 8), (2, 32, 4, 4), (2, 64, 2, 2)]
    c = tiny_net.affm.channels
    assert [p.shape for p in pyramid] == [(2, c, 8, 8), (2, c, 4, 4), (2, c, 2, 2)]
    assert all(np.all(np.isfinite(p.data)) for p in pyramid)


def test_forward_is_deterministic_under_seed(tiny_net):
    _, first = _run(tiny_net, seed=3)
    _, second = _run(tiny_net, seed=3)
    for a, b in zip(first, second):
        assert np.array_equal(a.data, b.data)


def test_pyramid_layers_built_top_down(tiny_net):
    names = [l.name for l in pyramid_layers(tiny_net)]
    first = {level: next(i for i, n in enumerate(names) if n.startswith(f"affm.{level}.")) for level in ("P2", "P3", "P4")}
    assert first["P4"] < first["P3"] < first["P2"]


def test_disabling_both_forward_paths_trims_p3_sources():
    net = tiny_net_config(affm=AffmConfig(channels=4, feature_forward_bm=False, feature_forward_mt=False))
    assert net.affm.level("P3").sources == ("same:conv5_3", "up:P4")
    _, pyramid = _run(net)
    assert pyramid[1].shape == (2, 4, 4, 4)


def test_plain_lateral_stack_still_builds(tiny_net):
    from config_manager import ModuleSwitches

    net = replace(tiny_net, modules=ModuleSwitches(dlcm=False))
    assert not any(l.kind == "deform" for l in pyramid_layers(net))
    _, pyramid = _run(net)
    assert pyramid[0].shape == (2, 4, 8, 8)


def test_rejects_sides_not_divisible_by_32(tiny_net):
    params = init_layer_params(backbone_layers(tiny_net), np.random.default_rng(0))
    with pytest.raises(ShapeError, match="divisible by 32"):
        backbone_forward(Tensor(np.zeros((1, 1, 48, 48))), params, tiny_net)


def test_rejects_multichannel_images(tiny_net):
    params = init_layer_params(backbone_layers(tiny_net), np.random.default_rng(0))
    with pytest.raises(ShapeError, match="single-channel"):
        backbone_forward(Tensor(np.zeros((1, 3, 64, 64))), params, tiny_net)
