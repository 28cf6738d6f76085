"""Tests for parameter and MAC accounting."""
from dataclasses import replace

import pytest

from complexity import complexity_report, format_table, layer_mac, layer_params, ledger, mac_count, params_count
from config_manager import ConfigError, ModuleSwitches, NetConfig
from constants import COMPLEXITY_TOLERANCE
from conv_ops import ConvSpec, LayerSpec, conv1x1, conv3x3
from model import AfranNet


def test_single_layer_examples():
    layer = LayerSpec("x", "conv", conv3x3(2, 4), (8, 8))
    assert layer_params(layer) == 76
    assert layer_mac(layer) == 4608
    assert layer_params(LayerSpec("y", "conv", conv1x1(8, 8, has_bias=False), (8, 8))) == 64


def test_deconv_mac_is_taken_on_the_input_plane():
    layer = LayerSpec("up", "deconv", ConvSpec(4, 2, 4, 4, stride=2, padding=1), (10, 10))
    assert layer_mac(layer) == 2 * 4 * 16 * 100


def test_repeat_multiplies_mac_only():
    once = LayerSpec("h", "deform", conv3x3(4, 4), (5, 5))
    thrice = once._replace(repeat=3)
    assert layer_mac(thrice) == 3 * layer_mac(once)
    assert layer_params(thrice) == layer_params(once)


def test_doubling_input_quadruples_spatial_layers():
    net = NetConfig(width_multiplier=0.125)
    small = {r.name: r for r in ledger(net)}
    big = {r.name: r for r in ledger(replace(net, input_size=2 * net.input_size))}
    for name, row in small.items():
        expected = row.mac if row.kind == "fc" else 4 * row.mac
        assert big[name].mac == expected, name
        assert big[name].params == row.params


def test_totals_are_additive():
    net = NetConfig(width_multiplier=0.125)
    per_layer, total = params_count(net)
    assert total == sum(per_layer.values())
    per_mac, mac_total = mac_count(net)
    assert mac_total == sum(r.mac for r in ledger(net))
    assert len(per_mac) == len(per_layer)


def test_ledger_counts_every_model_parameter(tiny_net):
    _, total = params_count(tiny_net)
    assert total == AfranNet(tiny_net).num_parameters()


def test_full_network_is_close_to_reference_size():
    report = complexity_report(NetConfig())
    assert abs(report["reference"]["params_deviation"]) <= COMPLEXITY_TOLERANCE
    assert abs(report["reference"]["mac_deviation"]) <= COMPLEXITY_TOLERANCE
    assert report["params_total"] == params_count(NetConfig())[1]
    assert (report["params_total"], report["mac_total"]) == (38_654_026, 164_358_730_752)


def test_module_switches_change_the_ledger():
    full = params_count(NetConfig())[1]
    no_dlcm = params_count(NetConfig(modules=ModuleSwitches(dlcm=False)))[1]
    no_sa = params_count(NetConfig(modules=ModuleSwitches(sa=False)))[1]
    assert no_dlcm < full
    assert no_sa != full


def test_mac_count_at_another_input_size_validates():
    with pytest.raises(ConfigError, match="divisible by 32"):
        mac_count(NetConfig(), input_size=100)


def test_format_table_lists_layers_and_total(tiny_net):
    rows = ledger(tiny_net)
    text = format_table(rows)
    lines = text.splitlines()
    assert lines[0].split()[:2] == ["layer", "kind"]
    assert lines[-1].startswith("total")
    assert f"{sum(r.params for r in rows):,}" in lines[-1]
    assert any(line.startswith("backbone.conv1_1") for line in lines)
