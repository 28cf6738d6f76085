"""Parameter and multiply-accumulate accounting over the network's layer table."""
import logging
from dataclasses import replace
from typing import Dict, List, NamedTuple, Tuple

from config_manager import NetConfig
from constants import COMPLEXITY_TOLERANCE, REFERENCE_MAC, REFERENCE_PARAMS
from conv_ops import LayerSpec, layer_index
from model import layer_table

logger = logging.getLogger(__name__)


class LayerCost(NamedTuple):
    name: str
    kind: str
    c_in: int
    c_out: int
    k_h: int
    k_w: int
    h_o: int
    w_o: int
    repeat: int
    params: int
    mac: int


def layer_params(layer: LayerSpec) -> int:
    """C_out * (k_h * k_w * C_in + 1); the +1 only for layers with a bias."""
    s = layer.spec
    return s.out_channels * (s.kernel_h * s.kernel_w * s.in_channels + (1 if s.has_bias else 0))


def layer_mac(layer: LayerSpec) -> int:
    """C_out * C_in * k_h * k_w * H * W over the layer's plane, times its repeat count."""
    s = layer.spec
    h, w = layer.plane
    return s.out_channels * s.in_channels * s.kernel_h * s.kernel_w * h * w * layer.repeat


def ledger(net: NetConfig) -> List[LayerCost]:
    layers = layer_index(layer_table(net)).values()
    return [
        LayerCost(l.name, l.kind, l.spec.in_channels, l.spec.out_channels, l.spec.kernel_h, l.spec.kernel_w,
                  l.plane[0], l.plane[1], l.repeat, layer_params(l), layer_mac(l))
        for l in layers
    ]


def params_count(net: NetConfig) -> Tuple[Dict[str, int], int]:
    per_layer = {row.name: row.params for row in ledger(net)}
    return per_layer, sum(per_layer.values())


def mac_count(net: NetConfig, input_size: int | None = None) -> Tuple[Dict[str, int], int]:
    if input_size is not None and input_size != net.input_size:
        net = replace(net, input_size=input_size)
        net.validate()
    per_layer = {row.name: row.mac for row in ledger(net)}
    return per_layer, sum(per_layer.values())


def _relative(value: float, reference: float) -> float:
    return (value - reference) / reference


def complexity_report(net: NetConfig) -> dict:
    """Per-layer ledger, totals and the deviation from the reference network size."""
    rows = ledger(net)
    params = sum(r.params for r in rows)
    mac = sum(r.mac for r in rows)
    dev_p = _relative(params, REFERENCE_PARAMS)
    dev_m = _relative(mac, REFERENCE_MAC)
    if abs(dev_p) > COMPLEXITY_TOLERANCE or abs(dev_m) > COMPLEXITY_TOLERANCE:
        logger.info("Complexity differs from the reference by %.1f%% params, %.1f%% MAC "
                    "(expected for non-reference widths)", 100 * dev_p, 100 * dev_m)
    return {
        "input_size": net.input_size,
        "width_multiplier": net.width_multiplier,
        "layers": [r._asdict() for r in rows],
        "params_total": params,
        "mac_total": mac,
        "reference": {
            "params": REFERENCE_PARAMS,
            "mac": REFERENCE_MAC,
            "params_deviation": dev_p,
            "mac_deviation": dev_m,
            "tolerance": COMPLEXITY_TOLERANCE,
        },
    }


def format_table(rows: List[LayerCost]) -> str:
    header = ("layer", "kind", "C_in", "C_out", "k", "H_o", "W_o", "rep", "params", "MAC")
    body = [(r.name, r.kind, str(r.c_in), str(r.c_out), f"{r.k_h}x{r.k_w}", str(r.h_o), str(r.w_o),
             str(r.repeat), f"{r.params:,}", f"{r.mac:,}") for r in rows]
    total_p = sum(r.params for r in rows)
    total_m = sum(r.mac for r in rows)
    footer = ("total", "", "", "", "", "", "", "", f"{total_p:,}", f"{total_m:,}")
    table = [header] + body + [footer]
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]

    def fmt(row):
        cells = [row[0].ljust(widths[0]), row[1].ljust(widths[1])]
        cells += [cell.rjust(w) for cell, w in zip(row[2:], widths[2:])]
        return "  ".join(cells).rstrip()

    rule = "-" * len(fmt(header))
    return "\n".join([fmt(header), rule] + [fmt(r) for r in body] + [rule, fmt(footer)])
