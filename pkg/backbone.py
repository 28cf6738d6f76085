"""Truncated VGG-16 backbone and the top-down fine-grained pyramid built on it."""
import logging
from typing import Dict, List, Tuple

from affm import affm_forward, affm_layers
from config_manager import NetConfig
from constants import LEVELS, TAP_STRIDES, TAPS
from conv_ops import ConvSpec, LayerSpec, Params, apply_layer, conv3x3
from deform_ops import dlcm_forward, dlcm_layers
from tensor import ShapeError, Tensor, max_pool2d, relu

logger = logging.getLogger(__name__)

# (block, convs, base width); a 2x2 max pool follows every block
_VGG_BLOCKS = (
    ("conv1", 2, 64),
    ("conv2", 2, 128),
    ("conv3", 3, 256),
    ("conv4", 3, 512),
    ("conv5", 3, 512),
)


def backbone_layers(net: NetConfig) -> List[LayerSpec]:
    layers = []
    c_in = 1
    side = net.input_size
    for block, count, base in _VGG_BLOCKS:
        c_out = net.width(base)
        for i in range(1, count + 1):
            layers.append(LayerSpec(f"backbone.{block}_{i}", "conv", conv3x3(c_in, c_out), (side, side)))
            c_in = c_out
        side //= 2
    c6 = net.width(1024)
    layers.append(LayerSpec("backbone.conv6", "conv", conv3x3(c_in, c6, dilation=3), (side, side)))
    layers.append(LayerSpec("backbone.conv7", "conv", ConvSpec(c6, c6, 1, 1), (side, side)))
    return layers


def backbone_forward(image: Tensor, params: Params, net: NetConfig) -> Tuple[Tensor, Tensor, Tensor]:
    """Return the (conv4_3, conv5_3, conv7) taps at strides 8, 16 and 32."""
    n, c, h, w = image.shape
    if c != 1:
        raise ShapeError(f"backbone: expected single-channel images, got {c} channels")
    if h != w or h % 32:
        raise ShapeError(f"backbone: image side must be square and divisible by 32, got {h}x{w}")
    layers = {l.name: l for l in backbone_layers(net)}
    x = image
    taps = {}
    for block, count, _ in _VGG_BLOCKS:
        for i in range(1, count + 1):
            x = relu(apply_layer(x, params, layers[f"backbone.{block}_{i}"]))
        if block in ("conv4", "conv5"):
            taps[f"{block}_3"] = x
        x = max_pool2d(x, 2)
    x = relu(apply_layer(x, params, layers["backbone.conv6"]))
    x = relu(apply_layer(x, params, layers["backbone.conv7"]))
    return taps["conv4_3"], taps["conv5_3"], x


def pyramid_layers(net: NetConfig) -> List[LayerSpec]:
    """Fusion and lateral-stack layers in construction order P4, P3, P2."""
    layers = []
    for level in reversed(LEVELS):
        side = net.input_size // TAP_STRIDES[LEVELS.index(level)]
        layers.extend(affm_layers(net, level))
        layers.extend(dlcm_layers(f"dlcm.{level}", net.dlcm, level, (side, side), deformable=net.modules.dlcm))
    return layers


def build_pyramid(taps: Tuple[Tensor, Tensor, Tensor], params: Params, net: NetConfig) -> Tuple[Tensor, Tensor, Tensor]:
    """Assemble (P2, P3, P4) top-down: each level fuses its sources, then runs its lateral stack."""
    maps: Dict[str, Tensor] = dict(zip(TAPS, taps))
    for level in reversed(LEVELS):
        fused = affm_forward(maps, params, net, level)
        maps[level] = dlcm_forward(fused, params, net.dlcm, level, f"dlcm.{level}", deformable=net.modules.dlcm)
    return maps["P2"], maps["P3"], maps["P4"]
