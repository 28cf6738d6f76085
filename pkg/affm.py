"""Attention feature fusion: multi-branch resampling, concatenation and split attention."""
import logging
from typing import List, Mapping, NamedTuple, Tuple

from config_manager import AffmLevelConfig, NetConfig
from constants import LEVELS, TAP_STRIDES
from conv_ops import ConvSpec, LayerSpec, Params, adaptive_avgpool_fc_softmax, apply_layer, conv1x1, conv2d, conv3x3
from tensor import ShapeError, Tensor, add, concat_channels, relu, scale_channels, slice_channels, split_channels

logger = logging.getLogger(__name__)

_TAP_WIDTHS = {"conv4_3": 512, "conv5_3": 512, "conv7": 1024}
_WARNED_SINGLE_SOURCE = set()


class SplitAttentionParams(NamedTuple):
    pre_weight: Tensor
    pre_bias: Tensor | None
    fc_weight: Tensor
    fc_bias: Tensor | None

    @classmethod
    def from_params(cls, params: Params, prefix: str) -> "SplitAttentionParams":
        return cls(params[f"{prefix}.pre.weight"], params.get(f"{prefix}.pre.bias"),
                   params[f"{prefix}.fc.weight"], params.get(f"{prefix}.fc.bias"))


def source_channels(net: NetConfig, name: str) -> int:
    if name in _TAP_WIDTHS:
        return net.width(_TAP_WIDTHS[name])
    return net.affm.channels


def _level_plane(net: NetConfig, level: str) -> Tuple[int, int]:
    side = net.input_size // TAP_STRIDES[LEVELS.index(level)]
    return side, side


def affm_layers(net: NetConfig, level: str) -> List[LayerSpec]:
    """Layer table of one fusion level, branches first, then attention or fusion conv."""
    lvl = net.affm.level(level, net.modules.sa)
    c = lvl.channels
    plane = _level_plane(net, level)
    prefix = f"affm.{level}"
    layers = []
    for tag in lvl.sources:
        branch, src = tag.split(":")
        c_in = source_channels(net, src)
        name = f"{prefix}.{src}"
        if branch == "down":
            layers.append(LayerSpec(f"{name}.down", "conv", conv3x3(c_in, c, stride=2), plane))
            layers.append(LayerSpec(f"{name}.conv", "conv", conv3x3(c, c), plane))
        elif branch == "same":
            layers.append(LayerSpec(f"{name}.conv1", "conv", conv3x3(c_in, c), plane))
            layers.append(LayerSpec(f"{name}.conv2", "conv", conv3x3(c, c), plane))
        else:
            layers.append(LayerSpec(f"{name}.deconv", "deconv", ConvSpec(c_in, c, 4, 4, stride=2, padding=1),
                                    (plane[0] // 2, plane[1] // 2)))
    if lvl.r < 2:
        return layers
    if lvl.split_attention:
        layers.append(LayerSpec(f"{prefix}.sa.pre", "conv", conv1x1(lvl.r * c, lvl.r * c), plane))
        layers.append(LayerSpec(f"{prefix}.sa.fc", "fc", conv1x1(c, lvl.r * c), (1, 1)))
    else:
        layers.append(LayerSpec(f"{prefix}.fuse", "conv", conv1x1(lvl.r * c, c), plane))
    return layers


def affm_concat(sources: Mapping[str, Tensor], params: Params, cfg: AffmLevelConfig,
                layers: Mapping[str, LayerSpec]) -> Tensor:
    """Bring every source of the level to a common size and width and stack them (C_i)."""
    prefix = f"affm.{cfg.level}"
    branches = []
    for tag in cfg.sources:
        branch, src = tag.split(":")
        if src not in sources:
            raise ShapeError(f"affm {cfg.level}: source map {src!r} was not supplied")
        x = sources[src]
        name = f"{prefix}.{src}"
        if branch == "down":
            x = relu(apply_layer(x, params, layers[f"{name}.down"]))
            x = relu(apply_layer(x, params, layers[f"{name}.conv"]))
        elif branch == "same":
            x = relu(apply_layer(x, params, layers[f"{name}.conv1"]))
            x = relu(apply_layer(x, params, layers[f"{name}.conv2"]))
        else:
            x = relu(apply_layer(x, params, layers[f"{name}.deconv"]))
        branches.append(x)
    sizes = {b.shape[2:] for b in branches}
    if len(sizes) > 1:
        raise ShapeError(f"affm {cfg.level}: branch sizes disagree after resampling: {sorted(sizes)}")
    return concat_channels(branches)


def split_attention(c_i: Tensor, sa: SplitAttentionParams, r: int) -> Tensor:
    """Weight r channel groups by a softmax over pooled statistics and sum them (I_i).

    The pre-conv keeps all ``r * c`` channels; its output is split into
    K_1..K_r, pooled after summation, mapped to ``r * c`` logits by a single
    fully connected layer and normalised across groups per channel.
    """
    if r < 2:
        raise ShapeError(f"split_attention: r={r} leaves nothing to attend over")
    if c_i.shape[1] % r:
        raise ShapeError(f"split_attention: {c_i.shape[1]} channels not divisible by r={r}")
    rc = c_i.shape[1]
    c = rc // r
    pre = conv2d(c_i, sa.pre_weight, sa.pre_bias, conv1x1(rc, rc, has_bias=sa.pre_bias is not None))
    groups = split_channels(pre, r)
    summed = groups[0]
    for g in groups[1:]:
        summed = add(summed, g)
    attention = adaptive_avgpool_fc_softmax(summed, sa.fc_weight, sa.fc_bias, r)
    out = None
    for idx, k_g in enumerate(groups):
        weighted = scale_channels(k_g, slice_channels(attention, idx * c, (idx + 1) * c))
        out = weighted if out is None else add(out, weighted)
    return out


def affm_forward(sources: Mapping[str, Tensor], params: Params, net: NetConfig, level: str) -> Tensor:
    """Fuse the sources of ``level`` into the refined map I_i with ``affm.channels`` channels."""
    cfg = net.affm.level(level, net.modules.sa)
    layers = {l.name: l for l in affm_layers(net, level)}
    c_i = affm_concat(sources, params, cfg, layers)
    prefix = f"affm.{level}"
    if cfg.r < 2:
        if level not in _WARNED_SINGLE_SOURCE:
            _WARNED_SINGLE_SOURCE.add(level)
            logger.warning("affm %s has a single source map; split attention skipped", level)
        return c_i
    if cfg.split_attention:
        return split_attention(c_i, SplitAttentionParams.from_params(params, f"{prefix}.sa"), cfg.r)
    return apply_layer(c_i, params, layers[f"{prefix}.fuse"])
