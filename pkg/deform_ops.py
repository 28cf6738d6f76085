"""Modulated deformable convolution and the deformable lateral connection stack."""
import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from accel import njit
from config_manager import DlcmConfig
from conv_ops import ConvSpec, LayerSpec, Params, apply_layer, columns_matmul, conv3x3
from tensor import DTYPE, BilinearPlan, ShapeError, Tensor, bilinear_at, record, relu, sigmoid

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeformConvSpec:
    base: ConvSpec
    modulated: bool = True

    @property
    def K(self) -> int:
        return self.base.points


def _kernel_grid(spec: ConvSpec, ho: int, wo: int) -> Tuple[np.ndarray, np.ndarray]:
    """Undeformed sampling rows/cols, each (K, Ho*Wo), kernel points row-major."""
    ki, kj = np.meshgrid(np.arange(spec.kernel_h), np.arange(spec.kernel_w), indexing="ij")
    oy, ox = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    rows = (oy.reshape(1, -1) * spec.stride - spec.padding) + ki.reshape(-1, 1) * spec.dilation
    cols = (ox.reshape(1, -1) * spec.stride - spec.padding) + kj.reshape(-1, 1) * spec.dilation
    return rows.astype(DTYPE), cols.astype(DTYPE)


def _check_inputs(x: Tensor, weights: Tensor, offsets: Tensor, mask: Tensor, spec: DeformConvSpec):
    base = spec.base
    n, c, h, w = x.shape
    if c != base.in_channels:
        raise ShapeError(f"modulated_deform_conv2d: input has {c} channels, spec expects {base.in_channels}")
    expected = (base.out_channels, base.in_channels, base.kernel_h, base.kernel_w)
    if weights.shape != expected:
        raise ShapeError(f"modulated_deform_conv2d: weights shape {weights.shape} != {expected}")
    ho, wo = base.output_size(h, w)
    if offsets.shape != (n, 2 * spec.K, ho, wo):
        raise ShapeError(
            f"modulated_deform_conv2d: offsets shape {offsets.shape} != {(n, 2 * spec.K, ho, wo)} for K={spec.K}"
        )
    if mask.shape != (n, spec.K, ho, wo):
        raise ShapeError(f"modulated_deform_conv2d: mask shape {mask.shape} != {(n, spec.K, ho, wo)} for K={spec.K}")
    return ho, wo


def modulated_deform_conv2d(x: Tensor, weights: Tensor, offsets: Tensor, mask: Tensor,
                            spec: DeformConvSpec, bias: Tensor | None = None) -> Tensor:
    """Deformable convolution with per-point modulation.

    ``offsets`` carries interleaved (dy, dx) pairs per kernel point: channel
    ``2k`` is the row shift and ``2k + 1`` the column shift of point ``k``,
    with kernel points in row-major order. Samples are read bilinearly with
    zero padding and scaled by ``mask[:, k]`` before the weighted sum.
    """
    ho, wo = _check_inputs(x, weights, offsets, mask, spec)
    base = spec.base
    if bias is not None and bias.shape != (1, base.out_channels, 1, 1):
        raise ShapeError(f"modulated_deform_conv2d: bias shape {bias.shape} != (1, {base.out_channels}, 1, 1)")
    n, c, h, w = x.shape
    k = spec.K
    length = ho * wo
    grid_y, grid_x = _kernel_grid(base, ho, wo)

    plans = []
    vals = np.empty((n, c, k, length), dtype=DTYPE)
    for b in range(n):
        off = offsets.data[b].reshape(k, 2, length)
        plan = BilinearPlan(grid_y + off[:, 0], grid_x + off[:, 1], h, w)
        plans.append(plan)
        vals[b] = plan.gather(x.data[b])
    m = mask.data.reshape(n, 1, k, length)
    cols = (vals * m).reshape(n, c * k, length)
    w2 = weights.data.reshape(base.out_channels, -1)
    out = columns_matmul(w2, cols).reshape(n, base.out_channels, ho, wo)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(n, base.out_channels, length)
        gcols = np.matmul(w2.T, g2).reshape(n, c, k, length)
        gw = np.einsum("nol,nkl->ok", g2, cols).reshape(weights.shape)
        gmask = (gcols * vals).sum(axis=1).reshape(mask.shape)
        gvals = gcols * m
        gx = np.zeros_like(x.data)
        goff = np.zeros((n, k, 2, length), dtype=DTYPE)
        for b, plan in enumerate(plans):
            if x.requires_grad:
                gx[b] = plan.scatter(gvals[b])
            dy, dx = plan.position_grads(x.data[b])
            goff[b, :, 0] = (gvals[b] * dy).sum(axis=0)
            goff[b, :, 1] = (gvals[b] * dx).sum(axis=0)
        grads = (gx, gw, goff.reshape(offsets.shape), gmask)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1),)
        return grads

    parents = (x, weights, offsets, mask) + ((bias,) if bias is not None else ())
    return record(out, parents, backward)


@njit(cache=False)
def _deform_loops(x, w, off, msk, stride, pad, dil, ho, wo):
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for y in range(ho):
                for xo in range(wo):
                    acc = 0.0
                    for i in range(kh):
                        for j in range(kw):
                            k = i * kw + j
                            py = y * stride - pad + i * dil + off[b, 2 * k, y, xo]
                            px = xo * stride - pad + j * dil + off[b, 2 * k + 1, y, xo]
                            for ci in range(c):
                                acc += w[o, ci, i, j] * bilinear_at(x[b, ci], py, px) * msk[b, k, y, xo]
                    out[b, o, y, xo] = acc
    return out


def modulated_deform_conv2d_reference(x: np.ndarray, weights: np.ndarray, offsets: np.ndarray,
                                      mask: np.ndarray, spec: DeformConvSpec) -> np.ndarray:
    """Per-position bilinear gather and sum, the oracle for :func:`modulated_deform_conv2d` (no bias)."""
    base = spec.base
    ho, wo = base.output_size(x.shape[2], x.shape[3])
    return _deform_loops(np.ascontiguousarray(x, dtype=DTYPE), np.ascontiguousarray(weights, dtype=DTYPE),
                         np.ascontiguousarray(offsets, dtype=DTYPE), np.ascontiguousarray(mask, dtype=DTYPE),
                         base.stride, base.padding, base.dilation, ho, wo)


# ── lateral connection stack ─────────────────────────────────────────────────

def dlcm_layers(prefix: str, cfg: DlcmConfig, level: str, plane: Tuple[int, int],
                deformable: bool = True) -> List[LayerSpec]:
    """Layer table for one level's lateral stack, ``cfg.channels`` wide.

    Each deformable unit owns an offset conv (2K outputs), a mask conv (K
    outputs) and the k x k deformable conv itself. With ``deformable`` off the
    unit is a single plain 3x3 conv at the same dilation.
    """
    d = cfg.dilation_for(level)
    channels = cfg.channels
    main = conv3x3(channels, channels, dilation=d)
    layers = []
    for u in range(cfg.stack_depth):
        name = f"{prefix}.unit{u}"
        if deformable:
            layers.append(LayerSpec(f"{name}.offset", "conv", conv3x3(channels, 2 * main.points), plane))
            layers.append(LayerSpec(f"{name}.mask", "conv", conv3x3(channels, main.points), plane))
            layers.append(LayerSpec(f"{name}.deform", "deform", main, plane))
        else:
            layers.append(LayerSpec(f"{name}.conv", "conv", main, plane))
    return layers


def dlcm_zero_init(layers: List[LayerSpec]) -> List[str]:
    """Offset and mask convs start at zero so training begins from a half-masked plain conv."""
    return [l.name for l in layers if l.name.endswith((".offset", ".mask"))]


def dlcm_unit(x: Tensor, params: Params, offset_layer: LayerSpec, mask_layer: LayerSpec,
              deform_layer: LayerSpec) -> Tensor:
    """One modulated deformable unit, before its activation."""
    offsets = apply_layer(x, params, offset_layer)
    mask = sigmoid(apply_layer(x, params, mask_layer))
    return modulated_deform_conv2d(
        x,
        params[f"{deform_layer.name}.weight"],
        offsets,
        mask,
        DeformConvSpec(deform_layer.spec),
        params.get(f"{deform_layer.name}.bias"),
    )


def dlcm_forward(x: Tensor, params: Params, cfg: DlcmConfig, level: str, prefix: str,
                 deformable: bool = True) -> Tensor:
    """Apply the stacked units of one level; each unit is followed by relu and preserves spatial size."""
    if x.shape[1] != cfg.channels:
        raise ShapeError(f"{prefix}: input has {x.shape[1]} channels, dlcm is {cfg.channels} wide")
    layers = dlcm_layers(prefix, cfg, level, x.shape[2:], deformable)
    if deformable:
        for u in range(cfg.stack_depth):
            x = relu(dlcm_unit(x, params, *layers[3 * u:3 * u + 3]))
    else:
        for layer in layers:
            x = relu(apply_layer(x, params, layer))
    return x
