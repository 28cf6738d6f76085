"""Convolution, transposed convolution and the layer table shared with complexity accounting."""
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, NamedTuple, Tuple

import numpy as np

from accel import njit
from tensor import DTYPE, ShapeError, Tensor, global_avg_pool, group_softmax, parameter, record

logger = logging.getLogger(__name__)

Params = Dict[str, Tensor]


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    has_bias: bool = True

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w"):
            if getattr(self, name) < 1:
                raise ShapeError(f"ConvSpec.{name} must be positive, got {getattr(self, name)}")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ShapeError(
                f"ConvSpec needs stride >= 1, dilation >= 1, padding >= 0; got "
                f"stride={self.stride} dilation={self.dilation} padding={self.padding}"
            )

    @property
    def points(self) -> int:
        return self.kernel_h * self.kernel_w

    def output_size(self, h: int, w: int) -> Tuple[int, int]:
        ho = (h + 2 * self.padding - self.dilation * (self.kernel_h - 1) - 1) // self.stride + 1
        wo = (w + 2 * self.padding - self.dilation * (self.kernel_w - 1) - 1) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv: input {h}x{w} gives empty output {ho}x{wo} for {self}")
        return ho, wo

    def transposed_output_size(self, h: int, w: int) -> Tuple[int, int]:
        ho = (h - 1) * self.stride - 2 * self.padding + self.dilation * (self.kernel_h - 1) + 1
        wo = (w - 1) * self.stride - 2 * self.padding + self.dilation * (self.kernel_w - 1) + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"deconv: input {h}x{w} gives empty output {ho}x{wo} for {self}")
        return ho, wo


def conv3x3(c_in: int, c_out: int, stride: int = 1, dilation: int = 1) -> ConvSpec:
    return ConvSpec(c_in, c_out, 3, 3, stride=stride, padding=dilation, dilation=dilation)


def conv1x1(c_in: int, c_out: int, has_bias: bool = True) -> ConvSpec:
    return ConvSpec(c_in, c_out, 1, 1, has_bias=has_bias)


# ── patch-matrix helpers ─────────────────────────────────────────────────────

def _tap_slices(spec: ConvSpec, ho: int, wo: int):
    """Yield (point index, row slice, col slice) into the padded plane for each kernel point."""
    s, d = spec.stride, spec.dilation
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            rows = slice(i * d, i * d + s * (ho - 1) + 1, s)
            cols = slice(j * d, j * d + s * (wo - 1) + 1, s)
            yield i * spec.kernel_w + j, rows, cols


def im2col(x: np.ndarray, spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*K, Ho*Wo) patch matrix; row ``c*K + k`` is channel c at kernel point k."""
    n, c = x.shape[:2]
    p = spec.padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = np.empty((n, c, spec.points, ho, wo), dtype=DTYPE)
    for k, rows, cs in _tap_slices(spec, ho, wo):
        cols[:, :, k] = xp[:, :, rows, cs]
    return cols.reshape(n, c * spec.points, ho * wo)


def col2im(cols: np.ndarray, spec: ConvSpec, shape: Tuple[int, int, int, int], ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add a patch matrix back onto an (N, C, H, W) plane."""
    n, c, h, w = shape
    p = spec.padding
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=DTYPE)
    cols = cols.reshape(n, c, spec.points, ho, wo)
    for k, rows, cs in _tap_slices(spec, ho, wo):
        out[:, :, rows, cs] += cols[:, :, k]
    return out[:, :, p:p + h, p:p + w] if p else out


def columns_matmul(weights: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """(C_out, C*K) x (N, C*K, L) -> (N, C_out, L).

    Shared by the plain and deformable convolutions so a deformable
    convolution whose patch matrix equals the plain one produces identical
    bits.
    """
    return np.matmul(weights, cols)


def _check_bias(op: str, bias: Tensor | None, spec: ConvSpec) -> None:
    if spec.has_bias and bias is None:
        raise ShapeError(f"{op}: spec expects a bias of {spec.out_channels} values, none given")
    if bias is not None and bias.shape != (1, spec.out_channels, 1, 1):
        raise ShapeError(f"{op}: bias shape {bias.shape} != (1, {spec.out_channels}, 1, 1)")


# ── convolution ──────────────────────────────────────────────────────────────

def conv2d(x: Tensor, weights: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Cross-correlation with zero padding, via a patch matrix per batch."""
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"conv2d: input has {c} channels, spec expects {spec.in_channels}")
    expected = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
    if weights.shape != expected:
        raise ShapeError(f"conv2d: weights shape {weights.shape} != {expected}")
    _check_bias("conv2d", bias, spec)
    ho, wo = spec.output_size(h, w)

    cols = im2col(x.data, spec, ho, wo)
    w2 = weights.data.reshape(spec.out_channels, -1)
    out = columns_matmul(w2, cols).reshape(n, spec.out_channels, ho, wo)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(n, spec.out_channels, ho * wo)
        gx = col2im(np.matmul(w2.T, g2), spec, x.shape, ho, wo) if x.requires_grad else None
        gw = np.einsum("nol,nkl->ok", g2, cols).reshape(weights.shape) if weights.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1) if bias is not None else None
        return gx, gw, gb

    parents = (x, weights) + ((bias,) if bias is not None else ())
    if bias is None:
        return record(out, parents, lambda g: backward(g)[:2])
    return record(out, parents, backward)


def deconv2d(x: Tensor, weights: Tensor, spec: ConvSpec, bias: Tensor | None = None) -> Tensor:
    """Transposed convolution; ``weights`` are laid out (C_in, C_out, k_h, k_w).

    The output is the adjoint of :func:`conv2d` with the same spec read in
    reverse: each input pixel scatters its kernel-weighted values onto a
    stride-spaced window of the output.
    """
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"deconv2d: input has {c} channels, spec expects {spec.in_channels}")
    expected = (spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w)
    if weights.shape != expected:
        raise ShapeError(f"deconv2d: weights shape {weights.shape} != {expected}")
    if bias is not None or spec.has_bias:
        _check_bias("deconv2d", bias, spec)
    ho, wo = spec.transposed_output_size(h, w)
    # the forward conv that this transposes maps (ho, wo) back to (h, w)
    fwd = ConvSpec(spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w,
                   spec.stride, spec.padding, spec.dilation, has_bias=False)

    w2 = weights.data.reshape(spec.in_channels, -1)
    x2 = x.data.reshape(n, c, h * w)
    out = col2im(np.matmul(w2.T, x2), fwd, (n, spec.out_channels, ho, wo), h, w)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gcols = im2col(g, fwd, h, w)
        gx = columns_matmul(w2, gcols).reshape(x.shape) if x.requires_grad else None
        gw = np.einsum("ncl,nkl->ck", x2, gcols).reshape(weights.shape) if weights.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)

    parents = (x, weights) + ((bias,) if bias is not None else ())
    return record(out, parents, backward)


@njit(cache=False)
def _conv2d_loops(x, w, b, stride, pad, dil, ho, wo):
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    out = np.zeros((n, co, ho, wo))
    for bi in range(n):
        for o in range(co):
            for y in range(ho):
                for xo in range(wo):
                    acc = b[o]
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                yy = y * stride - pad + i * dil
                                xx = xo * stride - pad + j * dil
                                if 0 <= yy < h and 0 <= xx < wd:
                                    acc += w[o, ci, i, j] * x[bi, ci, yy, xx]
                    out[bi, o, y, xo] = acc
    return out


def conv2d_reference(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None, spec: ConvSpec) -> np.ndarray:
    """Direct nested-loop convolution, the oracle for :func:`conv2d`."""
    ho, wo = spec.output_size(x.shape[2], x.shape[3])
    b = np.zeros(spec.out_channels) if bias is None else np.asarray(bias, dtype=DTYPE).reshape(-1)
    return _conv2d_loops(np.ascontiguousarray(x, dtype=DTYPE), np.ascontiguousarray(weights, dtype=DTYPE),
                         b, spec.stride, spec.padding, spec.dilation, ho, wo)


# ── layer table ──────────────────────────────────────────────────────────────

class LayerSpec(NamedTuple):
    """One parameterised layer as it appears in the model and in the complexity ledger.

    ``plane`` is the spatial size the MAC count is taken over: the output
    plane for convolutions, the input plane for transposed convolutions.
    ``repeat`` multiplies the MAC count for layers evaluated once per anchor.
    """

    name: str
    kind: str  # conv | deconv | deform | fc
    spec: ConvSpec
    plane: Tuple[int, int]
    repeat: int = 1

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        s = self.spec
        if self.kind == "deconv":
            return (s.in_channels, s.out_channels, s.kernel_h, s.kernel_w)
        return (s.out_channels, s.in_channels, s.kernel_h, s.kernel_w)


def layer_index(layers: Iterable[LayerSpec]) -> Dict[str, LayerSpec]:
    index = {}
    for layer in layers:
        if layer.name in index:
            raise ShapeError(f"duplicate layer name {layer.name!r}")
        index[layer.name] = layer
    return index


def init_layer_params(layers: Iterable[LayerSpec], rng: np.random.Generator,
                      zero_init: Iterable[str] = (), small_init: Iterable[str] = (),
                      small_std: float = 0.01) -> Params:
    """He-normal weights and zero biases for every layer.

    Layers named in ``zero_init`` start at zero and those in ``small_init``
    draw from N(0, small_std^2).
    """
    zero = set(zero_init)
    small = set(small_init)
    params: Params = {}
    for layer in layers:
        shape = layer.weight_shape
        fan_in = layer.spec.in_channels * layer.spec.kernel_h * layer.spec.kernel_w
        if layer.name in zero:
            weight = np.zeros(shape, dtype=DTYPE)
        elif layer.name in small:
            weight = rng.standard_normal(shape) * small_std
        else:
            weight = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        params[f"{layer.name}.weight"] = parameter(weight, name=f"{layer.name}.weight")
        if layer.spec.has_bias:
            params[f"{layer.name}.bias"] = parameter(np.zeros((1, layer.spec.out_channels, 1, 1)),
                                                     name=f"{layer.name}.bias")
    return params


def apply_layer(x: Tensor, params: Params, layer: LayerSpec) -> Tensor:
    """Run a conv, fc or deconv layer from the table on ``x``."""
    weight = params[f"{layer.name}.weight"]
    bias = params.get(f"{layer.name}.bias")
    if layer.kind == "deconv":
        return deconv2d(x, weight, layer.spec, bias)
    if layer.kind in ("conv", "fc"):
        return conv2d(x, weight, bias, layer.spec)
    raise ShapeError(f"apply_layer: layer {layer.name!r} of kind {layer.kind!r} needs its own operator")


def adaptive_avgpool_fc_softmax(x: Tensor, fc_weight: Tensor, fc_bias: Tensor | None, groups: int) -> Tensor:
    """Pool to 1x1, apply a fully connected layer, softmax across groups.

    ``fc_weight`` has shape (groups * c, c, 1, 1); the result has shape
    (N, groups * c, 1, 1) and sums to one across groups for each channel.
    """
    if groups < 2:
        raise ShapeError(f"adaptive_avgpool_fc_softmax: attention over r={groups} group(s) is vacuous")
    out_ch, in_ch = fc_weight.shape[:2]
    spec = conv1x1(in_ch, out_ch, has_bias=fc_bias is not None)
    return group_softmax(conv2d(global_avg_pool(x), fc_weight, fc_bias, spec), groups)
