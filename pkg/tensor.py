"""Dense rank-4 tensors with reverse-mode differentiation.

Every value flowing through the network is a :class:`Tensor` in
batch-channel-height-width layout holding 64-bit floats. Operations record
their parents and a backward closure; :meth:`Tensor.backward` walks the
recorded graph in reverse topological order and accumulates gradients.
"""
import contextlib
import logging
import math
from typing import Callable, Iterable, List, Sequence, Tuple

import numpy as np

from accel import njit

logger = logging.getLogger(__name__)

DTYPE = np.float64

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when an operation receives tensors of incompatible shape."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, parameter updates)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Rank-4 float64 array with optional gradient storage."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True) if not isinstance(data, np.ndarray) else data
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor must be rank 4 (N, C, H, W), got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.data.shape

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Back-propagate from this tensor through the recorded graph."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if grad.shape != self.data.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order: List[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        grads = {id(self): np.array(grad, dtype=DTYPE, copy=True)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap the result of an operation, recording it when a parent needs gradients.

    ``backward(g)`` receives the output gradient and returns one gradient
    (or ``None``) per parent, in order.
    """
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes differ, {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    for sa, sb in zip(a.shape, b.shape):
        if sa != sb and sa != 1 and sb != 1:
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ── elementwise ──────────────────────────────────────────────────────────────

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    y[~pos] = ex / (1.0 + ex)
    return record(y, (x,), lambda g: (g * y * (1.0 - y),))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    return record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale_channels(x: Tensor, weights: Tensor) -> Tensor:
    """Multiply each (N, C) plane of ``x`` by the matching entry of an (N, C, 1, 1) tensor."""
    n, c = x.shape[:2]
    if weights.shape != (n, c, 1, 1):
        raise ShapeError(f"scale_channels: weights {weights.shape} do not match planes of {x.shape}")
    _check_broadcast("scale_channels", x, weights)
    return record(
        x.data * weights.data,
        (x, weights),
        lambda g: (g * weights.data, _unbroadcast(g * x.data, weights.shape)),
    )


def scale(x: Tensor, factor: float) -> Tensor:
    return record(x.data * factor, (x,), lambda g: (g * factor,))


def total(x: Tensor) -> Tensor:
    """Sum of every element as a (1, 1, 1, 1) tensor."""
    shape = x.shape
    return record(
        np.array(x.data.sum()).reshape(1, 1, 1, 1),
        (x,),
        lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),),
    )


def reshape(x: Tensor, shape: Tuple[int, int, int, int]) -> Tensor:
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    original = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),))


# ── channel plumbing ─────────────────────────────────────────────────────────

def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis``; all other axes must agree."""
    if not tensors:
        raise ShapeError("concat: empty input list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        for ax in range(4):
            if ax != axis and t.shape[ax] != ref[ax]:
                raise ShapeError(f"concat(axis={axis}): shapes {ref} and {t.shape} disagree on axis {ax}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=1)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_channels: [{start}, {stop}) outside {x.shape[1]} channels")
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[:, start:stop] = g
        return (full,)

    return record(x.data[:, start:stop].copy(), (x,), backward)


def split_channels(x: Tensor, parts: int) -> List[Tensor]:
    """Split the channel axis into ``parts`` equal groups."""
    if parts < 1 or x.shape[1] % parts:
        raise ShapeError(f"split_channels: {x.shape[1]} channels not divisible into {parts} groups")
    width = x.shape[1] // parts
    return [slice_channels(x, i * width, (i + 1) * width) for i in range(parts)]


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Select entries along the batch axis (anchor rows)."""
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return record(x.data[index], (x,), backward)


def anchor_rows(x: Tensor, per_anchor: int) -> Tensor:
    """Reshape an (N, A*D, H, W) head map into (N*H*W*A, D, 1, 1) anchor rows.

    Rows are ordered by image, then cell row, then cell column, then anchor,
    matching the order of :func:`anchors.generate_anchors`.
    """
    n, c, h, w = x.shape
    if c % per_anchor:
        raise ShapeError(f"anchor_rows: {c} channels not divisible by {per_anchor}")
    a = c // per_anchor
    shape = x.shape

    def backward(g):
        back = g.reshape(n, h, w, a, per_anchor).transpose(0, 3, 4, 1, 2).reshape(shape)
        return (np.ascontiguousarray(back),)

    data = x.data.reshape(n, a, per_anchor, h, w).transpose(0, 3, 4, 1, 2).reshape(n * h * w * a, per_anchor, 1, 1)
    return record(np.ascontiguousarray(data), (x,), backward)


# ── pooling and attention ────────────────────────────────────────────────────

def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; spatial sizes must be divisible by ``size``."""
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"max_pool2d: spatial size {(h, w)} not divisible by {size}")
    blocks = x.data.reshape(n, c, h // size, size, w // size, size).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // size, w // size, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((n, c, h // size, w // size, size * size), dtype=DTYPE)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // size, w // size, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return record(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Adaptive average pooling to 1x1."""
    n, c, h, w = x.shape
    area = float(h * w)
    return record(
        x.data.mean(axis=(2, 3), keepdims=True),
        (x,),
        lambda g: (np.broadcast_to(g / area, (n, c, h, w)).copy(),),
    )


def group_softmax(x: Tensor, groups: int) -> Tensor:
    """Softmax across ``groups`` channel blocks, independently per channel.

    Input channels are laid out group-major: channel ``g * c + j`` is channel
    ``j`` of group ``g``.
    """
    if groups < 2:
        raise ShapeError(f"group_softmax: attention over {groups} group(s) is vacuous, need r >= 2")
    n, ch, h, w = x.shape
    if ch % groups:
        raise ShapeError(f"group_softmax: {ch} channels not divisible by r={groups}")
    c = ch // groups
    z = x.data.reshape(n, groups, c, h, w)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        g5 = g.reshape(n, groups, c, h, w)
        inner = (g5 * p).sum(axis=1, keepdims=True)
        return ((p * (g5 - inner)).reshape(n, ch, h, w),)

    return record(p.reshape(n, ch, h, w), (x,), backward)


# ── bilinear sampling ────────────────────────────────────────────────────────

def bilinear_sample(x: Tensor, px: float, py: float, channel: int, batch: int) -> float:
    """Bilinear interpolation of one plane at fractional position (px, py).

    ``px`` is the column and ``py`` the row, in array index units. Neighbours
    outside the plane count as zero, so any position at or beyond one pixel
    past the border reads 0.0.
    """
    plane = x.data[batch, channel]
    return float(bilinear_at(plane, float(py), float(px)))


def bilinear_sample_grad(x: Tensor, px: float, py: float, channel: int, batch: int) -> Tuple[float, float]:
    """Partial derivatives of :func:`bilinear_sample` with respect to (px, py)."""
    plane = x.data[batch, channel]
    dy, dx = _bilinear_position_grad(plane, float(py), float(px))
    return float(dx), float(dy)


@njit(cache=False)
def bilinear_at(plane, y, x):
    h, w = plane.shape
    if y <= -1.0 or y >= h or x <= -1.0 or x >= w:
        return 0.0
    y0 = int(math.floor(y))
    x0 = int(math.floor(x))
    ly = y - y0
    lx = x - x0
    hy = 1.0 - ly
    hx = 1.0 - lx
    v00 = plane[y0, x0] if (y0 >= 0 and x0 >= 0) else 0.0
    v01 = plane[y0, x0 + 1] if (y0 >= 0 and x0 + 1 <= w - 1) else 0.0
    v10 = plane[y0 + 1, x0] if (y0 + 1 <= h - 1 and x0 >= 0) else 0.0
    v11 = plane[y0 + 1, x0 + 1] if (y0 + 1 <= h - 1 and x0 + 1 <= w - 1) else 0.0
    return hy * hx * v00 + hy * lx * v01 + ly * hx * v10 + ly * lx * v11


@njit(cache=False)
def _bilinear_position_grad(plane, y, x):
    h, w = plane.shape
    if y <= -1.0 or y >= h or x <= -1.0 or x >= w:
        return 0.0, 0.0
    y0 = int(math.floor(y))
    x0 = int(math.floor(x))
    ly = y - y0
    lx = x - x0
    hy = 1.0 - ly
    hx = 1.0 - lx
    v00 = plane[y0, x0] if (y0 >= 0 and x0 >= 0) else 0.0
    v01 = plane[y0, x0 + 1] if (y0 >= 0 and x0 + 1 <= w - 1) else 0.0
    v10 = plane[y0 + 1, x0] if (y0 + 1 <= h - 1 and x0 >= 0) else 0.0
    v11 = plane[y0 + 1, x0 + 1] if (y0 + 1 <= h - 1 and x0 + 1 <= w - 1) else 0.0
    dy = hx * (v10 - v00) + lx * (v11 - v01)
    dx = hy * (v01 - v00) + ly * (v11 - v10)
    return dy, dx


class BilinearPlan:
    """Neighbour indices and weights for sampling an (H, W) plane at many points.

    ``ys`` and ``xs`` are arrays of equal shape in array index units. The plan
    is reused for the forward gather, the scatter of value gradients and the
    position gradients, so all three agree on the zero-padding convention.
    """

    def __init__(self, ys: np.ndarray, xs: np.ndarray, height: int, width: int):
        ys = np.asarray(ys, dtype=DTYPE)
        xs = np.asarray(xs, dtype=DTYPE)
        self.shape = ys.shape
        self.height = height
        self.width = width
        inside = (ys > -1.0) & (ys < height) & (xs > -1.0) & (xs < width)
        y0 = np.floor(ys)
        x0 = np.floor(xs)
        ly = ys - y0
        lx = xs - x0
        hy = 1.0 - ly
        hx = 1.0 - lx
        y0 = y0.astype(np.int64)
        x0 = x0.astype(np.int64)
        self.ly, self.lx, self.hy, self.hx = ly, lx, hy, hx
        corners = ((y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1))
        self.weights = (hy * hx, hy * lx, ly * hx, ly * lx)
        self.index = []
        self.valid = []
        for cy, cx in corners:
            ok = inside & (cy >= 0) & (cy <= height - 1) & (cx >= 0) & (cx <= width - 1)
            self.valid.append(ok)
            self.index.append(np.where(ok, np.clip(cy, 0, height - 1) * width + np.clip(cx, 0, width - 1), 0))

    def corner_values(self, planes: np.ndarray) -> List[np.ndarray]:
        """Values of the four neighbours for each plane, (C, *shape) each."""
        flat = planes.reshape(planes.shape[0], -1)
        return [np.where(ok, flat[:, idx], 0.0) for idx, ok in zip(self.index, self.valid)]

    def gather(self, planes: np.ndarray) -> np.ndarray:
        v00, v01, v10, v11 = self.corner_values(planes)
        w00, w01, w10, w11 = self.weights
        return w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def position_grads(self, planes: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """d(sample)/dy and d(sample)/dx for each plane, zero outside the plane."""
        v00, v01, v10, v11 = self.corner_values(planes)
        dy = self.hx * (v10 - v00) + self.lx * (v11 - v01)
        dx = self.hy * (v01 - v00) + self.ly * (v11 - v10)
        return dy, dx

    def scatter(self, grad_samples: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`gather`: accumulate (C, *shape) gradients into (C, H, W)."""
        c = grad_samples.shape[0]
        out = np.zeros((c, self.height * self.width), dtype=DTYPE)
        flat_g = grad_samples.reshape(c, -1)
        for idx, ok, wgt in zip(self.index, self.valid, self.weights):
            sel = ok.reshape(-1)
            if not sel.any():
                continue
            contrib = flat_g[:, sel] * wgt.reshape(-1)[sel]
            target = idx.reshape(-1)[sel]
            for ch in range(c):
                out[ch] += np.bincount(target, weights=contrib[ch], minlength=self.height * self.width)
        return out.reshape(c, self.height, self.width)


def bilinear_gather(x: Tensor, batch_index: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> Tensor:
    """Sample every channel of ``x`` at K points for each of M rows.

    Args:
        x: (N, C, H, W) feature map.
        batch_index: (M,) image index of each row.
        ys, xs: (M, K) sampling positions in array index units.

    Returns:
        (M, C * K, 1, 1) tensor; channel ``c * K + k`` holds channel ``c`` at
        point ``k``. Differentiable with respect to ``x`` only.
    """
    batch_index = np.asarray(batch_index, dtype=np.int64)
    ys = np.asarray(ys, dtype=DTYPE)
    xs = np.asarray(xs, dtype=DTYPE)
    if ys.ndim != 2 or ys.shape != xs.shape or ys.shape[0] != batch_index.shape[0]:
        raise ShapeError(
            f"bilinear_gather: positions {ys.shape}/{xs.shape} do not match {batch_index.shape[0]} rows"
        )
    n, c, h, w = x.shape
    m, k = ys.shape
    out = np.zeros((m, c, k), dtype=DTYPE)
    plans = {}
    for b in np.unique(batch_index):
        rows = np.nonzero(batch_index == b)[0]
        plan = BilinearPlan(ys[rows], xs[rows], h, w)
        plans[int(b)] = (rows, plan)
        out[rows] = plan.gather(x.data[b]).transpose(1, 0, 2)

    def backward(g):
        gx = np.zeros_like(x.data)
        g3 = g.reshape(m, c, k)
        for b, (rows, plan) in plans.items():
            gx[b] += plan.scatter(g3[rows].transpose(1, 0, 2))
        return (gx,)

    return record(out.reshape(m, c * k, 1, 1), (x,), backward)


# ── verification ─────────────────────────────────────────────────────────────

def grad_check(f: Callable[[], Tensor], inputs: Iterable[Tensor], step: float = 1e-5) -> float:
    """Largest relative error between reverse-mode and central-difference gradients.

    ``f`` is re-evaluated for every perturbed element and must return a scalar
    tensor built only from ``inputs`` and constants. Relative error uses the
    denominator ``max(|a|, |b|, 1e-8)``. A non-finite gradient is reported as
    ``inf``.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    out = f()
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, a_grad in zip(inputs, analytic):
        if not np.all(np.isfinite(a_grad)):
            logger.error("grad_check: non-finite analytic gradient for %s", t)
            return math.inf
        flat = t.data.reshape(-1)
        a_flat = a_grad.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + step
                f_plus = f().item()
                flat[i] = saved - step
                f_minus = f().item()
                flat[i] = saved
                numeric = (f_plus - f_minus) / (2.0 * step)
                if not math.isfinite(numeric):
                    logger.error("grad_check: non-finite numeric gradient for %s[%d]", t, i)
                    return math.inf
                a = float(a_flat[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst
