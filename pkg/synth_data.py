"""Synthetic SAR-like aircraft scenes, augmentation and large-scene tiling.

Aircraft are drawn as crosses of bright point scatterers (a fuselage axis and
two wing axes) over a multiplicative gamma speckle background, with unlabeled
clutter blobs as distractors. Images are 8-bit single-channel arrays indexed
[row, column]; boxes are (x1, y1, x2, y2) pixels.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np
from PIL import Image

from anchors import Detections, as_boxes, nms
from config_manager import ConfigError
from constants import CLASS_NAMES

logger = logging.getLogger(__name__)

AIRCRAFT_LABEL = CLASS_NAMES[1]

# background reflectivity and the intensity-to-grey gain of the quantiser
_BACKGROUND_LEVEL = 0.15
_GREY_GAIN = 64.0
_BOX_MARGIN = 2.0


@dataclass(frozen=True)
class SceneSpec:
    size: int = 640
    aircraft: Tuple[int, int] = (1, 6)
    scatterers: Tuple[int, int] = (5, 15)
    wing_span: Tuple[float, float] = (16.0, 96.0)
    clutter_blobs: Tuple[int, int] = (2, 8)
    looks: int = 4
    seed: int = 0
    placement_retries: int = 50

    def validate(self) -> None:
        def bounds(pair, name, low):
            if len(pair) != 2 or pair[0] < low or pair[1] < pair[0]:
                raise ConfigError(f"scene.{name} must be an increasing pair >= {low}, got {list(pair)}")

        if not isinstance(self.size, int) or self.size < 32:
            raise ConfigError(f"scene.size must be an integer >= 32, got {self.size!r}")
        bounds(self.aircraft, "aircraft", 0)
        bounds(self.scatterers, "scatterers", 5)
        bounds(self.wing_span, "wing_span", 2 * _BOX_MARGIN + 1)
        bounds(self.clutter_blobs, "clutter_blobs", 0)
        if self.wing_span[1] >= self.size:
            raise ConfigError(f"scene.wing_span {list(self.wing_span)} does not fit a {self.size}px scene")
        if not isinstance(self.looks, int) or self.looks < 1:
            raise ConfigError(f"scene.looks must be a positive integer, got {self.looks!r}")
        if self.placement_retries < 1:
            raise ConfigError("scene.placement_retries must be positive")


@dataclass
class Annotation:
    """Ground truth of one image; ``meta`` runs parallel to ``boxes``."""

    image: str
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    labels: Tuple[str, ...] = ()
    meta: List[dict] = field(default_factory=list)

    def __post_init__(self):
        self.boxes = as_boxes(self.boxes)
        if not self.labels:
            self.labels = (AIRCRAFT_LABEL,) * len(self.boxes)
        if len(self.labels) != len(self.boxes):
            raise ValueError(f"annotation {self.image}: {len(self.labels)} labels for {len(self.boxes)} boxes")
        if self.meta and len(self.meta) != len(self.boxes):
            raise ValueError(f"annotation {self.image}: {len(self.meta)} meta records for {len(self.boxes)} boxes")

    def __len__(self) -> int:
        return len(self.boxes)

    def subset(self, keep: np.ndarray, boxes: np.ndarray | None = None) -> "Annotation":
        idx = np.flatnonzero(np.asarray(keep, dtype=bool))
        new_boxes = self.boxes[idx] if boxes is None else as_boxes(boxes)[idx]
        meta = [self.meta[i] for i in idx] if self.meta else []
        return Annotation(self.image, new_boxes, tuple(self.labels[i] for i in idx), meta)

    def with_boxes(self, boxes: np.ndarray) -> "Annotation":
        return Annotation(self.image, boxes, self.labels, list(self.meta))

    def to_record(self) -> dict:
        record = {"image": self.image, "boxes": self.boxes.tolist(), "labels": list(self.labels)}
        if self.meta:
            record["aircraft"] = self.meta
        return record

    @classmethod
    def from_record(cls, record: dict) -> "Annotation":
        return cls(str(record["image"]), as_boxes(record["boxes"]), tuple(record.get("labels", ())),
                   list(record.get("aircraft", [])))


# ── scene generation ─────────────────────────────────────────────────────────

def _splat(canvas: np.ndarray, x: float, y: float, amplitude: float, sigma: float) -> None:
    """Add an isotropic Gaussian blob centred on pixel coordinate (x, y)."""
    h, w = canvas.shape
    r = int(math.ceil(4 * sigma))
    x0, x1 = max(0, int(x) - r), min(w, int(x) + r + 1)
    y0, y1 = max(0, int(y) - r), min(h, int(y) + r + 1)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    d2 = (xx + 0.5 - x) ** 2 + (yy + 0.5 - y) ** 2
    canvas[y0:y1, x0:x1] += amplitude * np.exp(-d2 / (2 * sigma * sigma))


def _aircraft_scatterers(rng: np.random.Generator, span: float, count: int, angle: float) -> np.ndarray:
    """Scatterer offsets (count, 2) from the aircraft centre: nose, tail, wing tips, then random points."""
    length = span * rng.uniform(0.8, 1.1)
    wing_at = 0.1 * length
    local = [(0.5 * length, 0.0), (-0.5 * length, 0.0), (wing_at, 0.5 * span), (wing_at, -0.5 * span)]
    for _ in range(count - len(local)):
        if rng.random() < 0.5:
            local.append((rng.uniform(-0.5, 0.5) * length, 0.0))
        else:
            local.append((wing_at, rng.uniform(-0.5, 0.5) * span))
    pts = np.asarray(local)
    c, s = math.cos(angle), math.sin(angle)
    return np.stack([pts[:, 0] * c - pts[:, 1] * s, pts[:, 0] * s + pts[:, 1] * c], axis=1)


def _overlaps(box: np.ndarray, boxes: Sequence[np.ndarray]) -> bool:
    for other in boxes:
        if box[0] < other[2] and other[0] < box[2] and box[1] < other[3] and other[1] < box[3]:
            return True
    return False


def quantize(intensity: np.ndarray) -> np.ndarray:
    return np.clip(np.round(intensity * _GREY_GAIN), 0, 255).astype(np.uint8)


def generate_scene(spec: SceneSpec) -> Tuple[np.ndarray, Annotation]:
    """Render one scene; identical specs give identical bytes.

    Aircraft that cannot be placed without leaving the canvas or touching
    another aircraft after ``placement_retries`` attempts are dropped.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    size = spec.size
    reflectivity = np.full((size, size), _BACKGROUND_LEVEL, dtype=np.float64)

    wanted = int(rng.integers(spec.aircraft[0], spec.aircraft[1] + 1))
    boxes: List[np.ndarray] = []
    meta: List[dict] = []
    for _ in range(wanted):
        span = float(rng.uniform(*spec.wing_span))
        angle = float(rng.uniform(0.0, math.pi))
        count = int(rng.integers(spec.scatterers[0], spec.scatterers[1] + 1))
        offsets = _aircraft_scatterers(rng, span, count, angle)
        # the longer side of the annotated box equals the sampled span
        extent = float((offsets.max(axis=0) - offsets.min(axis=0)).max())
        offsets = offsets * ((span - 2 * _BOX_MARGIN) / extent)
        lo = offsets.min(axis=0) - _BOX_MARGIN
        hi = offsets.max(axis=0) + _BOX_MARGIN
        placed = None
        for _ in range(spec.placement_retries):
            cx = rng.uniform(-lo[0], size - hi[0])
            cy = rng.uniform(-lo[1], size - hi[1])
            box = np.array([cx + lo[0], cy + lo[1], cx + hi[0], cy + hi[1]])
            if not _overlaps(box, boxes):
                placed = (cx, cy, box)
                break
        if placed is None:
            logger.warning("Scene %d: could not place aircraft %d of %d; emitting fewer",
                           spec.seed, len(boxes) + 1, wanted)
            break
        cx, cy, box = placed
        for dx, dy in offsets:
            _splat(reflectivity, cx + dx, cy + dy, rng.uniform(2.0, 5.0), rng.uniform(0.8, 1.5))
        boxes.append(box)
        meta.append({"wing_span": span, "orientation": angle, "scatterers": count})

    clutter = int(rng.integers(spec.clutter_blobs[0], spec.clutter_blobs[1] + 1))
    for _ in range(clutter):
        cx, cy = rng.uniform(0, size, 2)
        probe = np.array([cx - 12, cy - 12, cx + 12, cy + 12])
        if _overlaps(probe, boxes):
            continue
        for _ in range(int(rng.integers(3, 9))):
            dx, dy = rng.normal(0.0, 4.0, 2)
            _splat(reflectivity, cx + dx, cy + dy, rng.uniform(0.5, 1.5), rng.uniform(2.0, 5.0))

    speckle = rng.gamma(spec.looks, 1.0 / spec.looks, size=(size, size))
    image = quantize(reflectivity * speckle)
    ann = Annotation(f"scene_{spec.seed:06d}", np.asarray(boxes).reshape(-1, 4), meta=meta)
    return image, ann


# ── augmentation ─────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class AugmentSpec:
    """Probability of each transform and the ranges they draw from."""

    p_contrast: float = 0.5
    p_illumination: float = 0.5
    p_mirror: float = 0.5
    p_flip: float = 0.5
    p_expand: float = 0.5
    p_crop: float = 0.5
    contrast: Tuple[float, float] = (0.5, 1.5)
    illumination: Tuple[float, float] = (0.6, 1.4)
    expand: Tuple[float, float] = (1.0, 2.0)
    crop: Tuple[float, float] = (0.5, 1.0)
    min_visible: float = 0.25


def adjust_contrast(image: np.ndarray, factor: float) -> np.ndarray:
    img = image.astype(np.float64)
    mean = img.mean()
    return np.clip(np.round((img - mean) * factor + mean), 0, 255).astype(np.uint8)


def adjust_illumination(image: np.ndarray, start: float, end: float, angle: float) -> np.ndarray:
    """Multiply by a linear gain ramp running from ``start`` to ``end`` along direction ``angle``."""
    h, w = image.shape
    yy, xx = np.mgrid[0:h, 0:w]
    proj = (xx - 0.5 * w) * math.cos(angle) + (yy - 0.5 * h) * math.sin(angle)
    extent = max(np.abs(proj).max(), 1.0)
    gain = start + (end - start) * (proj / extent + 1.0) / 2.0
    return np.clip(np.round(image.astype(np.float64) * gain), 0, 255).astype(np.uint8)


def mirror(image: np.ndarray, ann: Annotation) -> Tuple[np.ndarray, Annotation]:
    """Left-right reflection: x -> W - x."""
    w = image.shape[1]
    b = ann.boxes.copy()
    b[:, [0, 2]] = w - ann.boxes[:, [2, 0]]
    return image[:, ::-1].copy(), ann.with_boxes(b)


def flip(image: np.ndarray, ann: Annotation) -> Tuple[np.ndarray, Annotation]:
    """Top-bottom reflection: y -> H - y."""
    h = image.shape[0]
    b = ann.boxes.copy()
    b[:, [1, 3]] = h - ann.boxes[:, [3, 1]]
    return image[::-1, :].copy(), ann.with_boxes(b)


def expand(image: np.ndarray, ann: Annotation, ratio: float, left: int, top: int,
           fill: int | None = None) -> Tuple[np.ndarray, Annotation]:
    """Place the image at (left, top) on a canvas ``ratio`` times larger, filled with its mean."""
    h, w = image.shape
    ch, cw = int(round(h * ratio)), int(round(w * ratio))
    if not (0 <= left <= cw - w and 0 <= top <= ch - h):
        raise ValueError(f"expand: offset ({left}, {top}) does not fit a {w}x{h} image on {cw}x{ch}")
    value = int(round(image.mean())) if fill is None else fill
    canvas = np.full((ch, cw), value, dtype=np.uint8)
    canvas[top:top + h, left:left + w] = image
    return canvas, ann.with_boxes(ann.boxes + np.array([left, top, left, top], dtype=np.float64))


def crop(image: np.ndarray, ann: Annotation, x0: int, y0: int, width: int, height: int,
         min_visible: float = 0.25) -> Tuple[np.ndarray, Annotation]:
    """Cut a window; boxes are clipped to it and dropped below ``min_visible`` of their area."""
    h, w = image.shape
    if width < 1 or height < 1 or x0 < 0 or y0 < 0 or x0 + width > w or y0 + height > h:
        raise ValueError(f"crop: window ({x0}, {y0}, {width}, {height}) outside a {w}x{h} image")
    b = ann.boxes
    clipped = np.stack([
        np.clip(b[:, 0], x0, x0 + width), np.clip(b[:, 1], y0, y0 + height),
        np.clip(b[:, 2], x0, x0 + width), np.clip(b[:, 3], y0, y0 + height),
    ], axis=1) if len(b) else b.copy()
    area = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    visible = (clipped[:, 2] - clipped[:, 0]) * (clipped[:, 3] - clipped[:, 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        keep = np.where(area > 0, visible / area, 0.0) >= min_visible
    keep &= (clipped[:, 2] > clipped[:, 0]) & (clipped[:, 3] > clipped[:, 1])
    moved = clipped - np.array([x0, y0, x0, y0], dtype=np.float64)
    return image[y0:y0 + height, x0:x0 + width].copy(), ann.subset(keep, moved)


def augment(image: np.ndarray, ann: Annotation, rng: np.random.Generator,
            spec: AugmentSpec = AugmentSpec()) -> Tuple[np.ndarray, Annotation]:
    """Photometric changes, expansion, cropping and reflections, each applied with its own probability."""
    if rng.random() < spec.p_contrast:
        image = adjust_contrast(image, rng.uniform(*spec.contrast))
    if rng.random() < spec.p_illumination:
        lo, hi = spec.illumination
        image = adjust_illumination(image, rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(0, 2 * math.pi))
    if rng.random() < spec.p_expand:
        ratio = rng.uniform(*spec.expand)
        h, w = image.shape
        ch, cw = int(round(h * ratio)), int(round(w * ratio))
        image, ann = expand(image, ann, ratio, int(rng.integers(0, cw - w + 1)), int(rng.integers(0, ch - h + 1)))
    if rng.random() < spec.p_crop:
        h, w = image.shape
        cw = max(1, int(round(w * rng.uniform(*spec.crop))))
        ch = max(1, int(round(h * rng.uniform(*spec.crop))))
        image, ann = crop(image, ann, int(rng.integers(0, w - cw + 1)), int(rng.integers(0, h - ch + 1)),
                          cw, ch, spec.min_visible)
    if rng.random() < spec.p_mirror:
        image, ann = mirror(image, ann)
    if rng.random() < spec.p_flip:
        image, ann = flip(image, ann)
    return image, ann


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize to a square ``size`` canvas."""
    if image.shape == (size, size):
        return image
    return np.asarray(Image.fromarray(image).resize((size, size), Image.Resampling.BILINEAR))


def resize_to(image: np.ndarray, ann: Annotation, size: int) -> Tuple[np.ndarray, Annotation]:
    """:func:`resize_image` with the boxes scaled along."""
    h, w = image.shape
    if (h, w) == (size, size):
        return image, ann
    resized = resize_image(image, size)
    scale = np.array([size / w, size / h, size / w, size / h])
    return resized, ann.with_boxes(ann.boxes * scale)


# ── large-scene tiling ───────────────────────────────────────────────────────

class Placement(NamedTuple):
    """Where a tile sits in the scene and how much of it holds scene pixels."""

    x0: int
    y0: int
    width: int
    height: int


def _origins(extent: int, tile: int, stride: int) -> List[int]:
    return list(range(0, max(extent - (tile - stride), 1), stride))


def tile_large_scene(image: np.ndarray, tile: int = 640, overlap: int = 0) -> Tuple[List[np.ndarray], List[Placement]]:
    """Cut a scene into row-major ``tile`` x ``tile`` crops; ragged edges are zero padded."""
    if tile < 1 or not 0 <= overlap < tile:
        raise ValueError(f"tile_large_scene: need tile >= 1 and 0 <= overlap < tile, got {tile}, {overlap}")
    h, w = image.shape
    stride = tile - overlap
    tiles, placements = [], []
    for y0 in _origins(h, tile, stride):
        for x0 in _origins(w, tile, stride):
            patch = image[y0:y0 + tile, x0:x0 + tile]
            if patch.shape != (tile, tile):
                padded = np.zeros((tile, tile), dtype=image.dtype)
                padded[:patch.shape[0], :patch.shape[1]] = patch
                patch = padded
            else:
                patch = patch.copy()
            tiles.append(patch)
            placements.append(Placement(x0, y0, min(tile, w - x0), min(tile, h - y0)))
    logger.info("Tiled a %dx%d scene into %d tiles of %d (overlap %d)", w, h, len(tiles), tile, overlap)
    return tiles, placements


def map_back(detections: Sequence[Detections], placements: Sequence[Placement], iou_thresh: float = 0.45,
             scene_size: Tuple[int, int] | None = None) -> Detections:
    """Translate per-tile detections into scene coordinates and merge them with one global NMS.

    ``scene_size`` is (width, height); when given, boxes are clipped to it.
    """
    if len(detections) != len(placements):
        raise ValueError(f"map_back: {len(detections)} detection sets for {len(placements)} tiles")
    boxes, scores, labels = [], [], []
    for dets, p in zip(detections, placements):
        if len(dets) == 0:
            continue
        boxes.append(as_boxes(dets.boxes) + np.array([p.x0, p.y0, p.x0, p.y0], dtype=np.float64))
        scores.append(np.asarray(dets.scores, dtype=np.float64))
        labels.append(np.asarray(dets.labels, dtype=np.int64))
    if not boxes:
        return Detections.empty()
    boxes = np.concatenate(boxes)
    scores = np.concatenate(scores)
    labels = np.concatenate(labels)
    if scene_size is not None:
        w, h = scene_size
        boxes = np.clip(boxes, 0.0, np.array([w, h, w, h], dtype=np.float64))
    kept = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        kept.append(idx[nms(boxes[idx], scores[idx], iou_thresh, pre_top_k=len(idx), keep=len(idx))])
    kept = np.concatenate(kept)
    kept = kept[np.argsort(-scores[kept], kind="mergesort")]
    return Detections(boxes[kept], scores[kept], labels[kept])
