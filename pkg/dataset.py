"""On-disk dataset layout: PNG images, JSON-lines annotations and a split file.

    <root>/images/<id>.png
    <root>/annotations.jsonl   one record per image, in id order
    <root>/split.json          {"train": [...], "val": [...], "test": [...]}
"""
import io
import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from constants import ANNOTATIONS_FILE, IMAGES_DIR, SPLIT_FILE, SPLIT_RATIO, SPLITS
from synth_data import Annotation, SceneSpec, generate_scene
from utils import atomic_write_bytes, atomic_write_text, ordered_map, write_json

logger = logging.getLogger(__name__)


class DatasetError(ValueError):
    """Malformed annotation record or unreadable image."""


def image_id(ann: Annotation) -> str:
    return Path(ann.image).stem


def write_image(path: Path, image: np.ndarray) -> Path:
    """Save an 8-bit single-channel array as PNG."""
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 2:
        raise DatasetError(f"{path}: expected a 2-D uint8 image, got {image.dtype} with shape {image.shape}")
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PNG")
    return atomic_write_bytes(Path(path), buf.getvalue())


def read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                logger.debug("Converting %s from %s to 8-bit grayscale", path, img.mode)
                img = img.convert("L")
            return np.asarray(img, dtype=np.uint8).copy()
    except (OSError, UnidentifiedImageError) as exc:
        raise DatasetError(f"Cannot read image {path}: {exc}") from exc


def write_annotations(path: Path, annotations: Sequence[Annotation]) -> Path:
    lines = [json.dumps(a.to_record(), sort_keys=True) for a in annotations]
    return atomic_write_text(Path(path), "".join(line + "\n" for line in lines))


def read_annotations(path: Path) -> List[Annotation]:
    """Parse a JSON-lines annotation file; blank lines are skipped."""
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                if not isinstance(record, dict):
                    raise TypeError(f"expected an object, got {type(record).__name__}")
                ann = Annotation.from_record(record)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed annotation: {exc}") from exc
            out.append(ann)
    return out


def split_ids(ids: Sequence[str], seed: int, ratio: Tuple[int, int, int] = SPLIT_RATIO) -> Dict[str, List[str]]:
    """Seeded shuffle cut into train/val/test by ``ratio``; the remainder goes to test."""
    ids = list(ids)
    if len(ratio) != 3 or min(ratio) < 0 or sum(ratio) == 0:
        raise ValueError(f"split ratio must be three non-negative parts with a positive sum, got {list(ratio)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    total = sum(ratio)
    n_train = len(ids) * ratio[0] // total
    n_val = len(ids) * ratio[1] // total
    shuffled = [ids[i] for i in order]
    return {
        "train": sorted(shuffled[:n_train]),
        "val": sorted(shuffled[n_train:n_train + n_val]),
        "test": sorted(shuffled[n_train + n_val:]),
    }


class SceneDataset:
    """Read access to a dataset directory; a missing or empty directory is an empty dataset."""

    def __init__(self, root: Path):
        self.root = Path(root)
        ann_path = self.root / ANNOTATIONS_FILE
        self.annotations: Dict[str, Annotation] = {}
        if ann_path.exists():
            for ann in read_annotations(ann_path):
                self.annotations[image_id(ann)] = ann
        else:
            logger.info("No %s in %s; dataset is empty", ANNOTATIONS_FILE, self.root)
        self._split = self._read_split()

    def _read_split(self) -> Dict[str, List[str]]:
        path = self.root / SPLIT_FILE
        if not path.exists():
            return {name: [] for name in SPLITS}
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: malformed split file: {exc}") from exc
        unknown = [i for name in SPLITS for i in data.get(name, []) if i not in self.annotations]
        if unknown:
            raise DatasetError(f"{path}: split names unknown image {unknown[0]!r}")
        return {name: list(data.get(name, [])) for name in SPLITS}

    def __len__(self) -> int:
        return len(self.annotations)

    def ids(self, split: str | None = None) -> List[str]:
        if split is None:
            return list(self.annotations)
        if split not in SPLITS:
            raise DatasetError(f"Unknown split {split!r}; choose one of {list(SPLITS)}")
        return list(self._split[split])

    def load(self, ident: str) -> Tuple[np.ndarray, Annotation]:
        ann = self.annotations[ident]
        return read_image(self.root / ann.image), ann

    def __iter__(self) -> Iterator[Tuple[np.ndarray, Annotation]]:
        for ident in self.annotations:
            yield self.load(ident)

    def iter_split(self, split: str) -> Iterator[Tuple[np.ndarray, Annotation]]:
        for ident in self.ids(split):
            yield self.load(ident)


def write_dataset(root: Path, samples: Sequence[Tuple[np.ndarray, Annotation]], seed: int,
                  ratio: Tuple[int, int, int] = SPLIT_RATIO) -> SceneDataset:
    """Write images, annotations and a seeded train:val:test split (5:2:3 by default) under ``root``."""
    root = Path(root)
    (root / IMAGES_DIR).mkdir(parents=True, exist_ok=True)
    anns = []
    for image, ann in samples:
        rel = f"{IMAGES_DIR}/{image_id(ann)}.png"
        write_image(root / rel, image)
        anns.append(replace(ann, image=rel))
    write_annotations(root / ANNOTATIONS_FILE, anns)
    write_json(root / SPLIT_FILE, split_ids([image_id(a) for a in anns], seed, ratio))
    logger.info("Wrote %d scenes to %s", len(anns), root)
    return SceneDataset(root)


def synthesize_dataset(root: Path, count: int, spec: SceneSpec = SceneSpec(), workers: int | None = None,
                       ratio: Tuple[int, int, int] = SPLIT_RATIO) -> SceneDataset:
    """Generate ``count`` scenes with seeds spec.seed .. spec.seed + count - 1 and write them."""
    if count < 0:
        raise ValueError(f"scene count must be non-negative, got {count}")
    specs = [replace(spec, seed=spec.seed + i) for i in range(count)]
    samples = ordered_map(generate_scene, specs, workers)
    return write_dataset(root, samples, spec.seed, ratio)
