import argparse
import logging
import logging.handlers
import sys
import time
from pathlib import Path
from typing import List, Sequence

import numpy as np
from matplotlib.patches import Rectangle

from accel import set_thread_cap
from anchors import Detections
from checkpoint import CheckpointError
from complexity import complexity_report, format_table, ledger
from config_manager import PRESETS, ConfigError, ConfigManager
from constants import (
    APP_NAME,
    APP_VERSION,
    EXIT_CONFIG_ERROR,
    EXIT_OK,
    EXIT_RUNTIME_FAILURE,
    LAST_CHECKPOINT,
    LOG_FILE,
    SPLIT_RATIO,
    SPLITS,
)
from dataset import SceneDataset, read_image, synthesize_dataset, write_image
from metrics import emit_curves, evaluate, plt, save_svg, write_detections
from model import AfranNet, AnchorAlignment, to_tensor
from synth_data import SceneSpec, map_back, resize_image, resize_to, tile_large_scene
from trainer import Trainer
from utils import worker_count, write_json

logger = logging.getLogger(__name__)


def setup_logging(log_dir: Path, level: str = "INFO"):
    """Configure root logger with rotating file handler and console handler."""
    log_dir.mkdir(parents=True, exist_ok=True)
    log_file = log_dir / LOG_FILE

    root_logger = logging.getLogger()
    root_logger.setLevel(logging.DEBUG)
    root_logger.handlers.clear()

    # Rotating file handler: 5 MB per file, keep 3 backups
    file_handler = logging.handlers.RotatingFileHandler(
        log_file, maxBytes=5 * 1024 * 1024, backupCount=3, encoding="utf-8"
    )
    numeric_level = getattr(logging, level.upper(), logging.INFO)
    file_handler.setLevel(numeric_level)
    file_handler.setFormatter(logging.Formatter(
        "%(asctime)s %(levelname)-8s %(name)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    ))

    # Console handler for warnings and above
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(logging.WARNING)
    console_handler.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))

    root_logger.addHandler(file_handler)
    root_logger.addHandler(console_handler)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config file layered over the preset.")
    common.add_argument("--preset", choices=sorted(PRESETS), default="full", help="Built-in defaults to start from.")
    common.add_argument("--seed", type=int, help="Seed for synthesis, initialisation and sample order.")
    common.add_argument("--out", metavar="DIR", default=".", help="Output directory.")
    common.add_argument("--log-level", help="Overrides settings.log_level.")
    common.add_argument("--width-multiplier", type=float, dest="width_multiplier")
    common.add_argument("--input-size", type=int, dest="input_size")

    parser = argparse.ArgumentParser(prog="afran", description=f"{APP_NAME} {APP_VERSION} - SAR aircraft detector")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="Write a synthetic scene dataset.")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--scene-size", type=int, default=640, dest="scene_size")
    p.add_argument("--aircraft", type=int, nargs=2, metavar=("MIN", "MAX"))
    p.add_argument("--split-ratio", type=int, nargs=3, metavar=("TRAIN", "VAL", "TEST"), dest="split_ratio",
                   default=list(SPLIT_RATIO), help="Relative train/val/test shares (default: 5 2 3).")

    p = sub.add_parser("train", parents=[common], help="Train on a dataset directory.")
    p.add_argument("--data", metavar="DIR", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--resume", metavar="PATH", help="Checkpoint to continue from.")

    p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint on a split.")
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    p.add_argument("--data", metavar="DIR", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")

    p = sub.add_parser("detect", parents=[common], help="Detect aircraft in an image or large scene.")
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    p.add_argument("--image", metavar="PATH", required=True)
    p.add_argument("--tile", type=int, help="Tile side for large scenes (default: network input size).")
    p.add_argument("--overlap", type=int, default=0)
    p.add_argument("--no-overlay", action="store_true", dest="no_overlay")

    p = sub.add_parser("tile", parents=[common], help="Cut a large scene into tiles.")
    p.add_argument("--image", metavar="PATH", required=True)
    p.add_argument("--tile", type=int, default=640)
    p.add_argument("--overlap", type=int, default=0)

    sub.add_parser("complexity", parents=[common], help="Print the parameter and MAC ledger.")
    return parser


def load_config(args) -> ConfigManager:
    cm = ConfigManager(args.config, preset=args.preset)
    cm.apply_overrides({
        "train.seed": args.seed,
        "train.epochs": getattr(args, "epochs", None),
        "train.batch": getattr(args, "batch", None),
        "train.lr": getattr(args, "lr", None),
        "net.width_multiplier": args.width_multiplier,
        "net.input_size": args.input_size,
        "settings.log_level": args.log_level.upper() if args.log_level else None,
    })
    return cm


# ── commands ─────────────────────────────────────────────────────────────────

def cmd_synth(args, cm: ConfigManager) -> int:
    kwargs = {"size": args.scene_size, "seed": args.seed if args.seed is not None else 0}
    if args.aircraft:
        kwargs["aircraft"] = tuple(args.aircraft)
    spec = SceneSpec(**kwargs)
    spec.validate()
    ratio = tuple(args.split_ratio)
    if min(ratio) < 0 or ratio[0] == 0:
        raise ConfigError(f"--split-ratio needs non-negative parts and a positive train share, got {list(ratio)}")
    ds = synthesize_dataset(Path(args.out), args.count, spec, ratio=ratio)
    logger.info("Synthesised %d scenes into %s", len(ds), args.out)
    return EXIT_OK


def cmd_train(args, cm: ConfigManager) -> int:
    out = Path(args.out)
    cm.save_config(out / "config.json")
    train_cfg = cm.train_config()
    model = AfranNet(cm.net_config(), seed=train_cfg.seed)
    trainer = Trainer(model, SceneDataset(Path(args.data)), train_cfg, cm.eval_config(), out)
    if args.resume:
        trainer.resume(Path(args.resume))
    elif (out / LAST_CHECKPOINT).exists():
        logger.warning("%s already holds %s; starting over without --resume", out, LAST_CHECKPOINT)
    result = trainer.train()
    logger.info("Training finished after %d epochs (%d steps); best val AP50 %s",
                result.epochs_run, result.steps, result.best_ap50)
    return EXIT_OK


def _explicit_net(args, cm: ConfigManager):
    """The configured network when the user chose one, otherwise None (use the checkpoint's)."""
    if args.config or args.preset != "full" or args.width_multiplier or args.input_size:
        return cm.net_config()
    return None


def _detect_images(model: AfranNet, images: Sequence[np.ndarray], batch: int) -> List[Detections]:
    out = []
    for i in range(0, len(images), batch):
        out.extend(model.detect(to_tensor(images[i:i + batch])))
    return out


def _write_timing(out: Path, images: int, seconds: float) -> None:
    fps = images / seconds if seconds > 0 else None
    logger.info("Processed %d images in %.3f s (%s FPS)", images, seconds, f"{fps:.2f}" if fps else "n/a")
    write_json(out / "timing.json", {"images": images, "seconds": seconds, "fps": fps})


def cmd_eval(args, cm: ConfigManager) -> int:
    out = Path(args.out)
    model = AfranNet.from_checkpoint(Path(args.checkpoint), _explicit_net(args, cm))
    ds = SceneDataset(Path(args.data))
    size = model.net.input_size
    batch = cm.train_config().batch
    ids = ds.ids(args.split)
    images, boxes = [], []
    for ident in ids:
        image, ann = resize_to(*ds.load(ident), size)
        images.append(image)
        boxes.append(ann.boxes)

    start = time.perf_counter()
    detections = _detect_images(model, images, batch)
    elapsed = time.perf_counter() - start

    initial, refined = [], []
    for i in range(0, len(images), batch):
        stats = model.anchor_alignment(to_tensor(images[i:i + batch]), boxes[i:i + batch])
        initial.append(stats["initial"])
        refined.append(stats["refined"])
    alignment = {"initial": AnchorAlignment.merge(initial).as_dict(),
                 "refined": AnchorAlignment.merge(refined).as_dict()}

    rows = ledger(model.net)
    report = evaluate(detections, boxes, cm.eval_config()).with_extras(
        params_total=sum(r.params for r in rows),
        mac_total=sum(r.mac for r in rows),
        anchor_alignment=alignment,
    )
    write_json(out / "report.json", report.to_dict())
    write_detections(out / "detections.jsonl", list(zip(ids, detections)))
    emit_curves(report, out)
    _write_timing(out, len(images), elapsed)
    logger.info("%s split: AP %s, AP50 %s, F1 %s", args.split, report.AP, report.AP50, report.F1)
    return EXIT_OK


def _scale_detections(dets: Detections, factor: float) -> Detections:
    return Detections(dets.boxes * factor, dets.scores, dets.labels)


def detect_scene(model: AfranNet, scene: np.ndarray, tile: int, overlap: int, batch: int = 4) -> Detections:
    """Detect on one image; scenes other than the network input size go through tiling."""
    size = model.net.input_size
    if scene.shape == (size, size) and tile == size:
        return _detect_images(model, [scene], 1)[0]
    tiles, placements = tile_large_scene(scene, tile, overlap)
    inputs = [resize_image(t, size) for t in tiles]
    per_tile = _detect_images(model, inputs, batch)
    if tile != size:
        per_tile = [_scale_detections(d, tile / size) for d in per_tile]
    h, w = scene.shape
    return map_back(per_tile, placements, model.net.nms.iou_thresh, scene_size=(w, h))


def draw_overlay(scene: np.ndarray, dets: Detections, target: Path) -> Path:
    h, w = scene.shape
    fig, ax = plt.subplots(figsize=(6, 6 * h / w))
    ax.imshow(scene, cmap="gray", vmin=0, vmax=255)
    for (x1, y1, x2, y2), score in zip(dets.boxes, dets.scores):
        ax.add_patch(Rectangle((x1, y1), x2 - x1, y2 - y1, fill=False, edgecolor="red", linewidth=1))
        ax.text(x1, y1 - 2, f"{score:.2f}", color="red", fontsize=6)
    ax.set_axis_off()
    return save_svg(fig, target)


def cmd_detect(args, cm: ConfigManager) -> int:
    out = Path(args.out)
    model = AfranNet.from_checkpoint(Path(args.checkpoint), _explicit_net(args, cm))
    scene = read_image(Path(args.image))
    tile = args.tile or model.net.input_size
    start = time.perf_counter()
    dets = detect_scene(model, scene, tile, args.overlap, cm.train_config().batch)
    elapsed = time.perf_counter() - start
    write_detections(out / "detections.jsonl", [(Path(args.image).stem, dets)])
    if not args.no_overlay:
        draw_overlay(scene, dets, out / "overlay.svg")
    _write_timing(out, 1, elapsed)
    logger.info("Detected %d aircraft in %s", len(dets), args.image)
    return EXIT_OK


def cmd_tile(args, cm: ConfigManager) -> int:
    out = Path(args.out)
    scene = read_image(Path(args.image))
    tiles, placements = tile_large_scene(scene, args.tile, args.overlap)
    stem = Path(args.image).stem
    records = []
    for i, (t, p) in enumerate(zip(tiles, placements)):
        name = f"{stem}_tile{i:03d}.png"
        write_image(out / name, t)
        records.append({"file": name, **p._asdict()})
    write_json(out / "placements.json", {"scene": Path(args.image).name, "tile": args.tile,
                                         "overlap": args.overlap, "tiles": records})
    return EXIT_OK


def cmd_complexity(args, cm: ConfigManager) -> int:
    net = cm.net_config()
    print(format_table(ledger(net)))
    report = complexity_report(net)
    ref = report["reference"]
    print(f"params {report['params_total']:,} ({100 * ref['params_deviation']:+.1f}% vs reference), "
          f"MAC {report['mac_total']:,} ({100 * ref['mac_deviation']:+.1f}% vs reference)")
    write_json(Path(args.out) / "complexity.json", report)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "detect": cmd_detect,
    "tile": cmd_tile,
    "complexity": cmd_complexity,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cm = load_config(args)
        setup_logging(Path(args.out), cm.get_log_level())
        try:
            set_thread_cap(worker_count())
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        logger.info("%s %s: %s", APP_NAME, APP_VERSION, args.command)
        return COMMANDS[args.command](args, cm)
    except ConfigError as exc:
        logger.error("Configuration error: %s", exc)
        return EXIT_CONFIG_ERROR
    except CheckpointError as exc:
        logger.error("Checkpoint error: %s", exc)
        return EXIT_RUNTIME_FAILURE
    except Exception:
        logger.exception("%s failed", args.command)
        return EXIT_RUNTIME_FAILURE


if __name__ == "__main__":
    sys.exit(main())
