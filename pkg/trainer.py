"""SGD training loop with warmup, step decay, per-epoch checkpoints and resume."""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from checkpoint import load_checkpoint, save_checkpoint
from config_manager import EvalConfig, TrainConfig
from constants import BEST_CHECKPOINT, LAST_CHECKPOINT, TRAIN_LOG_FILE
from dataset import SceneDataset
from metrics import EvalReport, evaluate, plot_loss_curves
from model import AfranNet, to_tensor
from synth_data import resize_to
from tensor import Tensor
from training_log import TrainingLog
from worker import BatchLoader

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """The loss became NaN or infinite; the last good checkpoint is kept."""


def learning_rate(cfg: TrainConfig, step: int, steps_per_epoch: int) -> float:
    """Linear warmup from lr/1000 over ``warmup_epochs``, then gamma decay at each decay epoch."""
    steps_per_epoch = max(1, steps_per_epoch)
    epoch = step // steps_per_epoch
    if epoch < cfg.warmup_epochs:
        start = cfg.lr / 1000.0
        progress = step / (cfg.warmup_epochs * steps_per_epoch)
        return start + (cfg.lr - start) * progress
    decays = sum(1 for e in cfg.lr_decay_epochs if epoch >= e)
    return cfg.lr * cfg.gamma ** decays


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params: Dict[str, Tensor], momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: Dict[str, np.ndarray] = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            buf = self.buffers[name]
            buf *= self.momentum
            buf += g
            p.data -= lr * buf

    def load_buffers(self, buffers: Dict[str, np.ndarray]) -> None:
        for name, arr in buffers.items():
            if name in self.buffers:
                self.buffers[name] = np.array(arr, dtype=np.float64)


@dataclass
class TrainResult:
    epochs_run: int
    steps: int
    best_ap50: Optional[float]
    final_loss: Optional[float]
    last_checkpoint: Path
    best_checkpoint: Optional[Path]


def evaluate_split(model: AfranNet, dataset: SceneDataset, split: str, eval_cfg: EvalConfig,
                   batch_size: int = 4) -> EvalReport:
    """Detect on every image of a split at the model's input size and score the result."""
    size = model.net.input_size
    detections, annotations = [], []
    ids = dataset.ids(split)
    for i in range(0, len(ids), batch_size):
        images = []
        for ident in ids[i:i + batch_size]:
            image, ann = resize_to(*dataset.load(ident), size)
            images.append(image)
            annotations.append(ann.boxes)
        detections.extend(model.detect(to_tensor(images)))
    return evaluate(detections, annotations, eval_cfg)


class Trainer:
    def __init__(self, model: AfranNet, dataset: SceneDataset, train_cfg: TrainConfig,
                 eval_cfg: EvalConfig, out_dir: Path):
        self.model = model
        self.dataset = dataset
        self.cfg = train_cfg
        self.eval_cfg = eval_cfg
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.optimizer = SGD(model.params, train_cfg.momentum, train_cfg.weight_decay)
        self.log = TrainingLog(self.out_dir / TRAIN_LOG_FILE)
        self.epoch = 0
        self.step = 0
        self.best_ap50: Optional[float] = None

    @property
    def last_path(self) -> Path:
        return self.out_dir / LAST_CHECKPOINT

    @property
    def best_path(self) -> Path:
        return self.out_dir / BEST_CHECKPOINT

    def _state(self) -> dict:
        return {"epoch": self.epoch, "step": self.step, "best_ap50": self.best_ap50, "seed": self.cfg.seed}

    def _save(self, path: Path) -> None:
        save_checkpoint(path, self.model.net, self.model.state_arrays(), self.optimizer.buffers, self._state())

    def resume(self, path: Path) -> None:
        """Restore weights, momentum buffers and counters from an epoch-end checkpoint."""
        ckpt = load_checkpoint(path)
        self.model.load_arrays(ckpt.params)
        self.optimizer.load_buffers(ckpt.momentum)
        self.epoch = int(ckpt.state.get("epoch", 0))
        self.step = int(ckpt.state.get("step", 0))
        self.best_ap50 = ckpt.state.get("best_ap50")
        self.log.truncate_after(self.step)
        logger.info("Resumed from %s at epoch %d, step %d", path, self.epoch, self.step)

    def _loader(self, ids: List[str], epoch: int) -> BatchLoader:
        return BatchLoader(self.dataset.load, ids, self.cfg.batch, self.model.net.input_size, self.cfg.seed,
                           epoch, self.cfg.augment, self.cfg.queue_size)

    def train_step(self, images: List[np.ndarray], boxes: List[np.ndarray], lr: float):
        self.model.zero_grad()
        loss, report = self.model.loss(to_tensor(images), boxes, self.cfg.ohem_ratio, self.cfg.alpha)
        if not math.isfinite(report.total):
            raise TrainingDiverged(
                f"Non-finite loss {report.total} at epoch {self.epoch}, step {self.step}; "
                f"last good checkpoint is {self.last_path}"
            )
        loss.backward()
        self.optimizer.step(lr)
        return report

    def train(self) -> TrainResult:
        ids = self.dataset.ids("train")
        if not ids:
            raise ValueError(f"No training images in {self.dataset.root}")
        val_ids = self.dataset.ids("val")
        steps_per_epoch = math.ceil(len(ids) / self.cfg.batch)
        final_loss = None
        while self.epoch < self.cfg.epochs:
            loader = self._loader(ids, self.epoch)
            epoch_losses = []
            try:
                for batch in loader:
                    lr = learning_rate(self.cfg, self.step, steps_per_epoch)
                    report = self.train_step(batch.images, batch.boxes, lr)
                    self.log.append(self.epoch, self.step, lr, report)
                    epoch_losses.append(report.total)
                    self.step += 1
            finally:
                loader.stop()
            final_loss = float(np.mean(epoch_losses)) if epoch_losses else final_loss
            self.epoch += 1
            logger.info("Epoch %d/%d: mean loss %.4f, lr %.2e", self.epoch, self.cfg.epochs,
                        final_loss if final_loss is not None else float("nan"),
                        learning_rate(self.cfg, max(self.step - 1, 0), steps_per_epoch))
            if val_ids and self.epoch % self.cfg.eval_every == 0:
                ap50 = evaluate_split(self.model, self.dataset, "val", self.eval_cfg, self.cfg.batch).AP50
                if ap50 is not None and (self.best_ap50 is None or ap50 > self.best_ap50):
                    self.best_ap50 = ap50
                    self._save(self.best_path)
                    logger.info("New best val AP50 %.4f at epoch %d", ap50, self.epoch)
            self._save(self.last_path)
        plot_loss_curves(self.log.rows(), self.out_dir / "loss_curves.svg")
        best = self.best_path if self.best_path.exists() else None
        return TrainResult(self.epoch, self.step, self.best_ap50, final_loss, self.last_path, best)
