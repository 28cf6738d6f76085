import csv
import logging
from pathlib import Path
from typing import Dict, List

from losses import LossReport

logger = logging.getLogger(__name__)

FIELDS = ("epoch", "step", "lr",
          "L_total", "L_ARM", "L_ADM", "L_ARM_conf", "L_ARM_reg", "L_ADM_conf", "L_ADM_reg", "N_ARM", "N_ADM")


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


class TrainingLog:
    """Per-step loss rows appended to a CSV file."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._ensure_log_dir_exists()

    def _ensure_log_dir_exists(self):
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            logger.error("Could not create training log directory %s: %s", self.path.parent, e)

    def append(self, epoch: int, step: int, lr: float, report: LossReport) -> None:
        row = {"epoch": epoch, "step": step, "lr": float(lr), **report.as_row()}
        new_file = not self.path.exists() or self.path.stat().st_size == 0
        try:
            with open(self.path, "a", encoding="utf-8", newline="") as f:
                writer = csv.writer(f, lineterminator="\n")
                if new_file:
                    writer.writerow(FIELDS)
                writer.writerow([_cell(row[k]) for k in FIELDS])
        except OSError as e:
            logger.error("Error writing to training log %s: %s", self.path, e)
            raise

    def rows(self) -> List[Dict[str, str]]:
        if not self.path.exists():
            return []
        with open(self.path, "r", encoding="utf-8", newline="") as f:
            return list(csv.DictReader(f))

    def truncate_after(self, step: int) -> None:
        """Drop rows at or beyond ``step`` so a resumed run continues the file seamlessly."""
        rows = [r for r in self.rows() if int(r["step"]) < step]
        with open(self.path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(FIELDS)
            for r in rows:
                writer.writerow([r[k] for k in FIELDS])
        logger.info("Training log truncated to %d rows before step %d", len(rows), step)
