import logging
import queue
import threading
from typing import Callable, Iterator, List, NamedTuple, Sequence, Tuple

import numpy as np

from synth_data import Annotation, AugmentSpec, augment, resize_to

logger = logging.getLogger(__name__)

_END = object()


class Batch(NamedTuple):
    index: int
    ids: List[str]
    images: List[np.ndarray]       # uint8 (S, S) each
    boxes: List[np.ndarray]        # (k, 4) each


class _Failure(NamedTuple):
    exc: BaseException


def epoch_order(count: int, seed: int, epoch: int) -> np.ndarray:
    """Sample order of one epoch; depends only on (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(count)


def epoch_batches(ids: Sequence[str], batch_size: int, seed: int, epoch: int) -> List[List[Tuple[int, str]]]:
    """(position in epoch, id) pairs grouped into batches; the last batch may be short."""
    order = epoch_order(len(ids), seed, epoch)
    pairs = [(pos, ids[i]) for pos, i in enumerate(order)]
    return [pairs[i:i + batch_size] for i in range(0, len(pairs), batch_size)]


class BatchLoader(threading.Thread):
    """Background thread that loads, augments and resizes one epoch of batches.

    Batches are put on a bounded queue in epoch order and consumed by
    iterating the loader. Each sample draws its augmentation from a generator
    seeded by (seed, epoch, position), so the batches do not depend on thread
    timing. An exception in the thread is re-raised in the consumer.
    """

    def __init__(self, load: Callable[[str], Tuple[np.ndarray, Annotation]], ids: Sequence[str],
                 batch_size: int, input_size: int, seed: int, epoch: int, augment_samples: bool = True,
                 queue_size: int = 4, start_batch: int = 0, augment_spec: AugmentSpec = AugmentSpec()):
        super().__init__(daemon=True)
        self.load = load
        self.batches = epoch_batches(list(ids), batch_size, seed, epoch)
        self.input_size = input_size
        self.seed = seed
        self.epoch = epoch
        self.augment_samples = augment_samples
        self.augment_spec = augment_spec
        self.start_batch = start_batch
        self.queue: queue.Queue = queue.Queue(maxsize=queue_size)
        self._stop_event = threading.Event()

    def __len__(self) -> int:
        return max(0, len(self.batches) - self.start_batch)

    def _sample(self, position: int, ident: str) -> Tuple[np.ndarray, np.ndarray]:
        image, ann = self.load(ident)
        if self.augment_samples:
            rng = np.random.default_rng([self.seed, self.epoch, position])
            image, ann = augment(image, ann, rng, self.augment_spec)
        image, ann = resize_to(image, ann, self.input_size)
        return image, ann.boxes

    def _put(self, item) -> bool:
        while not self._stop_event.is_set():
            try:
                self.queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def run(self):
        """Main loop for the loader thread."""
        try:
            for b in range(self.start_batch, len(self.batches)):
                if self._stop_event.is_set():
                    break
                members = self.batches[b]
                samples = [self._sample(pos, ident) for pos, ident in members]
                batch = Batch(b, [ident for _, ident in members], [s[0] for s in samples], [s[1] for s in samples])
                if not self._put(batch):
                    break
        except Exception as exc:  # forwarded to the consumer
            logger.error("Batch loader failed in epoch %d: %s", self.epoch, exc)
            self._put(_Failure(exc))
        finally:
            self._put(_END)

    def __iter__(self) -> Iterator[Batch]:
        if not self.is_alive() and self.ident is None:
            self.start()
        while True:
            item = self.queue.get()
            if item is _END:
                return
            if isinstance(item, _Failure):
                raise item.exc
            yield item

    def stop(self):
        """Signals the loader thread to stop."""
        self._stop_event.set()
