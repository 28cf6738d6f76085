"""Weight archive: a zip of little-endian float64 payloads plus a JSON manifest.

    manifest.json            format, version, net config, training state, tensor index
    params/<name>.bin        raw '<f8' bytes, C order
    momentum/<name>.bin      optimizer buffers (optional)
"""
import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping

import numpy as np

from config_manager import NetConfig, net_config_from_dict, net_config_to_dict
from constants import CHECKPOINT_FORMAT, CHECKPOINT_VERSION
from utils import atomic_write_bytes, dumps_stable

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
_PAYLOAD_DTYPE = "<f8"
# fixed member timestamp keeps archives byte-identical across runs
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class CheckpointError(RuntimeError):
    """Unreadable archive, unknown format or a parameter set that does not fit the model."""


@dataclass
class Checkpoint:
    net: dict
    params: Dict[str, np.ndarray]
    momentum: Dict[str, np.ndarray] = field(default_factory=dict)
    state: dict = field(default_factory=dict)

    def net_config(self) -> NetConfig:
        return net_config_from_dict(self.net)


def _add(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def _index(arrays: Mapping[str, np.ndarray], folder: str) -> List[dict]:
    return [{"name": n, "file": f"{folder}/{n}.bin", "shape": list(a.shape)} for n, a in arrays.items()]


def save_checkpoint(path: Path, net: NetConfig, params: Mapping[str, np.ndarray],
                    momentum: Mapping[str, np.ndarray] | None = None, state: dict | None = None) -> Path:
    """Write the archive atomically; an interrupted save leaves any previous file intact."""
    momentum = dict(momentum or {})
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dtype": _PAYLOAD_DTYPE,
        "net": net_config_to_dict(net),
        "state": state or {},
        "params": _index(params, "params"),
        "momentum": _index(momentum, "momentum"),
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _add(zf, MANIFEST, dumps_stable(manifest).encode("utf-8"))
        for folder, arrays in (("params", params), ("momentum", momentum)):
            for name, arr in arrays.items():
                _add(zf, f"{folder}/{name}.bin", np.ascontiguousarray(arr, dtype=_PAYLOAD_DTYPE).tobytes())
    atomic_write_bytes(Path(path), buf.getvalue())
    logger.info("Saved checkpoint %s (%d tensors)", path, len(params))
    return Path(path)


def _read_arrays(zf: zipfile.ZipFile, entries: List[dict]) -> Dict[str, np.ndarray]:
    out = {}
    for entry in entries:
        raw = zf.read(entry["file"])
        shape = tuple(entry["shape"])
        arr = np.frombuffer(raw, dtype=_PAYLOAD_DTYPE)
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"Tensor {entry['name']!r} holds {arr.size} values, manifest says {list(shape)}")
        out[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return out


def load_checkpoint(path: Path) -> Checkpoint:
    try:
        with zipfile.ZipFile(path, "r") as zf:
            manifest = json.loads(zf.read(MANIFEST).decode("utf-8"))
            if manifest.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointError(f"{path} is not an {CHECKPOINT_FORMAT} archive")
            if manifest.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(
                    f"{path} has checkpoint version {manifest.get('version')!r}; this build reads {CHECKPOINT_VERSION}"
                )
            params = _read_arrays(zf, manifest["params"])
            momentum = _read_arrays(zf, manifest.get("momentum", []))
    except CheckpointError:
        raise
    except (OSError, zipfile.BadZipFile, KeyError, ValueError) as exc:
        raise CheckpointError(f"Cannot read checkpoint {path}: {exc}") from exc
    return Checkpoint(manifest["net"], params, momentum, manifest.get("state", {}))


def check_compatible(expected: Mapping[str, tuple], found: Mapping[str, np.ndarray]) -> None:
    """Raise naming the first parameter, in model order, that is missing or shaped differently."""
    for name, shape in expected.items():
        if name not in found:
            raise CheckpointError(f"Checkpoint lacks parameter {name!r}")
        if tuple(found[name].shape) != tuple(shape):
            raise CheckpointError(
                f"Parameter {name!r} has shape {list(found[name].shape)} in the checkpoint, model expects {list(shape)}"
            )
    extra = [n for n in found if n not in expected]
    if extra:
        raise CheckpointError(f"Checkpoint has parameter {extra[0]!r} unknown to the model")
