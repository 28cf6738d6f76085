import copy
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple

from constants import (
    CONFIG_SCHEMA_VERSION,
    DEFAULT_CONFIG,
    DESK_PRESET,
    LEVELS,
    TAP_STRIDES,
)
from tensor import ShapeError
from utils import write_json

logger = logging.getLogger(__name__)

PRESETS = {"full": {}, "desk": DESK_PRESET}

_VALID_LOG_LEVELS = {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}


class ConfigError(ValueError):
    """Invalid configuration file, value or override."""


def _deep_merge(base: dict, overrides: Mapping) -> dict:
    merged = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _check_known_keys(data: Mapping, reference: Mapping, prefix: str = "") -> None:
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if key not in reference:
            raise ConfigError(f"Unknown config key '{dotted}'")
        if isinstance(reference[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"Config key '{dotted}' must be an object, got {type(value).__name__}")
            _check_known_keys(value, reference[key], dotted + ".")


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def _positive_int(value, key: str) -> int:
    _require(isinstance(value, int) and not isinstance(value, bool) and value >= 1,
             f"{key} must be a positive integer, got {value!r}")
    return int(value)


def _probability(value, key: str) -> float:
    _require(isinstance(value, (int, float)) and not isinstance(value, bool) and 0.0 <= value <= 1.0,
             f"{key} must lie in [0, 1], got {value!r}")
    return float(value)


def _flag(value, key: str) -> bool:
    _require(isinstance(value, bool), f"{key} must be true or false, got {value!r}")
    return value


# ── typed views ──────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class AnchorConfig:
    scales: Tuple[float, ...] = (32.0, 64.0, 128.0)
    ratios: Tuple[float, ...] = (0.5, 1.0, 2.0)
    strides: Tuple[int, ...] = TAP_STRIDES
    pos_thresh: float = 0.5
    neg_filter: float = 0.99

    @property
    def anchors_per_cell(self) -> int:
        return len(self.ratios)

    def validate(self) -> None:
        _require(len(self.scales) == len(LEVELS), f"anchors.scales needs one scale per level, got {list(self.scales)}")
        _require(tuple(self.strides) == TAP_STRIDES, f"anchors.strides must be {list(TAP_STRIDES)}, got {list(self.strides)}")
        _require(all(s > 0 for s in self.scales), "anchors.scales must be positive")
        _require(len(self.ratios) >= 1 and all(r > 0 for r in self.ratios), "anchors.ratios must be positive")
        _probability(self.pos_thresh, "anchors.pos_thresh")
        _probability(self.neg_filter, "anchors.neg_filter")


@dataclass(frozen=True)
class NmsConfig:
    iou_thresh: float = 0.45
    pre_top_k: int = 1000
    keep: int = 200
    score_floor: float = 0.01

    def validate(self) -> None:
        _probability(self.iou_thresh, "nms.iou_thresh")
        _positive_int(self.pre_top_k, "nms.pre_top_k")
        _positive_int(self.keep, "nms.keep")
        _probability(self.score_floor, "nms.score_floor")


@dataclass(frozen=True)
class AffmLevelConfig:
    """Fusion settings resolved for one pyramid level."""

    level: str
    r: int
    channels: int
    sources: Tuple[str, ...]
    split_attention: bool


@dataclass(frozen=True)
class AffmConfig:
    channels: int = 256
    sa_levels: Tuple[str, ...] = LEVELS
    groups: Tuple[int, ...] = (2, 3, 2)
    feature_forward_bm: bool = True
    feature_forward_mt: bool = True

    def sources(self, level: str) -> Tuple[str, ...]:
        """Source maps concatenated at ``level``, as (branch, map) tags.

        ``down`` maps pass the stride-2 branch, ``same`` maps the two-conv
        branch and ``up`` maps the deconvolution branch.
        """
        if level == "P4":
            return (("down:conv5_3",) if self.feature_forward_mt else ()) + ("same:conv7",)
        if level == "P3":
            return (("down:conv4_3",) if self.feature_forward_bm else ()) + ("same:conv5_3", "up:P4")
        if level == "P2":
            return ("same:conv4_3", "up:P3")
        raise ConfigError(f"Unknown pyramid level {level!r}")

    def level(self, name: str, sa_enabled: bool = True) -> AffmLevelConfig:
        srcs = self.sources(name)
        r = len(srcs)
        use_sa = sa_enabled and name in self.sa_levels
        return AffmLevelConfig(level=name, r=r, channels=self.channels, sources=srcs, split_attention=use_sa)

    def validate(self) -> None:
        _positive_int(self.channels, "net.affm.channels")
        _require(len(self.groups) == len(LEVELS), f"net.affm.groups needs {len(LEVELS)} entries, got {list(self.groups)}")
        for g in self.groups:
            _positive_int(g, "net.affm.groups[]")
        for lvl in self.sa_levels:
            _require(lvl in LEVELS, f"net.affm.sa_levels: unknown level {lvl!r}")
        for name, declared in zip(LEVELS, self.groups):
            r = len(self.sources(name))
            if name in self.sa_levels and declared != r:
                logger.warning("affm.groups declares r=%d at %s but %d source maps are enabled; using r=%d",
                               declared, name, r, r)


@dataclass(frozen=True)
class DlcmConfig:
    stack_depth: int = 2
    dilation: Tuple[int, ...] = (1, 1, 1)
    channels: int = 256

    def dilation_for(self, level: str) -> int:
        if level not in LEVELS or LEVELS.index(level) >= len(self.dilation):
            raise ShapeError(f"dlcm: no dilation configured for level {level!r}")
        return self.dilation[LEVELS.index(level)]

    def validate(self) -> None:
        _positive_int(self.stack_depth, "net.dlcm.stack_depth")
        _require(len(self.dilation) == len(LEVELS),
                 f"net.dlcm.dilation needs one value per level, got {list(self.dilation)}")
        for d in self.dilation:
            _positive_int(d, "net.dlcm.dilation[]")
        _positive_int(self.channels, "net.dlcm.channels")


@dataclass(frozen=True)
class HeadConfig:
    k: int = 3
    num_classes: int = 2
    anchors_per_cell: int = 3
    channels: int = 32

    def validate(self) -> None:
        _positive_int(self.k, "net.head.k")
        _require(self.k % 2 == 1, f"net.head.k must be odd, got {self.k}")
        _require(self.num_classes >= 2, f"net.head.num_classes must be >= 2, got {self.num_classes}")
        _positive_int(self.anchors_per_cell, "net.head.anchors_per_cell")
        _positive_int(self.channels, "net.head.channels")


@dataclass(frozen=True)
class ModuleSwitches:
    sa: bool = True
    dlcm: bool = True
    adm: bool = True


@dataclass(frozen=True)
class NetConfig:
    input_size: int = 640
    width_multiplier: float = 1.0
    affm: AffmConfig = field(default_factory=AffmConfig)
    dlcm: DlcmConfig = field(default_factory=DlcmConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    nms: NmsConfig = field(default_factory=NmsConfig)
    modules: ModuleSwitches = field(default_factory=ModuleSwitches)

    def width(self, channels: int) -> int:
        """Backbone channel count scaled by the width multiplier (at least 1)."""
        return max(1, int(round(channels * self.width_multiplier)))

    def validate(self) -> None:
        _positive_int(self.input_size, "net.input_size")
        _require(self.input_size % 32 == 0, f"net.input_size must be divisible by 32, got {self.input_size}")
        _require(isinstance(self.width_multiplier, (int, float)) and self.width_multiplier > 0,
                 f"net.width_multiplier must be positive, got {self.width_multiplier!r}")
        self.affm.validate()
        self.dlcm.validate()
        self.head.validate()
        self.anchors.validate()
        self.nms.validate()
        _require(self.dlcm.channels == self.affm.channels,
                 f"net.dlcm.channels ({self.dlcm.channels}) must equal net.affm.channels ({self.affm.channels})")
        _require(self.head.anchors_per_cell == self.anchors.anchors_per_cell,
                 f"net.head.anchors_per_cell ({self.head.anchors_per_cell}) must equal the number of "
                 f"anchor ratios ({self.anchors.anchors_per_cell})")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch: int = 4
    lr: float = 1e-3
    lr_decay_epochs: Tuple[int, ...] = (75, 150)
    gamma: float = 0.1
    warmup_epochs: int = 5
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    ohem_ratio: int = 3
    alpha: float = 1.0
    augment: bool = True
    eval_every: int = 1
    queue_size: int = 4

    def validate(self) -> None:
        _positive_int(self.epochs, "train.epochs")
        _positive_int(self.batch, "train.batch")
        _require(self.lr > 0, f"train.lr must be positive, got {self.lr}")
        decay = list(self.lr_decay_epochs)
        _require(all(b > a for a, b in zip(decay, decay[1:])),
                 f"train.lr_decay_epochs must be strictly increasing, got {decay}")
        _require(all(0 < e < self.epochs for e in decay),
                 f"train.lr_decay_epochs must lie inside (0, {self.epochs}), got {decay}")
        _require(0 < self.gamma <= 1, f"train.gamma must lie in (0, 1], got {self.gamma}")
        _require(isinstance(self.warmup_epochs, int) and self.warmup_epochs >= 0,
                 f"train.warmup_epochs must be a non-negative integer, got {self.warmup_epochs!r}")
        _require(0 <= self.momentum < 1, f"train.momentum must lie in [0, 1), got {self.momentum}")
        _require(self.weight_decay >= 0, f"train.weight_decay must be non-negative, got {self.weight_decay}")
        _require(isinstance(self.seed, int) and self.seed >= 0, f"train.seed must be a non-negative integer, got {self.seed!r}")
        _positive_int(self.ohem_ratio, "train.ohem_ratio")
        _require(self.alpha >= 0, f"train.alpha must be non-negative, got {self.alpha}")
        _flag(self.augment, "train.augment")
        _positive_int(self.eval_every, "train.eval_every")
        _positive_int(self.queue_size, "train.queue_size")


@dataclass(frozen=True)
class EvalConfig:
    ap_conf_thresh: float = 0.05
    pr_conf_thresh: float = 0.5
    pr_iou_thresh: float = 0.5

    def validate(self) -> None:
        _probability(self.ap_conf_thresh, "eval.ap_conf_thresh")
        _probability(self.pr_conf_thresh, "eval.pr_conf_thresh")
        _probability(self.pr_iou_thresh, "eval.pr_iou_thresh")


def _build(cls, data: Mapping, key: str, **extra):
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = tuple(value) if isinstance(value, list) else value
    kwargs.update(extra)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"Invalid '{key}' section: {exc}") from exc


def net_config_from_dict(net: Mapping) -> NetConfig:
    affm = dict(net["affm"])
    forward = affm.pop("feature_forward")
    affm_cfg = _build(AffmConfig, affm, "net.affm",
                      feature_forward_bm=_flag(forward["bm"], "net.affm.feature_forward.bm"),
                      feature_forward_mt=_flag(forward["mt"], "net.affm.feature_forward.mt"))
    modules = net["modules"]
    cfg = NetConfig(
        input_size=net["input_size"],
        width_multiplier=net["width_multiplier"],
        affm=affm_cfg,
        dlcm=_build(DlcmConfig, net["dlcm"], "net.dlcm", channels=affm_cfg.channels),
        head=_build(HeadConfig, net["head"], "net.head"),
        anchors=_build(AnchorConfig, net["anchors"], "net.anchors"),
        nms=_build(NmsConfig, net["nms"], "net.nms"),
        modules=ModuleSwitches(sa=_flag(modules["sa"], "net.modules.sa"),
                               dlcm=_flag(modules["dlcm"], "net.modules.dlcm"),
                               adm=_flag(modules["adm"], "net.modules.adm")),
    )
    cfg.validate()
    return cfg


def net_config_to_dict(cfg: NetConfig) -> Dict[str, Any]:
    """Inverse of :func:`net_config_from_dict`; used for checkpoint manifests."""
    return {
        "input_size": cfg.input_size,
        "width_multiplier": cfg.width_multiplier,
        "affm": {
            "channels": cfg.affm.channels,
            "sa_levels": list(cfg.affm.sa_levels),
            "groups": list(cfg.affm.groups),
            "feature_forward": {"bm": cfg.affm.feature_forward_bm, "mt": cfg.affm.feature_forward_mt},
        },
        "dlcm": {"stack_depth": cfg.dlcm.stack_depth, "dilation": list(cfg.dlcm.dilation)},
        "head": {"k": cfg.head.k, "num_classes": cfg.head.num_classes,
                 "anchors_per_cell": cfg.head.anchors_per_cell, "channels": cfg.head.channels},
        "anchors": {"scales": list(cfg.anchors.scales), "ratios": list(cfg.anchors.ratios),
                    "strides": list(cfg.anchors.strides), "pos_thresh": cfg.anchors.pos_thresh,
                    "neg_filter": cfg.anchors.neg_filter},
        "nms": {"iou_thresh": cfg.nms.iou_thresh, "pre_top_k": cfg.nms.pre_top_k,
                "keep": cfg.nms.keep, "score_floor": cfg.nms.score_floor},
        "modules": {"sa": cfg.modules.sa, "dlcm": cfg.modules.dlcm, "adm": cfg.modules.adm},
    }


class ConfigManager:
    """Loads, validates and saves the detector configuration.

    Values are layered: built-in defaults, then the named preset, then the
    JSON file (if any), then explicit overrides from the command line.
    """

    def __init__(self, config_file: str | Path | None = None, preset: str = "full"):
        if preset not in PRESETS:
            raise ConfigError(f"Unknown preset {preset!r}; choose one of {sorted(PRESETS)}")
        self.preset = preset
        self.config_file = Path(config_file) if config_file is not None else None
        self.default_config = _deep_merge(DEFAULT_CONFIG, PRESETS[preset])
        self.config = self._load_config()
        self.validate()

    def _load_config(self) -> dict:
        """Merges the JSON file over the preset defaults."""
        if self.config_file is None:
            return copy.deepcopy(self.default_config)
        try:
            with open(self.config_file, "r", encoding="utf-8") as f:
                config_data = json.load(f)
        except FileNotFoundError:
            logger.info("Config file %s not found. Using defaults.", self.config_file)
            return copy.deepcopy(self.default_config)
        except json.JSONDecodeError as exc:
            backup = Path(str(self.config_file) + ".corrupt.bak")
            try:
                shutil.copy2(str(self.config_file), str(backup))
                logger.error("Config corrupted. Backed up to %s.", backup)
            except OSError:
                logger.error("Config corrupted and backup failed.")
            raise ConfigError(f"Config file {self.config_file} is not valid JSON: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"Cannot read config file {self.config_file}: {exc}") from exc

        if not isinstance(config_data, dict):
            raise ConfigError(f"Config file {self.config_file} must hold a JSON object")
        version = config_data.get("schema_version")
        if version is None:
            logger.warning("Config %s has no schema_version; migrating as version %d.",
                           self.config_file, CONFIG_SCHEMA_VERSION)
            config_data["schema_version"] = CONFIG_SCHEMA_VERSION
        elif version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(
                f"Config {self.config_file} has schema_version {version!r}; this build reads {CONFIG_SCHEMA_VERSION}"
            )
        _check_known_keys(config_data, DEFAULT_CONFIG)
        return _deep_merge(self.default_config, config_data)

    def apply_overrides(self, overrides: Mapping[str, Any]) -> None:
        """Applies dotted-key overrides such as ``{"train.seed": 3}``; ``None`` values are skipped."""
        for dotted, value in overrides.items():
            if value is None:
                continue
            node = self.config
            parts = dotted.split(".")
            for part in parts[:-1]:
                if part not in node or not isinstance(node[part], dict):
                    raise ConfigError(f"Unknown config key '{dotted}'")
                node = node[part]
            if parts[-1] not in node:
                raise ConfigError(f"Unknown config key '{dotted}'")
            node[parts[-1]] = value
        self.validate()

    def validate(self) -> None:
        self.net_config()
        self.train_config()
        self.eval_config()
        self.get_log_level()

    def save_config(self, target: str | Path | None = None) -> Path:
        """Writes the effective configuration as JSON."""
        target = Path(target) if target is not None else self.config_file
        if target is None:
            raise ConfigError("No config file path to save to")
        return write_json(target, self.config)

    def get_config(self) -> dict:
        return self.config

    def net_config(self) -> NetConfig:
        return net_config_from_dict(self.config["net"])

    def train_config(self) -> TrainConfig:
        cfg = _build(TrainConfig, self.config["train"], "train")
        cfg.validate()
        return cfg

    def eval_config(self) -> EvalConfig:
        cfg = _build(EvalConfig, self.config["eval"], "eval")
        cfg.validate()
        return cfg

    def get_log_level(self) -> str:
        """Returns the configured log level string (e.g. 'DEBUG', 'INFO', 'WARNING')."""
        level = str(self.config.get("settings", {}).get("log_level", "INFO")).upper()
        if level not in _VALID_LOG_LEVELS:
            raise ConfigError(f"settings.log_level must be one of {sorted(_VALID_LOG_LEVELS)}, got {level!r}")
        return level
