# constants.py
APP_NAME = "AFRAN"
APP_VERSION = "0.3.0"

# Config file schema
CONFIG_SCHEMA_VERSION = 1

# Weight archive format
CHECKPOINT_FORMAT = "afran-checkpoint"
CHECKPOINT_VERSION = 1

# Exit codes
EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_FAILURE = 3

# Environment variable capping worker parallelism
THREADS_ENV_VAR = "AFRAN_THREADS"

# Pyramid levels, finest first
LEVELS = ("P2", "P3", "P4")
TAPS = ("conv4_3", "conv5_3", "conv7")
TAP_STRIDES = (8, 16, 32)

# Box coding variances (centre, size)
VARIANCE_CENTER = 0.1
VARIANCE_SIZE = 0.2

# Class ids used by the detection head
BACKGROUND = 0
AIRCRAFT = 1
CLASS_NAMES = ("background", "aircraft")

# COCO-style evaluation constants
IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = 101
AREA_SMALL = 32 ** 2
AREA_MEDIUM = 96 ** 2
MAX_DETS_PER_IMAGE = 100

# Reference complexity of the full-width network
REFERENCE_PARAMS = 35.82e6
REFERENCE_MAC = 150.59e9
COMPLEXITY_TOLERANCE = 0.10

# Dataset layout
IMAGES_DIR = "images"
ANNOTATIONS_FILE = "annotations.jsonl"
SPLIT_FILE = "split.json"
SPLIT_RATIO = (5, 2, 3)
SPLITS = ("train", "val", "test")

# Training artifacts
TRAIN_LOG_FILE = "train_log.csv"
LAST_CHECKPOINT = "last.afran"
BEST_CHECKPOINT = "best.afran"
LOG_FILE = "afran.log"

DEFAULT_CONFIG = {
    "schema_version": CONFIG_SCHEMA_VERSION,
    "net": {
        "input_size": 640,
        "width_multiplier": 1.0,
        "affm": {
            "channels": 256,
            "sa_levels": ["P2", "P3", "P4"],
            "groups": [2, 3, 2],
            "feature_forward": {"bm": True, "mt": True},
        },
        "dlcm": {
            "stack_depth": 2,
            "dilation": [1, 1, 1],
        },
        "head": {
            "k": 3,
            "num_classes": 2,
            "anchors_per_cell": 3,
            "channels": 32,
        },
        "anchors": {
            "scales": [32, 64, 128],
            "ratios": [0.5, 1.0, 2.0],
            "strides": [8, 16, 32],
            "pos_thresh": 0.5,
            "neg_filter": 0.99,
        },
        "nms": {
            "iou_thresh": 0.45,
            "pre_top_k": 1000,
            "keep": 200,
            "score_floor": 0.01,
        },
        "modules": {"sa": True, "dlcm": True, "adm": True},
    },
    "train": {
        "epochs": 200,
        "batch": 4,
        "lr": 1e-3,
        "lr_decay_epochs": [75, 150],
        "gamma": 0.1,
        "warmup_epochs": 5,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "seed": 0,
        "ohem_ratio": 3,
        "alpha": 1.0,
        "augment": True,
        "eval_every": 1,
        "queue_size": 4,
    },
    "eval": {
        "ap_conf_thresh": 0.05,
        "pr_conf_thresh": 0.5,
        "pr_iou_thresh": 0.5,
    },
    "settings": {
        "log_level": "INFO",
    },
}

# Desk-scale preset: overrides applied on top of DEFAULT_CONFIG
DESK_PRESET = {
    "net": {
        "input_size": 320,
        "width_multiplier": 0.125,
        "affm": {"channels": 16},
        "head": {"channels": 16},
    },
    "train": {
        "epochs": 30,
        "lr_decay_epochs": [20, 26],
        "warmup_epochs": 1,
    },
}
