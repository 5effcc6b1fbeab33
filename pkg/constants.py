"""Central constants and configuration values for the sleep stager.

This module contains all magic numbers, strings, and configuration constants
used throughout the toolkit to improve maintainability and reduce duplication.
"""

from typing import Dict, List, Tuple

# ============================================================================
# File and Directory Paths
# ============================================================================

CONFIG_FILE: str = "stager_config.json"
OUTPUT_DIR: str = "output"
CACHE_DIR: str = "cache"
CHECKPOINT_DIR: str = "checkpoints"
FOLDS_DIR: str = "folds"
REPORTS_DIR: str = "reports"

LOG_FILE: str = "stager.log"
TRAINING_LOG_FILE: str = "training.log"
CACHE_FILE: str = "epochs.sscache"
MANIFEST_FILE: str = "manifest.json"
MANIFEST_TABLE_FILE: str = "manifest.csv"
RUN_CONFIG_SNAPSHOT_FILE: str = "run_config.json"
PRETRAINED_CHECKPOINT_FILE: str = "pretrained_cnn.ssckpt"
MODEL_CHECKPOINT_FILE: str = "model.ssckpt"
METRICS_FILE: str = "metrics.json"
CONFUSION_FILE: str = "confusion.csv"
METRICS_WORKBOOK_FILE: str = "metrics.xlsx"
PREDICTIONS_FILE: str = "predictions.csv"
HYPNOGRAM_TEXT_FILE: str = "hypnogram.txt"
HYPNOGRAM_SVG_FILE: str = "hypnogram.svg"
CELL_TRACE_FILE: str = "cell_trace.csv"
FILTER_MAP_FILE_TEMPLATE: str = "filter_activations_{branch}.csv"
SIDECAR_HYPNOGRAM_SUFFIX: str = ".hyp.csv"

# Environment variables read through python-dotenv
ENV_OUTPUT_DIR: str = "SLEEPSTAGER_OUTPUT_DIR"
ENV_JOBS: str = "SLEEPSTAGER_JOBS"
ENV_SEED: str = "SLEEPSTAGER_SEED"


# ============================================================================
# Sleep Stages
# ============================================================================

STAGE_NAMES: Tuple[str, ...] = ("W", "N1", "N2", "N3", "REM")
N_STAGES: int = len(STAGE_NAMES)
EPOCH_SECONDS: int = 30

# One character per stage for text hypnograms
STAGE_CHARS: Tuple[str, ...] = ("W", "1", "2", "3", "R")

# Top-to-bottom order of the hypnogram stage axis
HYPNOGRAM_ORDER: Tuple[str, ...] = ("W", "REM", "N1", "N2", "N3")

SCORING_STANDARDS: Tuple[str, ...] = ("AASM", "RK")
LABEL_PREFIX: str = "Sleep stage "

# Raw label text (after prefix removal) for each scoring manual
RK_LABELS: Dict[str, str] = {
    "W": "W",
    "1": "N1",
    "2": "N2",
    "3": "N3",
    "4": "N3",
    "R": "REM",
}
AASM_LABELS: Dict[str, str] = {
    "W": "W",
    "1": "N1",
    "N1": "N1",
    "2": "N2",
    "N2": "N2",
    "3": "N3",
    "N3": "N3",
    "R": "REM",
    "REM": "REM",
}
EXCLUDED_LABELS: Tuple[str, ...] = (
    "M", "MOVEMENT", "MOVEMENT TIME", "?", "UNKNOWN", "UNSCORED",
)

# 30 minutes of wake either side of the sleep period
WAKE_MARGIN_EPOCHS: int = 60


# ============================================================================
# EDF / EDF+ Format
# ============================================================================

EDF_FIXED_HEADER_BYTES: int = 256
EDF_SIGNAL_HEADER_BYTES: int = 256
EDF_SAMPLE_BYTES: int = 2
EDF_TEXT_ENCODING: str = "latin-1"
EDF_ANNOTATION_LABEL: str = "EDF Annotations"
EDF_PLUS_CONTINUOUS: str = "EDF+C"
EDF_VERSION: str = "0"

# (field name, width in bytes) in file order
EDF_HEADER_FIELDS: List[Tuple[str, int]] = [
    ("version", 8),
    ("patient", 80),
    ("recording", 80),
    ("start_date", 8),
    ("start_time", 8),
    ("header_bytes", 8),
    ("reserved", 44),
    ("n_records", 8),
    ("record_duration", 8),
    ("n_signals", 4),
]

# Signal fields are stored field-major: all labels, then all transducers...
EDF_SIGNAL_FIELDS: List[Tuple[str, int]] = [
    ("label", 16),
    ("transducer", 80),
    ("physical_dimension", 8),
    ("physical_min", 8),
    ("physical_max", 8),
    ("digital_min", 8),
    ("digital_max", 8),
    ("prefiltering", 80),
    ("samples_per_record", 8),
    ("reserved", 32),
]

TAL_DURATION_SEPARATOR: bytes = b"\x15"
TAL_LABEL_TERMINATOR: bytes = b"\x14"
TAL_TERMINATOR: bytes = b"\x00"
TAL_ONSET_PATTERN: str = r"^[+-]\d+(\.\d*)?$"

# Two-digit EDF years below this pivot belong to the 2000s
EDF_YEAR_PIVOT: int = 85


# ============================================================================
# Model Defaults
# ============================================================================

MIN_SAMPLING_RATE: int = 16
CONV1_FILTERS: int = 64
CONV2_FILTERS: int = 128
N_CONV2_LAYERS: int = 3

SMALL_POOL1: Tuple[int, int] = (8, 8)
SMALL_CONV2_WIDTH: int = 8
SMALL_POOL2: Tuple[int, int] = (4, 4)

LARGE_POOL1: Tuple[int, int] = (4, 4)
LARGE_CONV2_WIDTH: int = 6
LARGE_POOL2: Tuple[int, int] = (2, 2)

LSTM_HIDDEN: int = 512
LSTM_LAYERS: int = 2
SEQ_LENGTH: int = 25
DROPOUT_RATE: float = 0.5
FORGET_GATE_BIAS: float = 1.0

BN_DECAY: float = 0.999
BN_EPSILON: float = 1e-5


# ============================================================================
# Training Defaults
# ============================================================================

N_PRETRAIN_PASSES: int = 100
N_FINETUNE_PASSES: int = 200
PRETRAIN_BATCH: int = 100
FINETUNE_LANES: int = 10
LR_PRETRAIN: float = 1e-4
LR_CNN: float = 1e-6
LR_SEQUENCE: float = 1e-4
CLIP_THRESHOLD: float = 10.0
WEIGHT_DECAY_LAMBDA: float = 1e-3
ADAM_BETA1: float = 0.9
ADAM_BETA2: float = 0.999
ADAM_EPSILON: float = 1e-8
DEFAULT_SEED: int = 0
DEFAULT_K: int = 20

TRAINING_LOG_HEADER: str = "phase,pass,step,loss,grad_norm,lr_cnn,lr_sequence"


# ============================================================================
# Persistence
# ============================================================================

CACHE_MAGIC: bytes = b"SSCACHE\x00"
CHECKPOINT_MAGIC: bytes = b"SSCKPT\x00\x00"
CACHE_VERSION: int = 1
CHECKPOINT_VERSION: int = 1

DTYPE_CODES: Dict[str, str] = {
    "f": "<f8",
    "i": "<i8",
}

DIGEST_CHUNK_BYTES: int = 1 << 20


# ============================================================================
# Logging Configuration
# ============================================================================

LOG_FORMAT: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
QUIET_LOGGERS: Tuple[str, ...] = ("matplotlib", "PIL")
LOG_DATE_FORMAT: str = "%Y-%m-%d %H:%M:%S"


# ============================================================================
# Reports
# ============================================================================

TIMESTAMP_FORMAT: str = "%Y%m%d_%H%M%S"
PREDICTION_COLUMNS: List[str] = [
    "epoch_index", "stage", "probW", "probN1", "probN2", "probN3", "probREM",
]
METRIC_COLUMNS: List[str] = ["PR", "RE", "F1"]
DEFAULT_TRACE_CELLS: Tuple[int, ...] = (0, 1, 2, 3)
ANALYSIS_CHUNK: int = 256
HOOK_POLL_SECONDS: float = 0.05
HYPNOGRAM_HASH_SALT: str = "sleepstager"

EXCEL_HEADER_COLOR: str = "D9E1F2"
EXCEL_HEADER_FONT_COLOR: str = "000000"
EXCEL_DATA_BAR_COLOR: str = "638EC6"
EXCEL_MIN_COLUMN_WIDTH: int = 10
EXCEL_MAX_COLUMN_WIDTH: int = 40
