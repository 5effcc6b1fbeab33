"""Configuration management for the sleep stager.

This module provides dataclasses for the network layout, the training plan
and a whole run, with validation on construction and JSON round-tripping.
"""

import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from constants import (
    ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON, BN_DECAY, BN_EPSILON,
    CLIP_THRESHOLD, CONFIG_FILE, CONV1_FILTERS, CONV2_FILTERS, DEFAULT_K,
    DEFAULT_SEED, DROPOUT_RATE, ENV_JOBS, ENV_OUTPUT_DIR, ENV_SEED,
    EPOCH_SECONDS, FINETUNE_LANES, LARGE_CONV2_WIDTH, LARGE_POOL1,
    LARGE_POOL2, LR_CNN, LR_PRETRAIN, LR_SEQUENCE, LSTM_HIDDEN, LSTM_LAYERS,
    MIN_SAMPLING_RATE, N_CONV2_LAYERS, N_FINETUNE_PASSES, N_PRETRAIN_PASSES,
    N_STAGES, OUTPUT_DIR, PRETRAIN_BATCH, SCORING_STANDARDS, SEQ_LENGTH,
    SMALL_CONV2_WIDTH, SMALL_POOL1, SMALL_POOL2, WEIGHT_DECAY_LAMBDA
)
from exceptions import ConfigurationError

logger = logging.getLogger(__name__)


def round_half_up(value: float, minimum: int = 1) -> int:
    """Round to the nearest integer, halves upwards, with a floor."""
    return max(minimum, int(math.floor(value + 0.5)))


def same_output_length(length: int, stride: int) -> int:
    return -(-length // stride)


@dataclass
class BranchConfig:
    """Layer sizes of one CNN branch.

    conv1 -> maxpool1 -> dropout -> conv2 x n_conv2 -> maxpool2 -> flatten
    """

    conv1_width: int
    conv1_stride: int
    pool1_size: int
    pool1_stride: int
    conv2_width: int
    pool2_size: int
    pool2_stride: int
    conv1_filters: int = CONV1_FILTERS
    conv2_filters: int = CONV2_FILTERS
    n_conv2: int = N_CONV2_LAYERS

    def __post_init__(self) -> None:
        self._validate()

    def _validate(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, int) or value < 1:
                raise ConfigurationError(
                    f"branch.{f.name}", f"must be a positive integer, got {value}"
                )

    def layer_lengths(self, epoch_samples: int) -> List[Tuple[str, int]]:
        """Output length after every length-changing layer.

        Args:
            epoch_samples: Input length of one epoch

        Returns:
            List of (layer name, output length) in forward order
        """
        conv1 = same_output_length(epoch_samples, self.conv1_stride)
        pool1 = same_output_length(conv1, self.pool1_stride)
        pool2 = same_output_length(pool1, self.pool2_stride)
        return [("conv1", conv1), ("pool1", pool1), ("conv2", pool1), ("pool2", pool2)]

    def flat_size(self, epoch_samples: int) -> int:
        return self.layer_lengths(epoch_samples)[-1][1] * self.conv2_filters

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BranchConfig":
        return cls(**{f.name: data[f.name] for f in fields(cls) if f.name in data})

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)


@dataclass
class ModelConfig:
    """Network layout, derived from the sampling rate."""

    fs: int
    small_branch: BranchConfig
    large_branch: BranchConfig
    n_classes: int = N_STAGES
    lstm_hidden: int = LSTM_HIDDEN
    lstm_layers: int = LSTM_LAYERS
    shortcut_width: int = 2 * LSTM_HIDDEN
    seq_length: int = SEQ_LENGTH
    dropout: float = DROPOUT_RATE
    bn_decay: float = BN_DECAY
    bn_epsilon: float = BN_EPSILON

    def __post_init__(self) -> None:
        self._validate()

    def _validate(self) -> None:
        """Validate configuration values.

        Raises:
            ConfigurationError: If a value is out of range
        """
        if self.fs < MIN_SAMPLING_RATE:
            raise ConfigurationError(
                "fs", f"sampling rate {self.fs} Hz is below {MIN_SAMPLING_RATE} Hz"
            )
        if self.n_classes < 2:
            raise ConfigurationError("n_classes", "need at least 2 classes")
        if self.shortcut_width != 2 * self.lstm_hidden:
            raise ConfigurationError(
                "shortcut_width",
                f"must equal 2 x lstm_hidden ({2 * self.lstm_hidden}), "
                f"got {self.shortcut_width}"
            )
        if self.lstm_hidden < 1 or self.lstm_layers < 1 or self.seq_length < 1:
            raise ConfigurationError(
                "model", "lstm_hidden, lstm_layers and seq_length must be positive"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout", f"must lie in [0, 1), got {self.dropout}")
        if not 0.0 < self.bn_decay < 1.0:
            raise ConfigurationError("bn_decay", f"must lie in (0, 1), got {self.bn_decay}")
        if self.bn_epsilon <= 0:
            raise ConfigurationError("bn_epsilon", "must be positive")
        if self.small_branch.conv1_filters != self.large_branch.conv1_filters:
            logger.warning("Branches use different first-layer filter counts")

    @property
    def epoch_samples(self) -> int:
        return self.fs * EPOCH_SECONDS

    @property
    def feature_size(self) -> int:
        """Width of the concatenated branch outputs."""
        return (
            self.small_branch.flat_size(self.epoch_samples)
            + self.large_branch.flat_size(self.epoch_samples)
        )

    @classmethod
    def for_sampling_rate(
        cls,
        fs: Union[int, float],
        conv1_filters: int = CONV1_FILTERS,
        conv2_filters: int = CONV2_FILTERS,
        n_conv2: int = N_CONV2_LAYERS,
        **overrides: Any
    ) -> "ModelConfig":
        """Derive both branches from the sampling rate.

        The small branch uses a first-layer width of fs/2 and stride fs/16;
        the large branch uses width fs x 4 and stride fs/2. Non-integer
        sizes round half up with a minimum of 1.

        Args:
            fs: Sampling rate in Hz; must be integral and at least 16
            conv1_filters: First-layer filter count of both branches
            conv2_filters: Filter count of the deeper conv layers
            n_conv2: Number of deeper conv layers per branch
            **overrides: Any other ModelConfig field

        Returns:
            ModelConfig instance

        Raises:
            ConfigurationError: If fs is too small or not integral
        """
        if float(fs) != int(fs):
            raise ConfigurationError("fs", f"sampling rate must be integral, got {fs}")
        fs = int(fs)
        if fs < MIN_SAMPLING_RATE:
            raise ConfigurationError(
                "fs", f"sampling rate {fs} Hz is below {MIN_SAMPLING_RATE} Hz"
            )

        small = BranchConfig(
            conv1_width=round_half_up(fs / 2),
            conv1_stride=round_half_up(fs / 16),
            pool1_size=SMALL_POOL1[0],
            pool1_stride=SMALL_POOL1[1],
            conv2_width=SMALL_CONV2_WIDTH,
            pool2_size=SMALL_POOL2[0],
            pool2_stride=SMALL_POOL2[1],
            conv1_filters=conv1_filters,
            conv2_filters=conv2_filters,
            n_conv2=n_conv2,
        )
        large = BranchConfig(
            conv1_width=fs * 4,
            conv1_stride=round_half_up(fs / 2),
            pool1_size=LARGE_POOL1[0],
            pool1_stride=LARGE_POOL1[1],
            conv2_width=LARGE_CONV2_WIDTH,
            pool2_size=LARGE_POOL2[0],
            pool2_stride=LARGE_POOL2[1],
            conv1_filters=conv1_filters,
            conv2_filters=conv2_filters,
            n_conv2=n_conv2,
        )
        if "lstm_hidden" in overrides and "shortcut_width" not in overrides:
            overrides["shortcut_width"] = 2 * overrides["lstm_hidden"]
        return cls(fs=fs, small_branch=small, large_branch=large, **overrides)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        """Create ModelConfig from a dictionary written by to_dict."""
        try:
            values = {
                f.name: data[f.name] for f in fields(cls)
                if f.name in data and f.name not in ("small_branch", "large_branch")
            }
            return cls(
                small_branch=BranchConfig.from_dict(data["small_branch"]),
                large_branch=BranchConfig.from_dict(data["large_branch"]),
                **values
            )
        except (KeyError, TypeError) as e:
            raise ConfigurationError("model", f"malformed model config: {e}") from e

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["small_branch"] = self.small_branch.to_dict()
        data["large_branch"] = self.large_branch.to_dict()
        return data


@dataclass
class TrainPlan:
    """Hyperparameters of the two-step training algorithm."""

    n_pretrain_epochs: int = N_PRETRAIN_PASSES
    n_finetune_epochs: int = N_FINETUNE_PASSES
    pretrain_batch: int = PRETRAIN_BATCH
    finetune_batch: int = FINETUNE_LANES
    seq_len: int = SEQ_LENGTH
    lr_pretrain: float = LR_PRETRAIN
    lr1: float = LR_CNN
    lr2: float = LR_SEQUENCE
    clip_threshold: float = CLIP_THRESHOLD
    weight_decay_lambda: float = WEIGHT_DECAY_LAMBDA
    seed: int = DEFAULT_SEED
    adam_beta1: float = ADAM_BETA1
    adam_beta2: float = ADAM_BETA2
    adam_epsilon: float = ADAM_EPSILON
    pretrain_head_dropout: bool = True
    checkpoint_every_pass: bool = False
    evaluate_cnn_only: bool = False

    def __post_init__(self) -> None:
        self._validate()

    def _validate(self) -> None:
        """Validate configuration values.

        Learning rates may be zero (a frozen group); everything else that
        counts or scales must be positive.

        Raises:
            ConfigurationError: If a value is out of range
        """
        for name in (
            "n_pretrain_epochs", "n_finetune_epochs", "pretrain_batch",
            "finetune_batch", "seq_len"
        ):
            if getattr(self, name) < 1:
                raise ConfigurationError(name, f"must be positive, got {getattr(self, name)}")
        for name in ("lr_pretrain", "lr1", "lr2", "weight_decay_lambda"):
            if getattr(self, name) < 0:
                raise ConfigurationError(name, f"must be non-negative, got {getattr(self, name)}")
        if self.lr1 >= self.lr2:
            raise ConfigurationError(
                "lr1", f"CNN learning rate {self.lr1} must be below {self.lr2}"
            )
        if self.clip_threshold <= 0:
            raise ConfigurationError("clip_threshold", "must be positive")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ConfigurationError("adam_beta", "betas must lie in [0, 1)")
        if self.adam_epsilon <= 0:
            raise ConfigurationError("adam_epsilon", "must be positive")
        if self.seed < 0:
            raise ConfigurationError("seed", f"must be non-negative, got {self.seed}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainPlan":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            logger.warning(f"Ignoring unknown plan keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in data.items() if k in known})

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class RunConfig:
    """Main configuration of a sleep-stager run."""

    data_dir: str = "data"
    psg_glob: str = "*-PSG.edf"
    hypnogram_glob: str = "*-Hypnogram.edf"
    pair_prefix_length: int = 6
    subject_pattern: str = r"^SC4(\d{2})"
    channel: str = "EEG Fpz-Cz"
    montage: Dict[str, List[str]] = field(default_factory=dict)
    fs: Optional[int] = None
    scoring_standard: str = "RK"
    k: int = DEFAULT_K
    seed: int = DEFAULT_SEED
    jobs: int = 1
    output_dir: str = OUTPUT_DIR
    strict: bool = False
    allow_train_overlap: bool = False
    model: Dict[str, Any] = field(default_factory=dict)
    plan: TrainPlan = field(default_factory=TrainPlan)

    def __post_init__(self) -> None:
        self._validate()

    def _validate(self) -> None:
        """Validate configuration values.

        Raises:
            ConfigurationError: If configuration values are invalid
        """
        if self.scoring_standard not in SCORING_STANDARDS:
            raise ConfigurationError(
                "scoring_standard",
                f"'{self.scoring_standard}' is not one of {', '.join(SCORING_STANDARDS)}"
            )
        if self.k < 2:
            raise ConfigurationError("k", f"need at least 2 folds, got {self.k}")
        if self.fs is not None and self.fs < MIN_SAMPLING_RATE:
            raise ConfigurationError("fs", f"sampling rate {self.fs} Hz is too low")
        for name, pair in self.montage.items():
            if len(pair) != 2:
                raise ConfigurationError(
                    "montage", f"'{name}' must name exactly two signals, got {pair}"
                )
        cores = os.cpu_count() or 1
        if self.jobs < 1:
            raise ConfigurationError("jobs", "must be at least 1")
        if self.jobs > cores:
            logger.warning(f"Clamping jobs from {self.jobs} to {cores} available cores")
            self.jobs = cores
        if self.plan.seed != self.seed:
            self.plan.seed = self.seed

    def model_config(self, fs: int) -> ModelConfig:
        """Build the network layout for a sampling rate with the overrides."""
        overrides = dict(self.model)
        overrides.setdefault("seq_length", self.plan.seq_len)
        return ModelConfig.for_sampling_rate(fs, **overrides)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        """Create RunConfig from dictionary.

        Args:
            data: Dictionary with configuration data

        Returns:
            RunConfig instance
        """
        known = {f.name for f in fields(cls)} - {"plan"}
        values = {k: v for k, v in data.items() if k in known}
        plan_data = data.get("plan", {})
        plan = TrainPlan.from_dict(plan_data) if isinstance(plan_data, dict) else TrainPlan()
        return cls(plan=plan, **values)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["plan"] = self.plan.to_dict()
        return data


def environment_defaults() -> Dict[str, Any]:
    """Read run defaults from the environment (.env already loaded)."""
    values: Dict[str, Any] = {}
    if os.getenv(ENV_OUTPUT_DIR):
        values["output_dir"] = os.getenv(ENV_OUTPUT_DIR)
    for key, env_name in (("jobs", ENV_JOBS), ("seed", ENV_SEED)):
        raw = os.getenv(env_name)
        if raw:
            try:
                values[key] = int(raw)
            except ValueError:
                logger.warning(f"Ignoring non-integer {env_name}={raw!r}")
    return values


def load_run_config(
    config_file: Union[str, Path, None] = CONFIG_FILE,
    overrides: Optional[Dict[str, Any]] = None
) -> RunConfig:
    """Load configuration from file, environment and flag overrides.

    Precedence, lowest first: defaults, environment, file, overrides.

    Args:
        config_file: Path to configuration file (None for none)
        overrides: Values from command-line flags; None entries are skipped

    Returns:
        RunConfig instance

    Raises:
        ConfigurationError: If the merged configuration is invalid
    """
    from utils import load_json

    data: Dict[str, Any] = environment_defaults()
    if config_file is not None:
        file_data = load_json(config_file, None)
        if file_data is None:
            logger.info(f"No config file at {config_file}, using defaults")
        elif not isinstance(file_data, dict):
            raise ConfigurationError(str(config_file), "top level must be an object")
        else:
            data.update(file_data)

    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value

    config = RunConfig.from_dict(data)
    logger.info("Configuration loaded successfully")
    return config


def save_run_config(config: RunConfig, config_file: Union[str, Path] = CONFIG_FILE) -> bool:
    """Save configuration to file.

    Args:
        config: RunConfig instance to save
        config_file: Path to configuration file

    Returns:
        True if save successful

    Raises:
        OSError: If save fails
    """
    from utils import save_json

    if not save_json(config.to_dict(), config_file):
        raise OSError("Failed to save configuration")

    logger.info("Configuration saved successfully")
    return True
