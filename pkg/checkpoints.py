"""Model checkpoints.

A checkpoint is an archive (see archive_helpers) holding every parameter
and batch-norm moving statistic under its dotted name, with metadata:

    {"kind": "full" | "cnn",
     "model_config": {...},
     "provenance": {"seed": ..., "pass": ..., "step": ..., "train_subjects": [...]}}

"cnn" checkpoints carry only the two branches plus the temporary
pre-training head (names starting with "head.").
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from archive_helpers import read_archive, write_archive
from config import ModelConfig
from constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from exceptions import (
    CheckpointError, ConfigurationError, FileOperationError, ShapeError,
    ValidationError
)
from layers import OutputLayer
from network import SleepStageNet, build_model
from tensor import Tensor

logger = logging.getLogger(__name__)

HEAD_PREFIX = "head."


def provenance(
    seed: int,
    pass_index: Optional[int] = None,
    step: Optional[int] = None,
    train_subjects: Sequence[str] = ()
) -> Dict[str, Any]:
    return {"seed": seed, "pass": pass_index, "step": step, "train_subjects": list(train_subjects)}


def save_checkpoint(
    path: Union[str, Path],
    model: SleepStageNet,
    origin: Optional[Dict[str, Any]] = None
) -> Path:
    """Write a full-model checkpoint."""
    metadata = {
        "kind": "full",
        "model_config": model.config.to_dict(),
        "provenance": origin or provenance(0),
    }
    path = write_archive(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, metadata, model.state_dict())
    logger.info(f"Saved model checkpoint to {path}")
    return path


def save_cnn_checkpoint(
    path: Union[str, Path],
    config: ModelConfig,
    cnn_state: Dict[str, np.ndarray],
    head: Optional[OutputLayer] = None,
    origin: Optional[Dict[str, Any]] = None
) -> Path:
    """Write the pre-trained branches, plus the temporary head when given."""
    arrays = dict(cnn_state)
    if head is not None:
        arrays.update({name: t.data for name, t in head.named_parameters("head").items()})
    metadata = {
        "kind": "cnn",
        "model_config": config.to_dict(),
        "provenance": origin or provenance(0),
    }
    path = write_archive(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, metadata, arrays)
    logger.info(f"Saved pre-trained CNN checkpoint to {path}")
    return path


def _read(path: Union[str, Path], kind: str) -> Tuple[Dict[str, Any], Dict[str, np.ndarray], ModelConfig]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(str(path), "file not found")
    try:
        metadata, arrays = read_archive(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    except FileOperationError as e:
        raise CheckpointError(str(path), e.details or e.message) from e
    if metadata.get("kind") != kind:
        raise CheckpointError(str(path), f"expected a '{kind}' checkpoint, found '{metadata.get('kind')}'")
    try:
        config = ModelConfig.from_dict(metadata["model_config"])
    except (KeyError, ConfigurationError) as e:
        raise CheckpointError(str(path), f"invalid model_config: {e}") from e
    return metadata, arrays, config


def load_checkpoint(path: Union[str, Path]) -> Tuple[SleepStageNet, Dict[str, Any]]:
    """Rebuild a network from a full checkpoint.

    Returns:
        (model, metadata)

    Raises:
        CheckpointError: If the file is missing, corrupt, of another
            version, or does not hold every parameter exactly once
    """
    metadata, arrays, config = _read(path, "full")
    seed = int(metadata.get("provenance", {}).get("seed") or 0)
    model = build_model(config, seed)
    expected = set(model.state_dict())
    unexpected = sorted(set(arrays) - expected)
    if unexpected:
        raise CheckpointError(str(path), f"unknown entries {unexpected[:5]}")
    try:
        model.load_state_dict(arrays)
    except (ValidationError, ShapeError) as e:
        raise CheckpointError(str(path), e.format_message()) from e
    logger.info(f"Loaded checkpoint {path} ({model.parameter_count()} parameters)")
    return model, metadata


def load_cnn_state(
    path: Union[str, Path]
) -> Tuple[Dict[str, np.ndarray], Optional[OutputLayer], ModelConfig, Dict[str, Any]]:
    """Read a pre-trained CNN checkpoint.

    Returns:
        (branch state, temporary head or None, model config, metadata)

    Raises:
        CheckpointError: If the file is missing, corrupt or not a CNN checkpoint
    """
    metadata, arrays, config = _read(path, "cnn")
    state = {k: v for k, v in arrays.items() if not k.startswith(HEAD_PREFIX)}
    head = None
    if f"{HEAD_PREFIX}weights" in arrays and f"{HEAD_PREFIX}bias" in arrays:
        head = OutputLayer(
            weights=Tensor(arrays[f"{HEAD_PREFIX}weights"], requires_grad=True),
            bias=Tensor(arrays[f"{HEAD_PREFIX}bias"], requires_grad=True),
        )
    return state, head, config, metadata


def checkpoint_subjects(metadata: Dict[str, Any]) -> List[str]:
    """Training subjects recorded in a checkpoint's provenance."""
    return list(metadata.get("provenance", {}).get("train_subjects", []))
