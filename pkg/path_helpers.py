"""Path resolution utilities for the sleep stager.

This module centralises the layout of the output directory so every command
finds the artifacts written by the previous one:

    <output_dir>/cache/epochs.sscache
    <output_dir>/cache/manifest.json
    <output_dir>/cache/run_config.json
    <output_dir>/checkpoints/pretrained_cnn.ssckpt
    <output_dir>/checkpoints/model.ssckpt
    <output_dir>/folds/fold_00/...
    <output_dir>/reports/...
"""

import logging
from pathlib import Path
from typing import Union

from constants import (
    CACHE_DIR, CACHE_FILE, CHECKPOINT_DIR, FOLDS_DIR, MANIFEST_FILE,
    MANIFEST_TABLE_FILE, REPORTS_DIR, RUN_CONFIG_SNAPSHOT_FILE
)

logger = logging.getLogger(__name__)


def ensure_directory_exists(directory: Union[str, Path]) -> Path:
    """Ensure a directory exists, creating it if necessary.

    Args:
        directory: Directory path to ensure exists

    Returns:
        Path object for the directory

    Raises:
        OSError: If directory cannot be created
    """
    dir_path = Path(directory)

    try:
        dir_path.mkdir(parents=True, exist_ok=True)
        logger.debug(f"Ensured directory exists: {dir_path}")
        return dir_path
    except OSError as e:
        logger.error(f"Failed to create directory '{dir_path}': {e}")
        raise


def get_cache_path(output_dir: Union[str, Path]) -> Path:
    return Path(output_dir) / CACHE_DIR / CACHE_FILE


def get_manifest_path(output_dir: Union[str, Path]) -> Path:
    return Path(output_dir) / CACHE_DIR / MANIFEST_FILE


def get_manifest_table_path(output_dir: Union[str, Path]) -> Path:
    return Path(output_dir) / CACHE_DIR / MANIFEST_TABLE_FILE


def get_run_config_snapshot_path(output_dir: Union[str, Path]) -> Path:
    """Settings the cache was prepared with."""
    return Path(output_dir) / CACHE_DIR / RUN_CONFIG_SNAPSHOT_FILE


def get_checkpoint_path(output_dir: Union[str, Path], name: str) -> Path:
    return Path(output_dir) / CHECKPOINT_DIR / name


def get_fold_dir(output_dir: Union[str, Path], fold_index: int) -> Path:
    """Directory holding one fold's checkpoints, logs and confusions."""
    return Path(output_dir) / FOLDS_DIR / f"fold_{fold_index:02d}"


def get_reports_dir(output_dir: Union[str, Path]) -> Path:
    return Path(output_dir) / REPORTS_DIR


def get_log_file_path(log_filename: Union[str, Path], output_dir: Union[str, Path, None] = None) -> Path:
    """Get the path for a log file.

    The parent directory is created if it doesn't exist.

    Args:
        log_filename: Name of the log file
        output_dir: Directory to place it in (current directory if None)

    Returns:
        Path to the log file
    """
    log_path = Path(log_filename) if output_dir is None else Path(output_dir) / log_filename

    try:
        log_path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        logger.warning(f"Could not create log directory '{log_path.parent}': {e}")

    return log_path
