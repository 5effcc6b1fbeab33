"""Centralized logging configuration for the sleep stager.

This module provides the unified root-logger setup used by the command line,
plus the dedicated per-step training log written as delimited lines.
"""

import logging
import sys
from pathlib import Path
from typing import List, Optional, Union

from constants import LOG_DATE_FORMAT, LOG_FILE, LOG_FORMAT, QUIET_LOGGERS, TRAINING_LOG_HEADER
from path_helpers import get_log_file_path


def setup_logging(
    log_file: Union[str, Path, None] = None,
    level: int = logging.INFO,
    console_output: bool = True,
    file_output: bool = True
) -> logging.Logger:
    """Configure the root logger for a run.

    Handlers from an earlier call are replaced, so repeated in-process runs
    (the test suite drives ``main`` many times) never log twice. matplotlib
    is held at WARNING even in verbose runs.

    Args:
        log_file: Log file path (None for console only)
        level: Level for both handlers
        console_output: Log to stdout
        file_output: Log to ``log_file``

    Returns:
        Configured root logger
    """
    root_logger = logging.getLogger()
    root_logger.setLevel(level)
    for handler in list(root_logger.handlers):
        root_logger.removeHandler(handler)
        handler.close()
    for name in QUIET_LOGGERS:
        logging.getLogger(name).setLevel(max(level, logging.WARNING))

    formatter = logging.Formatter(LOG_FORMAT, LOG_DATE_FORMAT)
    handlers: List[logging.Handler] = []
    if console_output:
        handlers.append(logging.StreamHandler(sys.stdout))
    if file_output and log_file:
        log_path = get_log_file_path(log_file)
        try:
            handlers.append(logging.FileHandler(log_path, encoding="utf-8"))
        except OSError as e:
            # Console only
            logging.getLogger(__name__).error(f"Could not open run log '{log_path}': {e}")

    for handler in handlers:
        handler.setLevel(level)
        handler.setFormatter(formatter)
        root_logger.addHandler(handler)
    return root_logger


def setup_cli_logging(
    verbose: bool = False,
    output_dir: Union[str, Path, None] = None
) -> logging.Logger:
    """Set up logging for a command-line run.

    Args:
        verbose: Enable verbose (DEBUG) logging
        output_dir: Directory receiving the run log

    Returns:
        Configured root logger
    """
    level = logging.DEBUG if verbose else logging.INFO
    log_file = LOG_FILE if output_dir is None else Path(output_dir) / LOG_FILE
    return setup_logging(
        log_file=log_file,
        level=level,
        console_output=True,
        file_output=True
    )


def setup_training_log(path: Union[str, Path], name: Optional[str] = None) -> logging.Logger:
    """Create the machine-readable per-step training log.

    The logger does not propagate, writes bare messages and starts the file
    with the column header, so the file is plain comma-delimited text.

    Args:
        path: File to write
        name: Logger name; distinct names keep parallel folds apart

    Returns:
        Logger accepting StepRecord.to_log_line() messages
    """
    log_path = get_log_file_path(path)
    logger = logging.getLogger(name or f"training.{log_path}")
    close_training_log(logger)
    logger.propagate = False
    logger.setLevel(logging.INFO)

    handler = logging.FileHandler(log_path, mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(message)s"))
    logger.addHandler(handler)
    logger.info(TRAINING_LOG_HEADER)
    return logger


def close_training_log(logger: logging.Logger) -> None:
    """Flush and detach every handler of a training logger."""
    for handler in list(logger.handlers):
        handler.flush()
        logger.removeHandler(handler)
        handler.close()

