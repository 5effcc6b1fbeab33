"""Command-line surface of the sleep stager.

Subcommands share one output directory:

    prepare   EDF inputs -> epoch cache + manifest
    pretrain  cache -> pre-trained CNN checkpoint
    finetune  cache + CNN checkpoint -> full model checkpoint
    evaluate  k-fold cross-validation, or scoring of a checkpoint on the cache
    predict   checkpoint + cache or EDF -> predictions and hypnogram
    analyze   checkpoint + cache -> filter activation maps and cell traces
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from dotenv import load_dotenv

from analysis import cell_trace, filter_activations, save_analysis
from checkpoints import (
    checkpoint_subjects, load_checkpoint, load_cnn_state, provenance,
    save_checkpoint, save_cnn_checkpoint
)
from config import RunConfig, load_run_config, save_run_config
from constants import (
    CELL_TRACE_FILE, CHECKPOINT_DIR, CONFIG_FILE, DEFAULT_TRACE_CELLS, FILTER_MAP_FILE_TEMPLATE,
    HYPNOGRAM_SVG_FILE, HYPNOGRAM_TEXT_FILE, METRICS_WORKBOOK_FILE,
    MODEL_CHECKPOINT_FILE, PREDICTIONS_FILE, PRETRAINED_CHECKPOINT_FILE,
    STAGE_NAMES, TRAINING_LOG_FILE
)
from cross_validation import run_cv
from dataset import (
    discover_recordings, input_digest, load_recordings, manifest_table,
    oversample, read_epoch_cache, segment_signal, select_subjects,
    stage_counts, stack_epochs, write_epoch_cache
)
from date_helpers import get_current_timestamp
from edf_helpers import load_channel, read_edf
from excel_helpers import write_metrics_workbook
from exceptions import (
    DataPreparationError, FileOperationError, MissingPrerequisiteError,
    SleepStagerError, ValidationError
)
from hypnogram import render_hypnogram
from logging_config import close_training_log, setup_cli_logging, setup_training_log
from metrics import confusion, format_report, metrics_report, save_report
from models import PrepareSummary, SubjectRecording, predictions_header
from network import SleepStageNet, build_model
from path_helpers import (
    ensure_directory_exists, get_cache_path, get_checkpoint_path,
    get_manifest_path, get_manifest_table_path, get_reports_dir,
    get_run_config_snapshot_path
)
from training import TrainingHooks, finetune, log_hooks, pretrain
from utils import load_json, parse_int_list, save_json

load_dotenv()

logger = logging.getLogger(__name__)


# ============================================================================
# Shared helpers
# ============================================================================

def _subjects_arg(text: Optional[str]) -> List[str]:
    return [item.strip() for item in (text or "").split(",") if item.strip()]


def load_cache(config: RunConfig, subjects: Sequence[str] = ()) -> Tuple[List[SubjectRecording], Dict[str, Any]]:
    """Read the prepared epoch cache, optionally keeping some subjects.

    Raises:
        MissingPrerequisiteError: If prepare has not been run
        ValidationError: If none of the requested subjects is cached
    """
    path = get_cache_path(config.output_dir)
    if not path.is_file():
        raise MissingPrerequisiteError("epoch cache (run 'prepare' first)", str(path))
    recordings, metadata = read_epoch_cache(path)
    if subjects:
        recordings = select_subjects(recordings, subjects)
        if not recordings:
            raise ValidationError("subject", ",".join(subjects), "no cached recordings for these subjects")
    return recordings, metadata


def _require(path: Path, artifact: str) -> Path:
    if not path.is_file():
        raise MissingPrerequisiteError(artifact, str(path))
    return path


def _check_rate(model: SleepStageNet, fs: int) -> None:
    if model.config.fs != fs:
        raise ValidationError("fs", fs, f"model was built for {model.config.fs} Hz input")


def _subject_ids(recordings: Sequence[SubjectRecording]) -> List[str]:
    return sorted({r.subject_id for r in recordings})


def _phase_hooks(config: RunConfig, phase: str) -> Tuple[TrainingHooks, logging.Logger]:
    directory = ensure_directory_exists(Path(config.output_dir) / CHECKPOINT_DIR)
    training_logger = setup_training_log(directory / f"{phase}_{TRAINING_LOG_FILE}", name=f"training.{phase}")
    return log_hooks(training_logger), training_logger


# ============================================================================
# prepare
# ============================================================================

def cmd_prepare(config: RunConfig) -> PrepareSummary:
    """Parse the EDF inputs into the epoch cache and write the manifest.

    A rerun on unchanged inputs and settings leaves the cache untouched.

    Raises:
        DataPreparationError: If no recording could be prepared
        SleepStagerError: The first per-file failure in strict mode
    """
    sources, unpaired = discover_recordings(
        config.data_dir, config.psg_glob, config.hypnogram_glob,
        config.pair_prefix_length, config.subject_pattern,
    )
    for name, reason in unpaired.items():
        logger.warning(f"Skipping {name}: {reason}")
    if not sources:
        raise DataPreparationError("dataset", f"no recordings matching '{config.psg_glob}' in {config.data_dir}")

    digest = input_digest(sources, config)
    cache_path = get_cache_path(config.output_dir)
    manifest_path = get_manifest_path(config.output_dir)
    previous = load_json(manifest_path, None) if cache_path.is_file() else None
    if isinstance(previous, dict) and previous.get("digest") == digest:
        logger.info(f"Epoch cache {cache_path} is up to date")
        return PrepareSummary(
            recordings=len(previous.get("recordings", [])),
            failed_files=previous.get("failed_files", {}),
            stage_counts=previous.get("stage_counts", {}),
            up_to_date=True,
        )

    recordings, failed = load_recordings(sources, config)
    failed.update(unpaired)
    if not recordings:
        raise DataPreparationError("dataset", f"all {len(sources)} recordings failed to load")

    counts = stage_counts(recordings)
    manifest = {
        "digest": digest,
        "created": get_current_timestamp(),
        "channel": config.channel,
        "fs": recordings[0].fs,
        "scoring_standard": config.scoring_standard,
        "subjects": _subject_ids(recordings),
        "recordings": [
            {
                "subject_id": r.subject_id,
                "recording_id": r.recording_id,
                "start_time": r.start_time.isoformat() if r.start_time else None,
                **stage_counts([r]),
            }
            for r in recordings
        ],
        "stage_counts": counts,
        "failed_files": failed,
    }
    ensure_directory_exists(cache_path.parent)
    write_epoch_cache(cache_path, recordings, manifest)
    # The manifest marks the cache complete, so it is written last
    if not save_json(manifest, manifest_path):
        raise FileOperationError("write", str(manifest_path), "the epoch cache has no manifest and will be rebuilt")
    manifest_table(recordings).to_csv(get_manifest_table_path(config.output_dir), index=False)
    save_run_config(config, get_run_config_snapshot_path(config.output_dir))

    log_prepare_summary_table(recordings, failed)
    return PrepareSummary(len(recordings), failed, counts)


def log_prepare_summary_table(recordings: Sequence[SubjectRecording], failed: Dict[str, str]) -> None:
    """Log per-recording stage counts and the skipped files.

    Args:
        recordings: Prepared recordings
        failed: File name to failure reason
    """
    header = f"{'Subject':<10} | {'Recording':<12} | " + " | ".join(f"{n:>6}" for n in (*STAGE_NAMES, "Total"))
    separator = "-" * len(header)

    logger.info("")
    logger.info("=" * len(header))
    logger.info("PREPARED RECORDINGS")
    logger.info("=" * len(header))
    logger.info(header)
    logger.info(separator)
    for recording in recordings:
        counts = stage_counts([recording])
        row = f"{recording.subject_id:<10} | {recording.recording_id:<12} | "
        logger.info(row + " | ".join(f"{counts[n]:>6}" for n in (*STAGE_NAMES, "Total")))
    logger.info(separator)
    totals = stage_counts(recordings)
    logger.info(f"{'Total':<10} | {'':<12} | " + " | ".join(f"{totals[n]:>6}" for n in (*STAGE_NAMES, "Total")))
    for name, reason in failed.items():
        logger.info(f"Skipped {name}: {reason[:60]}")
    logger.info(f"Total: {len(recordings)}/{len(recordings) + len(failed)} recordings prepared")
    logger.info("=" * len(header))
    logger.info("")


# ============================================================================
# Training
# ============================================================================

def cmd_pretrain(config: RunConfig, subjects: Sequence[str] = ()) -> Path:
    """Pre-train both CNN branches on the class-balanced cache.

    Returns:
        Path of the CNN checkpoint
    """
    recordings, _ = load_cache(config, subjects)
    plan = config.plan
    train_subjects = _subject_ids(recordings)
    model_config = config.model_config(recordings[0].fs)
    x, y = stack_epochs(recordings)
    x_balanced, y_balanced = oversample(x, y, plan.seed)
    model = build_model(model_config, plan.seed)

    hooks, training_logger = _phase_hooks(config, "pretrain")
    if plan.checkpoint_every_pass:
        def save_pass(phase: str, pass_index: int, loss: float) -> None:
            path = get_checkpoint_path(config.output_dir, f"pretrained_cnn_pass{pass_index:03d}.ssckpt")
            save_cnn_checkpoint(path, model_config, model.cnn_state_dict(), None,
                                provenance(plan.seed, pass_index, None, train_subjects))
        hooks.on_pass_end = save_pass

    try:
        result = pretrain(model, x_balanced, y_balanced, plan, hooks)
    finally:
        close_training_log(training_logger)

    return save_cnn_checkpoint(
        get_checkpoint_path(config.output_dir, PRETRAINED_CHECKPOINT_FILE),
        model_config, result.cnn_state, result.head,
        provenance(plan.seed, plan.n_pretrain_epochs - 1, None, train_subjects),
    )


def cmd_finetune(config: RunConfig, checkpoint: Optional[str] = None, subjects: Sequence[str] = ()) -> Path:
    """Fine-tune the full network from a pre-trained CNN checkpoint.

    Returns:
        Path of the model checkpoint
    """
    recordings, _ = load_cache(config, subjects)
    cnn_path = _require(
        Path(checkpoint) if checkpoint else get_checkpoint_path(config.output_dir, PRETRAINED_CHECKPOINT_FILE),
        "pre-trained CNN checkpoint (run 'pretrain' first)",
    )
    cnn_state, _, model_config, _ = load_cnn_state(cnn_path)
    plan = config.plan
    train_subjects = _subject_ids(recordings)
    model = build_model(model_config, plan.seed)
    _check_rate(model, recordings[0].fs)

    hooks, training_logger = _phase_hooks(config, "finetune")
    if plan.checkpoint_every_pass:
        def save_pass(phase: str, pass_index: int, loss: float) -> None:
            path = get_checkpoint_path(config.output_dir, f"model_pass{pass_index:03d}.ssckpt")
            save_checkpoint(path, model, provenance(plan.seed, pass_index, None, train_subjects))
        hooks.on_pass_end = save_pass

    try:
        finetune(model, cnn_state, recordings, plan, hooks)
    finally:
        close_training_log(training_logger)

    return save_checkpoint(
        get_checkpoint_path(config.output_dir, MODEL_CHECKPOINT_FILE),
        model,
        provenance(plan.seed, plan.n_finetune_epochs - 1, None, train_subjects),
    )


# ============================================================================
# Evaluation
# ============================================================================

def _score_checkpoint(config: RunConfig, checkpoint: str, subjects: Sequence[str]):
    model, metadata = load_checkpoint(_require(Path(checkpoint), "model checkpoint"))
    recordings, _ = load_cache(config, subjects)
    _check_rate(model, recordings[0].fs)

    overlap = sorted(set(checkpoint_subjects(metadata)) & set(_subject_ids(recordings)))
    if overlap and not config.allow_train_overlap:
        raise ValidationError(
            "subjects", ", ".join(overlap),
            "the checkpoint was trained on these subjects; pass --allow-train-overlap to score them anyway"
        )
    if overlap:
        logger.warning(f"Scoring {len(overlap)} subjects the checkpoint was trained on")

    y_true, y_pred = [], []
    for recording in recordings:
        labels = recording.labels
        predicted = np.array([int(p.stage) for p in model.predict(recording)], dtype=np.int64)
        keep = labels >= 0
        y_true.append(labels[keep])
        y_pred.append(predicted[keep])
    cm = confusion(np.concatenate(y_true), np.concatenate(y_pred))
    return metrics_report(cm), cm


def cmd_evaluate(config: RunConfig, checkpoint: Optional[str] = None, subjects: Sequence[str] = ()) -> Path:
    """Cross-validate, or score a checkpoint on the cached subjects.

    Returns:
        Reports directory
    """
    reports_dir = ensure_directory_exists(get_reports_dir(config.output_dir))
    if checkpoint:
        report, cm = _score_checkpoint(config, checkpoint, subjects)
        folds, cnn_only = [], None
    else:
        recordings, _ = load_cache(config, subjects)
        result = run_cv(
            recordings, config.k, config.plan, config.model_config(recordings[0].fs),
            jobs=config.jobs, output_dir=config.output_dir,
        )
        report, cm, folds, cnn_only = result.report, result.confusion, result.folds, result.cnn_only_report

    save_report(report, cm, reports_dir)
    write_metrics_workbook(report, cm, folds, reports_dir / METRICS_WORKBOOK_FILE, cnn_only)
    for line in format_report(report, cm).splitlines():
        logger.info(line)
    if cnn_only is not None:
        logger.info(
            f"CNN only: ACC {100 * cnn_only.accuracy:.1f}  MF1 {100 * cnn_only.macro_f1:.1f}"
        )
    return reports_dir


# ============================================================================
# Prediction and analysis
# ============================================================================

def _prediction_inputs(config: RunConfig, input_path: Optional[str], subjects: Sequence[str]) -> List[SubjectRecording]:
    if not input_path:
        recordings, _ = load_cache(config, subjects)
        return recordings
    header, digital = read_edf(_require(Path(input_path), "input recording"))
    signal, fs = load_channel(header, digital, config.channel, config.montage)
    name = Path(input_path).stem
    recording = segment_signal(signal, fs, subject_id=name, recording_id=name)
    recording.start_time = header.start_datetime
    return [recording]


def cmd_predict(
    config: RunConfig,
    checkpoint: Optional[str] = None,
    input_path: Optional[str] = None,
    subjects: Sequence[str] = ()
) -> List[Path]:
    """Stage every epoch and render the hypnogram of each recording.

    Writes ``predictions.csv``, ``hypnogram.txt`` and ``hypnogram.svg`` to
    ``reports/predictions/<recording_id>/``.

    Returns:
        One output directory per recording
    """
    model_path = Path(checkpoint) if checkpoint else get_checkpoint_path(config.output_dir, MODEL_CHECKPOINT_FILE)
    model, _ = load_checkpoint(_require(model_path, "model checkpoint (run 'finetune' first)"))
    directories = []
    for recording in _prediction_inputs(config, input_path, subjects):
        _check_rate(model, recording.fs)
        predictions = model.predict(recording)
        directory = ensure_directory_exists(get_reports_dir(config.output_dir) / "predictions" / recording.recording_id)
        lines = [predictions_header()] + [p.to_line() for p in predictions]
        (directory / PREDICTIONS_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
        render_hypnogram(
            [p.stage for p in predictions],
            directory / HYPNOGRAM_TEXT_FILE,
            directory / HYPNOGRAM_SVG_FILE,
            title=recording.recording_id,
        )
        logger.info(f"{recording.recording_id}: {len(predictions)} epochs staged -> {directory}")
        directories.append(directory)
    return directories


def cmd_analyze(
    config: RunConfig,
    checkpoint: Optional[str] = None,
    subjects: Sequence[str] = (),
    cells: Sequence[int] = DEFAULT_TRACE_CELLS
) -> Path:
    """Filter activation maps over the cached epochs and a cell trace of the first recording.

    Returns:
        Analysis directory
    """
    model_path = Path(checkpoint) if checkpoint else get_checkpoint_path(config.output_dir, MODEL_CHECKPOINT_FILE)
    model, _ = load_checkpoint(_require(model_path, "model checkpoint (run 'finetune' first)"))
    recordings, _ = load_cache(config, subjects)
    _check_rate(model, recordings[0].fs)

    predicted = [
        np.array([int(p.stage) for p in model.predict(r)], dtype=np.int64) for r in recordings
    ]
    maps = filter_activations(
        model,
        np.concatenate([r.samples for r in recordings]),
        np.concatenate(predicted),
    )
    first = recordings[0]
    trace = cell_trace(model, first, cells)
    directory = get_reports_dir(config.output_dir) / "analysis"
    save_analysis(maps, trace, directory, FILTER_MAP_FILE_TEMPLATE, CELL_TRACE_FILE, first.epoch_indices)
    return directory


# ============================================================================
# Entry point
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subparser per command."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=CONFIG_FILE, help="Path to the run configuration file")
    common.add_argument("--seed", type=int, default=None, help="Seed for initialisation, shuffling and dropout")
    common.add_argument("--jobs", type=int, default=None, help="Parallel workers for loading and folds")
    common.add_argument("--strict", action="store_true", help="Abort on the first unreadable input file")
    common.add_argument(
        "--allow-train-overlap", action="store_true",
        help="Allow scoring a checkpoint on subjects it was trained on"
    )
    common.add_argument("--output-dir", type=str, default=None, help="Directory for caches, checkpoints and reports")
    common.add_argument("--verbose", "-v", action="store_true", help="Enable verbose logging")
    common.add_argument("--checkpoint", type=str, default=None, help="Checkpoint to load instead of the default")
    common.add_argument("--input", type=str, default=None, help="EDF recording to predict (predict) or data directory (prepare)")
    common.add_argument("--subject", type=str, default=None, help="Comma-separated subject ids to restrict to")
    common.add_argument("--cells", type=str, default=None, help="Comma-separated LSTM cell indices to trace")

    parser = argparse.ArgumentParser(
        description="Automatic sleep stage scoring from single-channel EEG",
        formatter_class=argparse.RawDescriptionHelpFormatter
    )
    commands = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("prepare", "Build the epoch cache from EDF recordings"),
        ("pretrain", "Pre-train the CNN branches"),
        ("finetune", "Fine-tune the full network"),
        ("evaluate", "Cross-validate or score a checkpoint"),
        ("predict", "Stage recordings and render hypnograms"),
        ("analyze", "Filter activation maps and LSTM cell traces"),
    ):
        commands.add_parser(name, parents=[common], help=text, description=text)
    return parser


def run_command(args: argparse.Namespace, config: RunConfig) -> Any:
    subjects = _subjects_arg(args.subject)
    if args.command == "prepare":
        return cmd_prepare(config)
    if args.command == "pretrain":
        return cmd_pretrain(config, subjects)
    if args.command == "finetune":
        return cmd_finetune(config, args.checkpoint, subjects)
    if args.command == "evaluate":
        return cmd_evaluate(config, args.checkpoint, subjects)
    if args.command == "predict":
        return cmd_predict(config, args.checkpoint, args.input, subjects)
    try:
        cells = parse_int_list(args.cells) if args.cells else list(DEFAULT_TRACE_CELLS)
    except ValueError as e:
        raise ValidationError("cells", args.cells, "expected comma-separated integers") from e
    return cmd_analyze(config, args.checkpoint, subjects, cells)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main function for command-line execution.

    Returns:
        Process exit code
    """
    args = build_parser().parse_args(argv)
    overrides = {
        "seed": args.seed,
        "jobs": args.jobs,
        "output_dir": args.output_dir,
        "strict": True if args.strict else None,
        "allow_train_overlap": True if args.allow_train_overlap else None,
        "data_dir": args.input if args.command == "prepare" else None,
    }
    try:
        config = load_run_config(args.config, overrides)
        ensure_directory_exists(config.output_dir)
        setup_cli_logging(args.verbose, config.output_dir)
        logger.info(f"Running '{args.command}' with seed {config.seed}, output in {config.output_dir}")
        run_command(args, config)
    except SleepStagerError as e:
        logger.error(e.format_message())
        return 1
    except OSError as e:
        logger.error(f"File system error: {e}")
        return 1
    return 0


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
