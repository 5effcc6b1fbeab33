"""Subject-wise k-fold cross-validation.

Every fold trains a fresh network on its training subjects (oversampled
pre-training, then sequential fine-tuning) and predicts its held-out
subjects. The test predictions of all folds are pooled before scoring.
"""

import logging
import queue
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from checkpoints import provenance, save_checkpoint, save_cnn_checkpoint
from config import ModelConfig, TrainPlan
from constants import (
    HOOK_POLL_SECONDS, MODEL_CHECKPOINT_FILE, PRETRAINED_CHECKPOINT_FILE,
    TRAINING_LOG_FILE
)
from dataset import oversample, select_subjects, split_folds, stack_epochs
from exceptions import FoldError
from logging_config import close_training_log, setup_training_log
from metrics import confusion, metrics_report, save_report
from models import CrossValidationResult, Fold, FoldResult, SubjectRecording
from network import build_model
from path_helpers import get_fold_dir
from training import TrainingHooks, finetune, log_hooks, predict_cnn_only, pretrain

logger = logging.getLogger(__name__)


def train_fold(
    fold: Fold,
    recordings: Sequence[SubjectRecording],
    model_config: ModelConfig,
    plan: TrainPlan,
    output_dir: Union[str, Path, None] = None,
    hooks: Optional[TrainingHooks] = None
) -> FoldResult:
    """Train on a fold's training subjects and predict its test subjects.

    With an output directory, the fold's checkpoints, training log and
    confusion matrix are written to ``folds/fold_XX``.
    """
    train = select_subjects(recordings, fold.train_subjects)
    test = select_subjects(recordings, fold.test_subjects)
    logger.info(
        f"Fold {fold.index}: {len(train)} training and {len(test)} test recordings "
        f"(test subjects {', '.join(fold.test_subjects)})"
    )

    fold_dir = None if output_dir is None else get_fold_dir(output_dir, fold.index)
    training_logger = None
    if fold_dir is not None:
        training_logger = setup_training_log(fold_dir / TRAINING_LOG_FILE, name=f"training.fold{fold.index}")
        hooks = log_hooks(training_logger, hooks)

    try:
        x, y = stack_epochs(train)
        x_balanced, y_balanced = oversample(x, y, plan.seed)
        model = build_model(model_config, plan.seed)
        pretrained = pretrain(model, x_balanced, y_balanced, plan, hooks)
        cnn_only_model = model.clone() if plan.evaluate_cnn_only else None
        finetune(model, pretrained.cnn_state, train, plan, hooks)
    finally:
        if training_logger is not None:
            close_training_log(training_logger)

    y_true, y_pred, cnn_pred = [], [], []
    for recording in test:
        y_true.append(recording.labels)
        y_pred.append(np.array([int(p.stage) for p in model.predict(recording)], dtype=np.int64))
        if cnn_only_model is not None:
            cnn_pred.append(np.argmax(predict_cnn_only(cnn_only_model, pretrained.head, recording), axis=1))

    y_true_all = np.concatenate(y_true) if y_true else np.zeros(0, dtype=np.int64)
    y_pred_all = np.concatenate(y_pred) if y_pred else np.zeros(0, dtype=np.int64)
    cm = confusion(y_true_all, y_pred_all)
    report = metrics_report(cm)

    if fold_dir is not None:
        origin = provenance(plan.seed, plan.n_finetune_epochs - 1, None, fold.train_subjects)
        save_cnn_checkpoint(fold_dir / PRETRAINED_CHECKPOINT_FILE, model_config, pretrained.cnn_state, pretrained.head, origin)
        save_checkpoint(fold_dir / MODEL_CHECKPOINT_FILE, model, origin)
        save_report(report, cm, fold_dir)

    logger.info(f"Fold {fold.index}: accuracy {100 * report.accuracy:.1f}% on {cm.total} epochs")
    return FoldResult(
        fold=fold,
        y_true=y_true_all,
        y_pred=y_pred_all,
        confusion=cm,
        report=report,
        cnn_only_pred=np.concatenate(cnn_pred) if cnn_pred else None,
    )


def _relay_hooks(events: "queue.Queue[Tuple[str, tuple]]") -> TrainingHooks:
    """Hooks for a fold worker that only enqueue (event, arguments) messages."""
    return TrainingHooks(
        on_step=lambda record: events.put(("step", (record,))),
        on_state_reset=lambda recording_id, pass_index: events.put(("state_reset", (recording_id, pass_index))),
        on_pass_end=lambda phase, pass_index, loss: events.put(("pass_end", (phase, pass_index, loss))),
    )


def _deliver(events: "queue.Queue[Tuple[str, tuple]]", hooks: TrainingHooks) -> None:
    while True:
        try:
            event, arguments = events.get_nowait()
        except queue.Empty:
            return
        getattr(hooks, event)(*arguments)


def run_cv(
    recordings: Sequence[SubjectRecording],
    k: int,
    plan: TrainPlan,
    model_config: ModelConfig,
    jobs: int = 1,
    output_dir: Union[str, Path, None] = None,
    hooks: Optional[TrainingHooks] = None
) -> CrossValidationResult:
    """Run k-fold cross-validation and score the pooled test predictions.

    Folds run on a thread pool. Their hook events travel through a queue
    and reach ``hooks`` on the calling thread. The first fold to fail
    cancels the folds not yet started.

    Args:
        recordings: Prepared labelled recordings
        k: Number of folds
        plan: Training hyperparameters
        model_config: Network layout
        jobs: Folds trained in parallel
        output_dir: Run directory for per-fold artifacts (None writes nothing)
        hooks: Instrumentation callbacks shared by all folds

    Returns:
        CrossValidationResult with per-fold and pooled metrics

    Raises:
        FoldError: If any fold fails, naming the first fold that failed
    """
    folds = split_folds([r.subject_id for r in recordings], k)
    logger.info(f"Running {len(folds)}-fold cross-validation with {jobs} parallel jobs")

    events: "queue.Queue[Tuple[str, tuple]]" = queue.Queue()
    outcomes: Dict[int, Union[FoldResult, BaseException]] = {}
    failed: List[int] = []
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        futures: Dict[Future, int] = {
            pool.submit(
                train_fold, fold, recordings, model_config, plan, output_dir,
                _relay_hooks(events) if hooks is not None else None
            ): fold.index
            for fold in folds
        }
        pending = set(futures)
        while pending:
            done, pending = wait(pending, timeout=HOOK_POLL_SECONDS, return_when=FIRST_COMPLETED)
            if hooks is not None:
                _deliver(events, hooks)
            for future in done:
                index = futures[future]
                if future.cancelled():
                    continue
                try:
                    outcomes[index] = future.result()
                except Exception as e:
                    logger.error(f"Fold {index} failed: {type(e).__name__}: {e}")
                    outcomes[index] = e
                    failed.append(index)
                    for other in pending:
                        other.cancel()
    if hooks is not None:
        _deliver(events, hooks)

    log_fold_summary_table(folds, outcomes)
    if failed:
        error = outcomes[failed[0]]
        raise FoldError(failed[0], f"{type(error).__name__}: {error}") from error
    if len(outcomes) != len(folds):
        missing = sorted(set(f.index for f in folds) - set(outcomes))
        raise FoldError(missing[0], "cancelled after an earlier failure")

    results: List[FoldResult] = [outcomes[f.index] for f in folds]
    pooled = confusion(
        np.concatenate([r.y_true for r in results]),
        np.concatenate([r.y_pred for r in results]),
    )
    report = metrics_report(pooled)

    cnn_only_report = None
    if plan.evaluate_cnn_only:
        cnn_only_report = metrics_report(confusion(
            np.concatenate([r.y_true for r in results]),
            np.concatenate([r.cnn_only_pred for r in results]),
        ))
    logger.info(
        f"Pooled accuracy {100 * report.accuracy:.1f}%, MF1 {100 * report.macro_f1:.1f}% "
        f"over {pooled.total} epochs"
    )
    return CrossValidationResult(results, pooled, report, cnn_only_report)


def log_fold_summary_table(folds: Sequence[Fold], outcomes: Dict[int, object]) -> None:
    """Log a fold status table.

    Args:
        folds: All folds of the run
        outcomes: FoldResult or exception per finished fold index
    """
    header = f"{'Fold':<6} | {'Status':<8} | {'Test subjects':<24} | {'Epochs':<8} | {'ACC':<6} | {'Failure Reason'}"
    separator = "-" * len(header)

    logger.info("")
    logger.info("=" * len(header))
    logger.info("FOLD STATUS TABLE")
    logger.info("=" * len(header))
    logger.info(header)
    logger.info(separator)
    for fold in folds:
        outcome = outcomes.get(fold.index)
        subjects = ", ".join(fold.test_subjects)[:24]
        if isinstance(outcome, FoldResult):
            row = (
                f"{fold.index:<6} | {'ok':<8} | {subjects:<24} | {outcome.confusion.total:<8} | "
                f"{100 * outcome.report.accuracy:<6.1f} | -"
            )
        elif outcome is None:
            row = f"{fold.index:<6} | {'skipped':<8} | {subjects:<24} | {'-':<8} | {'-':<6} | cancelled"
        else:
            row = f"{fold.index:<6} | {'failed':<8} | {subjects:<24} | {'-':<8} | {'-':<6} | {str(outcome)[:40]}"
        logger.info(row)
    logger.info(separator)
    done = sum(isinstance(o, FoldResult) for o in outcomes.values())
    logger.info(f"Total: {done}/{len(folds)} folds completed")
    logger.info("=" * len(header))
    logger.info("")
