"""Scoring metrics computed from confusion matrices.

Rows of a confusion matrix are the expert stage, columns the predicted
stage. Accuracy, per-class precision/recall/F1, macro F1 and Cohen's
kappa are all derived from the counts alone.
"""

import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix

from constants import (
    CONFUSION_FILE, METRIC_COLUMNS, METRICS_FILE, N_STAGES, STAGE_NAMES
)
from exceptions import MetricsError, ShapeError, ValidationError
from models import ConfusionMatrix, MetricsReport, PerClassMetrics
from utils import save_json

logger = logging.getLogger(__name__)


def confusion(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int = N_STAGES) -> ConfusionMatrix:
    """Count expert (row) by predicted (column) stages.

    Raises:
        ShapeError: If the inputs differ in length
        ValidationError: If a label lies outside [0, n_classes)
    """
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise ShapeError("confusion", [y_true.shape, y_pred.shape], "one prediction per expert label")
    for name, values in (("y_true", y_true), ("y_pred", y_pred)):
        if values.size and (values.min() < 0 or values.max() >= n_classes):
            raise ValidationError(name, sorted(set(values.tolist())), f"labels must lie in [0, {n_classes})")
    if y_true.size == 0:
        return ConfusionMatrix(np.zeros((n_classes, n_classes), dtype=np.int64))
    counts = confusion_matrix(y_true, y_pred, labels=list(range(n_classes)))
    return ConfusionMatrix(counts.astype(np.int64))


def _counts(cm: Union[ConfusionMatrix, np.ndarray], metric: str) -> np.ndarray:
    counts = np.asarray(cm.counts if isinstance(cm, ConfusionMatrix) else cm, dtype=np.float64)
    if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
        raise ShapeError(metric, [counts.shape], "confusion matrix must be square")
    if counts.sum() <= 0:
        raise MetricsError(metric, "confusion matrix is empty")
    return counts


def accuracy(cm: Union[ConfusionMatrix, np.ndarray]) -> float:
    """Sum of the diagonal over the sum of all counts.

    Raises:
        MetricsError: If the matrix is empty
    """
    counts = _counts(cm, "accuracy")
    return float(np.trace(counts) / counts.sum())


def per_class_and_mf1(
    cm: Union[ConfusionMatrix, np.ndarray],
    stage_names: Sequence[str] = STAGE_NAMES
) -> Tuple[List[PerClassMetrics], float]:
    """Per-class precision, recall and F1, plus their macro F1.

    A zero denominator yields 0 and marks the class as degenerate.

    Returns:
        (per-class metrics in stage order, macro F1)
    """
    counts = _counts(cm, "per_class")
    tp = np.diag(counts)
    predicted = counts.sum(axis=0)
    expert = counts.sum(axis=1)

    per_class = []
    for c in range(counts.shape[0]):
        degenerate = predicted[c] == 0 or expert[c] == 0
        precision = tp[c] / predicted[c] if predicted[c] else 0.0
        recall = tp[c] / expert[c] if expert[c] else 0.0
        if precision + recall > 0:
            f1 = 2.0 * precision * recall / (precision + recall)
        else:
            f1 = 0.0
            degenerate = True
        name = stage_names[c] if c < len(stage_names) else str(c)
        if degenerate:
            logger.warning(f"Degenerate metrics for stage {name}: a zero count forced a value of 0")
        per_class.append(PerClassMetrics(name, float(precision), float(recall), float(f1), bool(degenerate)))

    macro_f1 = float(np.mean([m.f1 for m in per_class]))
    return per_class, macro_f1


def kappa(cm: Union[ConfusionMatrix, np.ndarray]) -> float:
    """Cohen's kappa (p_o - p_e) / (1 - p_e).

    Raises:
        MetricsError: If p_e is 1 (both raters constant), where kappa is undefined
    """
    counts = _counts(cm, "kappa")
    n = counts.sum()
    p_o = np.trace(counts) / n
    p_e = float(np.sum(counts.sum(axis=1) * counts.sum(axis=0)) / (n * n))
    if np.isclose(p_e, 1.0, rtol=0.0, atol=1e-15):
        raise MetricsError("kappa", "undefined when chance agreement is 1")
    return float((p_o - p_e) / (1.0 - p_e))


def metrics_report(cm: Union[ConfusionMatrix, np.ndarray]) -> MetricsReport:
    """Every metric of a confusion matrix; kappa is None when undefined."""
    per_class, macro_f1 = per_class_and_mf1(cm)
    try:
        k: Optional[float] = kappa(cm)
    except MetricsError as e:
        logger.warning(f"{e}")
        k = None
    counts = _counts(cm, "metrics_report")
    return MetricsReport(
        accuracy=accuracy(cm),
        macro_f1=macro_f1,
        kappa=k,
        per_class=per_class,
        n_epochs=int(counts.sum()),
    )


# ============================================================================
# Tables
# ============================================================================

def confusion_to_dataframe(cm: ConfusionMatrix) -> pd.DataFrame:
    """Counts with expert stages as rows and predicted stages as columns."""
    names = list(STAGE_NAMES[:cm.n_classes])
    frame = pd.DataFrame(cm.counts, index=names, columns=names)
    frame.index.name = "expert"
    return frame


def report_to_dataframe(report: MetricsReport, cm: ConfusionMatrix) -> pd.DataFrame:
    """Confusion counts followed by per-class PR, RE and F1 in percent."""
    frame = confusion_to_dataframe(cm)
    frame[METRIC_COLUMNS[0]] = [round(100 * m.precision, 1) for m in report.per_class]
    frame[METRIC_COLUMNS[1]] = [round(100 * m.recall, 1) for m in report.per_class]
    frame[METRIC_COLUMNS[2]] = [round(100 * m.f1, 1) for m in report.per_class]
    return frame


def format_report(report: MetricsReport, cm: ConfusionMatrix) -> str:
    """Human-readable table plus the headline metrics."""
    kappa_text = "undefined" if report.kappa is None else f"{report.kappa:.2f}"
    lines = [
        report_to_dataframe(report, cm).to_string(),
        "",
        f"Epochs: {report.n_epochs}  ACC: {100 * report.accuracy:.1f}  "
        f"MF1: {100 * report.macro_f1:.1f}  kappa: {kappa_text}",
    ]
    if report.degenerate_classes:
        lines.append(f"Degenerate classes: {', '.join(report.degenerate_classes)}")
    return "\n".join(lines)


def save_report(report: MetricsReport, cm: ConfusionMatrix, directory: Union[str, Path]) -> Tuple[Path, Path]:
    """Write the structured report and the delimited confusion matrix.

    Returns:
        (metrics JSON path, confusion CSV path)
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    metrics_path = directory / METRICS_FILE
    confusion_path = directory / CONFUSION_FILE
    document = report.to_dict()
    document["confusion"] = cm.to_dict()
    save_json(document, metrics_path)
    report_to_dataframe(report, cm).to_csv(confusion_path)
    logger.info(f"Saved metrics to {metrics_path} and {confusion_path}")
    return metrics_path, confusion_path
