"""Data models and dataclasses for the sleep stager.

This module contains the data transfer objects shared between the EDF
pipeline, training, evaluation and the command-line surface.
"""

from dataclasses import dataclass, field
from datetime import datetime
from enum import IntEnum
from typing import Any, Dict, List, Optional

import numpy as np

from constants import (
    EDF_ANNOTATION_LABEL, EDF_VERSION, EPOCH_SECONDS, PREDICTION_COLUMNS, STAGE_CHARS,
    STAGE_NAMES
)


class Stage(IntEnum):
    """Sleep stage; the integer value is the class index."""

    W = 0
    N1 = 1
    N2 = 2
    N3 = 3
    REM = 4

    @property
    def label(self) -> str:
        return STAGE_NAMES[self.value]

    @property
    def char(self) -> str:
        return STAGE_CHARS[self.value]

    @classmethod
    def from_label(cls, label: str) -> "Stage":
        """Look up a stage by its canonical name (W, N1, N2, N3, REM).

        Raises:
            KeyError: If the name is not a canonical stage name
        """
        return cls[label]


# ============================================================================
# EDF
# ============================================================================

@dataclass
class EdfSignalHeader:
    """Per-signal part of an EDF header.

    Attributes:
        label: Signal label, e.g. "EEG Fpz-Cz" or "EDF Annotations"
        transducer: Transducer type
        physical_dimension: Unit of the physical values, e.g. "uV"
        physical_min: Physical value of digital_min
        physical_max: Physical value of digital_max
        digital_min: Smallest digital sample value
        digital_max: Largest digital sample value
        prefiltering: Free-text prefiltering description
        samples_per_record: Number of samples in each data record
        reserved: Reserved text field
    """

    label: str
    transducer: str = ""
    physical_dimension: str = ""
    physical_min: float = -1.0
    physical_max: float = 1.0
    digital_min: int = -32768
    digital_max: int = 32767
    prefiltering: str = ""
    samples_per_record: int = 1
    reserved: str = ""

    @property
    def is_annotation(self) -> bool:
        return self.label == EDF_ANNOTATION_LABEL


@dataclass
class EdfHeader:
    """Fixed part of an EDF header plus its signal headers.

    Attributes:
        version: Format version text ("0")
        patient: Local patient identification
        recording: Local recording identification
        start_date: Start date text as stored (dd.mm.yy)
        start_time: Start time text as stored (hh.mm.ss)
        header_bytes: Size of the header in bytes
        reserved: Reserved field; "EDF+C"/"EDF+D" marks EDF+
        n_records: Number of data records (-1 when unknown)
        record_duration: Duration of a data record in seconds
        signals: Per-signal headers in file order
    """

    version: str = EDF_VERSION
    patient: str = ""
    recording: str = ""
    start_date: str = "01.01.00"
    start_time: str = "00.00.00"
    header_bytes: int = 256
    reserved: str = ""
    n_records: int = 0
    record_duration: float = 1.0
    signals: List[EdfSignalHeader] = field(default_factory=list)

    @property
    def n_signals(self) -> int:
        return len(self.signals)

    @property
    def is_edfplus(self) -> bool:
        return self.reserved.startswith("EDF+")

    @property
    def start_datetime(self) -> Optional[datetime]:
        """Recording start as a datetime, or None if the fields are invalid."""
        from date_helpers import parse_edf_datetime
        return parse_edf_datetime(self.start_date, self.start_time)

    def signal_labels(self) -> List[str]:
        return [s.label for s in self.signals]

    def sampling_rate(self, index: int) -> float:
        """Sampling rate of one signal in Hz."""
        return self.signals[index].samples_per_record / self.record_duration


@dataclass
class Annotation:
    """One EDF+ annotation or sidecar hypnogram entry.

    Attributes:
        onset: Onset in seconds from recording start
        duration: Duration in seconds, None when not given
        label: Annotation text
    """

    onset: float
    duration: Optional[float]
    label: str


# ============================================================================
# Epochs and recordings
# ============================================================================

@dataclass
class EpochRecord:
    """One 30-s single-channel EEG epoch.

    Attributes:
        subject_id: Subject the epoch belongs to
        epoch_index: Position of the epoch on the recording's 30-s grid
        samples: fs x 30 physical samples
        label: Stage, or None for unlabelled input
    """

    subject_id: str
    epoch_index: int
    samples: np.ndarray
    label: Optional[Stage] = None


@dataclass
class SubjectRecording:
    """Ordered epochs of one night of one subject.

    A recording is the unit of LSTM state lifetime; several nights of
    one subject share ``subject_id`` and always land in the same fold.

    Attributes:
        subject_id: Subject identifier used for fold assignment
        recording_id: Identifier of this night
        fs: Sampling rate in Hz
        epochs: Epochs in time order
        start_time: Recording start from the EDF header, if valid
    """

    subject_id: str
    recording_id: str
    fs: int
    epochs: List[EpochRecord] = field(default_factory=list)
    start_time: Optional[datetime] = None

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def samples(self) -> np.ndarray:
        """Epoch samples stacked into [n_epochs, fs x 30]."""
        if not self.epochs:
            return np.zeros((0, self.fs * EPOCH_SECONDS))
        return np.stack([e.samples for e in self.epochs])

    @property
    def labels(self) -> np.ndarray:
        """Stage indices; -1 marks unlabelled epochs."""
        return np.array(
            [-1 if e.label is None else int(e.label) for e in self.epochs],
            dtype=np.int64
        )

    @property
    def epoch_indices(self) -> np.ndarray:
        return np.array([e.epoch_index for e in self.epochs], dtype=np.int64)

    def subset(self, start: int, stop: int) -> "SubjectRecording":
        """Copy of the recording restricted to epochs[start:stop]."""
        return SubjectRecording(
            subject_id=self.subject_id,
            recording_id=self.recording_id,
            fs=self.fs,
            epochs=list(self.epochs[start:stop]),
            start_time=self.start_time,
        )


@dataclass
class SequenceBatch:
    """One fine-tuning step: equal-length windows from parallel lanes.

    Attributes:
        subject_id: Subject the lanes were cut from
        recording_id: Recording the lanes were cut from
        step: Step number within the recording
        lane_ids: Lane of each row (selects the carried LSTM state)
        epochs: Samples [lanes, window, fs x 30]
        labels: Stage indices [lanes, window]
        epoch_indices: Positions within the recording [lanes, window]
    """

    subject_id: str
    recording_id: str
    step: int
    lane_ids: np.ndarray
    epochs: np.ndarray
    labels: np.ndarray
    epoch_indices: np.ndarray

    @property
    def n_lanes(self) -> int:
        return int(self.lane_ids.shape[0])

    @property
    def window(self) -> int:
        return int(self.labels.shape[1])


@dataclass
class Fold:
    """Subject-level train/test partition.

    Attributes:
        index: Fold number, starting at 0
        train_subjects: Subjects used for training
        test_subjects: Subjects held out for testing
    """

    index: int
    train_subjects: List[str]
    test_subjects: List[str]


# ============================================================================
# Training and prediction
# ============================================================================

@dataclass
class EpochPrediction:
    """Predicted stage and class probabilities for one epoch."""

    epoch_index: int
    stage: Stage
    probabilities: np.ndarray

    def to_line(self) -> str:
        """Render as ``epoch_index,stage,probW..probREM``."""
        probs = ",".join(f"{p:.6f}" for p in self.probabilities)
        return f"{self.epoch_index},{self.stage.label},{probs}"


def predictions_header() -> str:
    return ",".join(PREDICTION_COLUMNS)


@dataclass(frozen=True)
class StepRecord:
    """Immutable snapshot of one optimizer step.

    Attributes:
        phase: "pretrain" or "finetune"
        pass_index: Training pass, starting at 0
        step: Step number within the pass
        loss: Loss value including the weight-decay term
        grad_norm: Global gradient norm before clipping
        lr_cnn: Learning rate of the CNN group
        lr_sequence: Learning rate of the sequence group
    """

    phase: str
    pass_index: int
    step: int
    loss: float
    grad_norm: float
    lr_cnn: float
    lr_sequence: float

    def to_log_line(self) -> str:
        return (
            f"{self.phase},{self.pass_index},{self.step},{self.loss:.8g},"
            f"{self.grad_norm:.8g},{self.lr_cnn:g},{self.lr_sequence:g}"
        )


# ============================================================================
# Evaluation
# ============================================================================

@dataclass
class ConfusionMatrix:
    """Expert stage (rows) by predicted stage (columns) counts."""

    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def n_classes(self) -> int:
        return int(self.counts.shape[0])

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def to_dict(self) -> Dict[str, Any]:
        return {"labels": list(STAGE_NAMES), "counts": self.counts.tolist()}


@dataclass
class PerClassMetrics:
    """Precision, recall and F1 for one stage, as fractions.

    Attributes:
        stage: Stage name
        precision: TP / predicted count
        recall: TP / expert count
        f1: Harmonic mean of precision and recall
        degenerate: True when a zero denominator forced a value of 0
    """

    stage: str
    precision: float
    recall: float
    f1: float
    degenerate: bool = False


@dataclass
class MetricsReport:
    """Headline and per-class metrics for one confusion matrix.

    Attributes:
        accuracy: Overall accuracy in [0, 1]
        macro_f1: Mean of the per-class F1 scores
        kappa: Cohen's kappa, None when undefined
        per_class: One entry per stage, in stage order
        n_epochs: Number of scored epochs
    """

    accuracy: float
    macro_f1: float
    kappa: Optional[float]
    per_class: List[PerClassMetrics] = field(default_factory=list)
    n_epochs: int = 0

    @property
    def degenerate_classes(self) -> List[str]:
        return [m.stage for m in self.per_class if m.degenerate]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "kappa": self.kappa,
            "n_epochs": self.n_epochs,
            "per_class": [
                {
                    "stage": m.stage,
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                    "degenerate": m.degenerate,
                }
                for m in self.per_class
            ],
        }


@dataclass
class FilterActivationMap:
    """Stage x filter mean first-layer activations rescaled per row.

    Attributes:
        branch: "small" or "large"
        values: [n_stages, n_filters] array, each row in [0, 1]
        stage_counts: Number of epochs predicted as each stage
        flagged_stages: Stages whose row was set to zeros (no epochs or
            a constant row)
    """

    branch: str
    values: np.ndarray
    stage_counts: List[int] = field(default_factory=list)
    flagged_stages: List[str] = field(default_factory=list)


@dataclass
class CellTrace:
    """tanh of selected forward-LSTM memory cells, one row per epoch.

    Attributes:
        recording_id: Recording that was traced
        layer: Forward LSTM layer index
        cells: Traced cell indices
        values: [n_epochs, n_cells] array in (-1, 1)
        stages: Predicted stage per epoch
    """

    recording_id: str
    layer: int
    cells: List[int]
    values: np.ndarray
    stages: List[Stage] = field(default_factory=list)


@dataclass
class FoldResult:
    """Outcome of one cross-validation fold.

    Attributes:
        fold: The train/test partition
        y_true: Expert stages of every test epoch
        y_pred: Predicted stages of every test epoch
        confusion: Confusion matrix of this fold
        report: Metrics of this fold (diagnostic only)
        cnn_only_pred: Predictions of the pretrained CNN with its
            temporary head, when requested
    """

    fold: Fold
    y_true: np.ndarray
    y_pred: np.ndarray
    confusion: ConfusionMatrix
    report: MetricsReport
    cnn_only_pred: Optional[np.ndarray] = None


@dataclass
class CrossValidationResult:
    """Pooled outcome of a k-fold run.

    Attributes:
        folds: Per-fold results in fold order
        confusion: Confusion matrix of all pooled test predictions
        report: Headline metrics computed on the pooled predictions
        cnn_only_report: Pooled metrics of the CNN-only baseline
    """

    folds: List[FoldResult]
    confusion: ConfusionMatrix
    report: MetricsReport
    cnn_only_report: Optional[MetricsReport] = None

    @property
    def n_predictions(self) -> int:
        return int(sum(len(f.y_pred) for f in self.folds))


@dataclass
class PrepareSummary:
    """Result of the prepare command.

    Attributes:
        recordings: Number of recordings written to the cache
        failed_files: File name to failure reason for skipped inputs
        stage_counts: Table-shaped per-stage epoch counts plus "Total"
        up_to_date: True when the cache already matched the inputs
    """

    recordings: int
    failed_files: Dict[str, str] = field(default_factory=dict)
    stage_counts: Dict[str, int] = field(default_factory=dict)
    up_to_date: bool = False


@dataclass
class RecordingSource:
    """Input files of one recording found on disk.

    Attributes:
        subject_id: Subject identifier used for fold assignment
        recording_id: Identifier of the night
        psg_path: EDF file holding the EEG signal
        hypnogram_path: EDF+ hypnogram or sidecar file; None when the PSG
            carries its own annotations
    """

    subject_id: str
    recording_id: str
    psg_path: str
    hypnogram_path: Optional[str] = None
