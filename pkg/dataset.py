"""Recording ingestion and the epoch data pipeline.

Turns PSG/hypnogram file pairs into labelled 30-s epochs (label mapping,
movement/unknown exclusion, wake trimming), and arranges prepared
epochs for the two training phases: class-balanced oversampling for
pre-training, parallel sequential lanes for fine-tuning.
"""

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.model_selection import KFold

from archive_helpers import read_archive, write_archive
from config import RunConfig
from constants import (
    AASM_LABELS, CACHE_MAGIC, CACHE_VERSION, EPOCH_SECONDS, EXCLUDED_LABELS,
    FINETUNE_LANES, LABEL_PREFIX, MIN_SAMPLING_RATE, N_STAGES, RK_LABELS, SCORING_STANDARDS,
    SEQ_LENGTH, SIDECAR_HYPNOGRAM_SUFFIX, STAGE_NAMES, WAKE_MARGIN_EPOCHS
)
from edf_helpers import (
    annotation_records, load_channel, parse_edfplus_annotations, read_edf
)
from exceptions import (
    ConfigurationError, DataPreparationError, FileOperationError,
    LabelMappingError, SleepStagerError, ValidationError
)
from models import (
    Annotation, EpochRecord, Fold, RecordingSource, SequenceBatch, Stage,
    SubjectRecording
)
from utils import combined_digest, file_digest

logger = logging.getLogger(__name__)

_LABEL_TABLES = {"RK": RK_LABELS, "AASM": AASM_LABELS}


# ============================================================================
# Labels
# ============================================================================

def map_labels(label: str, standard: str = "RK") -> Optional[Stage]:
    """Map raw hypnogram text to a stage.

    "Sleep stage " prefixes are dropped; R&K stage 4 merges into N3;
    canonical stage names are accepted under either manual.

    Args:
        label: Raw label, e.g. "Sleep stage 4" or "N2"
        standard: "AASM" or "RK"

    Returns:
        Stage, or None for excluded labels (movement, unknown)

    Raises:
        ConfigurationError: If the standard is unknown
        LabelMappingError: If the label is not in the vocabulary
    """
    if standard not in _LABEL_TABLES:
        raise ConfigurationError(
            "scoring_standard", f"'{standard}' is not one of {', '.join(SCORING_STANDARDS)}"
        )
    text = label.strip()
    if text.lower().startswith(LABEL_PREFIX.lower()):
        text = text[len(LABEL_PREFIX):].strip()
    key = text.upper()

    if key in EXCLUDED_LABELS:
        return None
    table = _LABEL_TABLES[standard]
    if key in table:
        return Stage.from_label(table[key])
    if key in STAGE_NAMES:
        return Stage.from_label(key)
    raise LabelMappingError(label, standard)


def trim_wake(recording: SubjectRecording, margin: int = WAKE_MARGIN_EPOCHS) -> SubjectRecording:
    """Keep at most ``margin`` wake epochs before and after the sleep period.

    Interior wake is untouched.

    Raises:
        DataPreparationError: If the recording contains no sleep epoch
    """
    labels = recording.labels
    sleep = np.flatnonzero((labels >= 0) & (labels != Stage.W))
    if sleep.size == 0:
        raise DataPreparationError(recording.subject_id, f"recording {recording.recording_id} has no sleep period")
    start = max(0, int(sleep[0]) - margin)
    stop = min(len(recording), int(sleep[-1]) + margin + 1)
    if start or stop < len(recording):
        logger.debug(
            f"{recording.recording_id}: trimmed {start} leading and "
            f"{len(recording) - stop} trailing wake epochs"
        )
    return recording.subset(start, stop)


# ============================================================================
# Epoching
# ============================================================================

def _epoch_count(seconds: float, what: str, subject_id: str) -> int:
    count = seconds / EPOCH_SECONDS
    if not np.isclose(count, round(count)):
        raise DataPreparationError(subject_id, f"{what} {seconds:g} s is not a multiple of {EPOCH_SECONDS} s")
    return int(round(count))


def label_timeline(
    annotations: Sequence[Annotation],
    standard: str = "RK",
    subject_id: str = ""
) -> List[Tuple[int, Stage]]:
    """(epoch index, stage) for every scored epoch, excluded epochs dropped.

    Annotations without a duration cover one epoch.
    """
    timeline: Dict[int, Stage] = {}
    for annotation in sorted(annotations, key=lambda a: a.onset):
        stage = map_labels(annotation.label, standard)
        if stage is None:
            continue
        duration = EPOCH_SECONDS if annotation.duration is None else annotation.duration
        first = _epoch_count(annotation.onset, "onset", subject_id)
        count = _epoch_count(duration, "duration", subject_id)
        for index in range(first, first + count):
            timeline[index] = stage
    return sorted(timeline.items())


def extract_epochs(
    signal: np.ndarray,
    fs: int,
    annotations: Sequence[Annotation],
    subject_id: str = "",
    recording_id: Optional[str] = None,
    standard: str = "RK",
    wake_margin: Optional[int] = None
) -> SubjectRecording:
    """Cut a signal into labelled 30-s epochs.

    Args:
        signal: Physical samples of one channel
        fs: Sampling rate in Hz
        annotations: Stage annotations
        subject_id: Subject identifier
        recording_id: Night identifier (defaults to subject_id)
        standard: Scoring manual of the labels
        wake_margin: Trim wake to this many epochs around sleep (None keeps all)

    Returns:
        SubjectRecording with one EpochRecord per retained epoch

    Raises:
        DataPreparationError: If the signal is shorter than a retained epoch
            or an annotation is off the 30-s grid
    """
    recording_id = recording_id or subject_id
    timeline = label_timeline(annotations, standard, subject_id)
    epoch_samples = fs * EPOCH_SECONDS
    recording = SubjectRecording(
        subject_id=subject_id,
        recording_id=recording_id,
        fs=fs,
        epochs=[EpochRecord(subject_id, index, np.empty(0), stage) for index, stage in timeline],
    )
    if wake_margin is not None:
        recording = trim_wake(recording, wake_margin)

    signal = np.asarray(signal, dtype=np.float64)
    for epoch in recording.epochs:
        stop = (epoch.epoch_index + 1) * epoch_samples
        if stop > signal.shape[0]:
            raise DataPreparationError(
                subject_id,
                f"signal shorter than annotated span: epoch {epoch.epoch_index} ends at "
                f"sample {stop}, signal has {signal.shape[0]}"
            )
        epoch.samples = signal[stop - epoch_samples:stop].copy()
    return recording


def segment_signal(signal: np.ndarray, fs: int, subject_id: str = "", recording_id: Optional[str] = None) -> SubjectRecording:
    """Unlabelled epochs covering a whole signal; a partial last epoch is dropped."""
    epoch_samples = fs * EPOCH_SECONDS
    n_epochs = len(signal) // epoch_samples
    if len(signal) % epoch_samples:
        logger.info(f"Dropping {len(signal) % epoch_samples} samples after the last full epoch")
    blocks = np.asarray(signal[:n_epochs * epoch_samples], dtype=np.float64).reshape(n_epochs, epoch_samples)
    return SubjectRecording(
        subject_id=subject_id,
        recording_id=recording_id or subject_id,
        fs=fs,
        epochs=[EpochRecord(subject_id, i, block.copy(), None) for i, block in enumerate(blocks)],
    )


def parse_sidecar_hypnogram(text: str) -> List[Annotation]:
    """Parse ``epoch_index,stage`` lines into one-epoch annotations.

    A header line and blank lines are skipped.

    Raises:
        ValidationError: On a malformed line, naming its line number
    """
    annotations = []
    for line_number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        index_text, sep, label = line.partition(",")
        if not sep:
            raise ValidationError("hypnogram line", line_number, f"expected 'epoch_index,stage', got {line!r}")
        try:
            index = int(index_text)
        except ValueError:
            if not annotations and line_number == 1:
                continue
            raise ValidationError("hypnogram line", line_number, f"non-integer epoch index {index_text!r}") from None
        annotations.append(Annotation(float(index * EPOCH_SECONDS), float(EPOCH_SECONDS), label.strip()))
    return annotations


# ============================================================================
# Discovery and loading
# ============================================================================

def _subject_id(name: str, pattern: re.Pattern, fallback: str) -> str:
    match = pattern.search(name)
    if match is None:
        return fallback
    return match.group(1) if match.groups() else match.group(0)


def discover_recordings(
    data_dir: Union[str, Path],
    psg_glob: str = "*-PSG.edf",
    hypnogram_glob: str = "*-Hypnogram.edf",
    pair_prefix_length: int = 6,
    subject_pattern: str = r"^SC4(\d{2})"
) -> Tuple[List[RecordingSource], Dict[str, str]]:
    """Pair PSG files with their hypnograms.

    A PSG pairs with the hypnogram EDF sharing its first
    ``pair_prefix_length`` characters, else with a ``<stem>.hyp.csv``
    sidecar, else with its own EDF+ annotations (resolved at load time).

    Returns:
        (sources sorted by file name, unpaired PSG name -> reason)

    Raises:
        FileOperationError: If the data directory does not exist
    """
    root = Path(data_dir)
    if not root.is_dir():
        raise FileOperationError("scan", str(root), "data directory not found")
    pattern = re.compile(subject_pattern)
    hypnograms = sorted(root.glob(hypnogram_glob))

    sources, unpaired = [], {}
    for psg in sorted(root.glob(psg_glob)):
        prefix = psg.name[:pair_prefix_length]
        matches = [h for h in hypnograms if h.name[:pair_prefix_length] == prefix]
        sidecar = psg.with_name(psg.stem + SIDECAR_HYPNOGRAM_SUFFIX)
        if len(matches) > 1:
            unpaired[psg.name] = f"ambiguous hypnograms: {', '.join(m.name for m in matches)}"
            continue
        hypnogram = matches[0] if matches else (sidecar if sidecar.exists() else None)
        sources.append(RecordingSource(
            subject_id=_subject_id(psg.name, pattern, prefix),
            recording_id=prefix,
            psg_path=str(psg),
            hypnogram_path=None if hypnogram is None else str(hypnogram),
        ))
    logger.info(f"Found {len(sources)} recordings in {root}")
    return sources, unpaired


def read_annotations(source: RecordingSource) -> List[Annotation]:
    """Stage annotations of a recording from its hypnogram or its own EDF+ signal."""
    path = source.hypnogram_path or source.psg_path
    if path.endswith(SIDECAR_HYPNOGRAM_SUFFIX):
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise FileOperationError("read", path, str(e)) from e
        return parse_sidecar_hypnogram(text)
    header, digital = read_edf(path)
    return parse_edfplus_annotations(annotation_records(header, digital))


def load_recording(source: RecordingSource, config: RunConfig) -> SubjectRecording:
    """Read, label, trim and epoch one recording.

    Raises:
        DataPreparationError: If the sampling rate disagrees with the config
        SleepStagerError: On any parse or preparation failure
    """
    header, digital = read_edf(source.psg_path)
    signal, fs = load_channel(header, digital, config.channel, config.montage)
    if config.fs is not None and fs != config.fs:
        raise DataPreparationError(source.subject_id, f"{Path(source.psg_path).name} is sampled at {fs} Hz, expected {config.fs} Hz")
    if fs < MIN_SAMPLING_RATE:
        raise DataPreparationError(source.subject_id, f"sampling rate {fs} Hz is below {MIN_SAMPLING_RATE} Hz")
    recording = extract_epochs(
        signal, fs, read_annotations(source),
        subject_id=source.subject_id,
        recording_id=source.recording_id,
        standard=config.scoring_standard,
        wake_margin=WAKE_MARGIN_EPOCHS,
    )
    recording.start_time = header.start_datetime
    logger.debug(f"{source.recording_id}: {len(recording)} epochs at {fs} Hz")
    return recording


def load_recordings(
    sources: Sequence[RecordingSource],
    config: RunConfig
) -> Tuple[List[SubjectRecording], Dict[str, str]]:
    """Load recordings in parallel, keeping input order.

    Failures are collected per file; with ``config.strict`` the first one
    is raised.

    Returns:
        (recordings, failed file name -> reason)
    """
    def attempt(source: RecordingSource) -> Union[SubjectRecording, SleepStagerError]:
        try:
            return load_recording(source, config)
        except SleepStagerError as e:
            return e

    with ThreadPoolExecutor(max_workers=config.jobs) as pool:
        outcomes = list(pool.map(attempt, sources))

    recordings, failed = [], {}
    for source, outcome in zip(sources, outcomes):
        if isinstance(outcome, SleepStagerError):
            if config.strict:
                raise outcome
            name = Path(source.psg_path).name
            logger.warning(f"Skipping {name}: {outcome}")
            failed[name] = str(outcome)
        else:
            recordings.append(outcome)
    fs_values = {r.fs for r in recordings}
    if len(fs_values) > 1:
        raise DataPreparationError("dataset", f"recordings use different sampling rates {sorted(fs_values)}")
    return recordings, failed


def input_digest(sources: Sequence[RecordingSource], config: RunConfig) -> str:
    """Digest of every input file plus the settings that shape the cache."""
    settings = json.dumps(
        {
            "channel": config.channel,
            "montage": config.montage,
            "fs": config.fs,
            "standard": config.scoring_standard,
            "wake_margin": WAKE_MARGIN_EPOCHS,
        },
        sort_keys=True,
    )
    parts = [settings]
    for source in sources:
        parts.append(f"{source.subject_id}/{source.recording_id}")
        parts.append(file_digest(source.psg_path))
        if source.hypnogram_path:
            parts.append(file_digest(source.hypnogram_path))
    return combined_digest(parts)


# ============================================================================
# Counting
# ============================================================================

def stage_counts(recordings: Sequence[SubjectRecording]) -> Dict[str, int]:
    """Per-stage epoch counts plus "Total"."""
    labels = np.concatenate([r.labels for r in recordings]) if recordings else np.zeros(0, dtype=np.int64)
    counts = np.bincount(labels[labels >= 0], minlength=N_STAGES)
    result = {name: int(counts[i]) for i, name in enumerate(STAGE_NAMES)}
    result["Total"] = int(counts.sum())
    return result


def manifest_table(recordings: Sequence[SubjectRecording]) -> pd.DataFrame:
    """Per-recording stage counts with a closing "Total" row."""
    rows = []
    for recording in recordings:
        row = {"subject_id": recording.subject_id, "recording_id": recording.recording_id}
        row.update(stage_counts([recording]))
        rows.append(row)
    total = {"subject_id": "Total", "recording_id": ""}
    total.update(stage_counts(recordings))
    rows.append(total)
    return pd.DataFrame(rows, columns=["subject_id", "recording_id", *STAGE_NAMES, "Total"])


def stack_epochs(recordings: Sequence[SubjectRecording]) -> Tuple[np.ndarray, np.ndarray]:
    """Labelled epochs of all recordings as (x [N, L], y [N])."""
    xs, ys = [], []
    for recording in recordings:
        labels = recording.labels
        keep = labels >= 0
        if keep.any():
            xs.append(recording.samples[keep])
            ys.append(labels[keep])
    if not xs:
        raise DataPreparationError("dataset", "no labelled epochs")
    return np.concatenate(xs), np.concatenate(ys)


# ============================================================================
# Oversampling
# ============================================================================

def oversample_indices(labels: np.ndarray, rng: np.random.Generator, n_classes: int = N_STAGES) -> np.ndarray:
    """Indices of a class-balanced resampling of ``labels``.

    Every class reaches the majority count by whole copies of all its
    members plus a uniformly drawn remainder; the result is shuffled.

    Raises:
        DataPreparationError: If a class has no members
    """
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=n_classes)
    missing = [STAGE_NAMES[c] if c < len(STAGE_NAMES) else str(c) for c in range(n_classes) if counts[c] == 0]
    if missing:
        raise DataPreparationError("training set", f"no epochs of stage {', '.join(missing)}")
    target = int(counts.max())

    chosen = []
    for c in range(n_classes):
        members = np.flatnonzero(labels == c)
        copies, remainder = divmod(target, members.size)
        chosen.append(np.tile(members, copies))
        if remainder:
            chosen.append(rng.choice(members, size=remainder, replace=True))
    indices = np.concatenate(chosen)
    return indices[rng.permutation(indices.size)]


def oversample(x: np.ndarray, y: np.ndarray, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Class-balanced copy of a training set, fixed by ``seed``."""
    indices = oversample_indices(y, np.random.default_rng(seed))
    logger.info(f"Oversampled {len(y)} epochs to {len(indices)} ({len(indices) // N_STAGES} per stage)")
    return x[indices], y[indices]


# ============================================================================
# Sequential arrangement
# ============================================================================

def _lane_windows(lane_length: int, seq_len: int) -> List[Tuple[int, int]]:
    """Consecutive [start, stop) windows of at most ``seq_len`` epochs over a lane.

    A 1-epoch tail is merged into the previous window, which then holds
    seq_len + 1 epochs, so no step runs train-mode batch normalization
    over a batch of one.
    """
    windows = [(s, min(s + seq_len, lane_length)) for s in range(0, lane_length, seq_len)]
    if len(windows) > 1 and windows[-1][1] - windows[-1][0] == 1:
        windows[-2] = (windows[-2][0], windows[-1][1])
        windows.pop()
    return windows


def lane_bounds(n_epochs: int, n_lanes: int) -> List[Tuple[int, int]]:
    """Contiguous equal lanes; the last lane also takes the remainder."""
    length = n_epochs // n_lanes
    bounds = [(i * length, (i + 1) * length) for i in range(n_lanes)]
    bounds[-1] = (bounds[-1][0], n_epochs)
    return bounds


def arrange_subject_sequences(
    recording: SubjectRecording,
    n_lanes: int = FINETUNE_LANES,
    seq_len: int = SEQ_LENGTH
) -> List[SequenceBatch]:
    """Fine-tuning steps of one recording.

    The recording is split into ``n_lanes`` contiguous lanes; step s takes
    the s-th window of ``seq_len`` epochs from every lane that still has
    one. Lanes whose windows differ in length go into separate batches of
    the same step.

    Raises:
        DataPreparationError: If the recording has fewer epochs than lanes
    """
    n_epochs = len(recording)
    if n_epochs < n_lanes:
        raise DataPreparationError(
            recording.subject_id,
            f"recording {recording.recording_id} has {n_epochs} epochs, fewer than {n_lanes} lanes"
        )
    samples, labels, indices = recording.samples, recording.labels, recording.epoch_indices
    lanes = [
        [(start + a, start + b) for a, b in _lane_windows(stop - start, seq_len)]
        for start, stop in lane_bounds(n_epochs, n_lanes)
    ]

    batches = []
    for step in range(max(len(w) for w in lanes)):
        by_length: Dict[int, List[int]] = {}
        for lane, windows in enumerate(lanes):
            if step < len(windows):
                a, b = windows[step]
                by_length.setdefault(b - a, []).append(lane)
        for length in sorted(by_length, reverse=True):
            lane_ids = np.array(by_length[length], dtype=np.int64)
            rows = [np.arange(*lanes[lane][step]) for lane in lane_ids]
            batches.append(SequenceBatch(
                subject_id=recording.subject_id,
                recording_id=recording.recording_id,
                step=step,
                lane_ids=lane_ids,
                epochs=np.stack([samples[r] for r in rows]),
                labels=np.stack([labels[r] for r in rows]),
                epoch_indices=np.stack([indices[r] for r in rows]),
            ))
    return batches


def arrange_sequences(
    recordings: Sequence[SubjectRecording],
    n_lanes: int = FINETUNE_LANES,
    seq_len: int = SEQ_LENGTH
) -> Iterator[SequenceBatch]:
    """Fine-tuning steps of every recording in turn; lanes never cross recordings."""
    for recording in recordings:
        yield from arrange_subject_sequences(recording, n_lanes, seq_len)


# ============================================================================
# Folds
# ============================================================================

def split_folds(subject_ids: Sequence[str], k: int, seed: Optional[int] = None) -> List[Fold]:
    """Subject-level k-fold partitions.

    Subjects are sorted; with a seed they are shuffled first.

    Raises:
        ValidationError: If k is below 2 or above the subject count
    """
    subjects = np.array(sorted(set(subject_ids)))
    if k < 2 or k > subjects.size:
        raise ValidationError("k", k, f"need 2 <= k <= {subjects.size} subjects")
    splitter = KFold(n_splits=k, shuffle=seed is not None, random_state=seed)
    return [
        Fold(index=i, train_subjects=subjects[train].tolist(), test_subjects=subjects[test].tolist())
        for i, (train, test) in enumerate(splitter.split(subjects))
    ]


def select_subjects(recordings: Sequence[SubjectRecording], subjects: Sequence[str]) -> List[SubjectRecording]:
    wanted = set(subjects)
    return [r for r in recordings if r.subject_id in wanted]


# ============================================================================
# Epoch cache
# ============================================================================

def write_epoch_cache(
    path: Union[str, Path],
    recordings: Sequence[SubjectRecording],
    manifest: Dict[str, Any]
) -> Path:
    """Store prepared recordings and their manifest in one archive."""
    if not recordings:
        raise DataPreparationError("dataset", "nothing to cache")
    offsets = np.cumsum([0] + [len(r) for r in recordings])
    arrays = {
        "samples": np.concatenate([r.samples for r in recordings]),
        "labels": np.concatenate([r.labels for r in recordings]),
        "epoch_index": np.concatenate([r.epoch_indices for r in recordings]),
        "subject_offsets": offsets.astype(np.int64),
    }
    metadata = dict(manifest)
    metadata["recordings"] = [
        {
            "subject_id": r.subject_id,
            "recording_id": r.recording_id,
            "n_epochs": len(r),
            "start_time": r.start_time.isoformat() if r.start_time else None,
        }
        for r in recordings
    ]
    metadata["fs"] = recordings[0].fs
    return write_archive(path, CACHE_MAGIC, CACHE_VERSION, metadata, arrays)


def read_epoch_cache(path: Union[str, Path]) -> Tuple[List[SubjectRecording], Dict[str, Any]]:
    """Inverse of write_epoch_cache.

    Raises:
        FileOperationError: If the cache is missing or malformed
    """
    metadata, arrays = read_archive(path, CACHE_MAGIC, CACHE_VERSION)
    offsets = arrays["subject_offsets"]
    fs = int(metadata["fs"])
    recordings = []
    for i, entry in enumerate(metadata["recordings"]):
        a, b = int(offsets[i]), int(offsets[i + 1])
        subject_id = entry["subject_id"]
        recordings.append(SubjectRecording(
            subject_id=subject_id,
            recording_id=entry["recording_id"],
            fs=fs,
            epochs=[
                EpochRecord(subject_id, int(index), samples, None if label < 0 else Stage(int(label)))
                for index, samples, label in zip(
                    arrays["epoch_index"][a:b], arrays["samples"][a:b], arrays["labels"][a:b]
                )
            ],
            start_time=datetime.fromisoformat(entry["start_time"]) if entry.get("start_time") else None,
        ))
    logger.info(f"Loaded {len(recordings)} recordings ({int(offsets[-1])} epochs) from {path}")
    return recordings, metadata
