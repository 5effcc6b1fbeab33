"""Shared fixtures: miniature networks at fs=16, synthetic subjects, EDF builders."""

from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import pytest

from config import ModelConfig, TrainPlan
from constants import EDF_ANNOTATION_LABEL, EDF_PLUS_CONTINUOUS, EPOCH_SECONDS
from edf_helpers import (
    annotation_signal, encode_annotation_records, make_header,
    physical_to_digital, write_edf
)
from models import Annotation, EdfSignalHeader, EpochRecord, Stage, SubjectRecording
from network import build_model

FS = 16

# One dominant frequency per stage keeps synthetic classes separable
STAGE_FREQUENCIES = {
    Stage.W: 6.0,
    Stage.N1: 4.0,
    Stage.N2: 2.5,
    Stage.N3: 0.75,
    Stage.REM: 5.0,
}

RK_TEXT = {
    Stage.W: "Sleep stage W",
    Stage.N1: "Sleep stage 1",
    Stage.N2: "Sleep stage 2",
    Stage.N3: "Sleep stage 3",
    Stage.REM: "Sleep stage R",
}


def synthetic_epoch(stage: Stage, rng: np.random.Generator, fs: int = FS) -> np.ndarray:
    t = np.arange(fs * EPOCH_SECONDS) / fs
    phase = rng.uniform(0, 2 * np.pi)
    return 50.0 * np.sin(2 * np.pi * STAGE_FREQUENCIES[stage] * t + phase) + rng.normal(0, 5.0, t.size)


def night_stages(n_epochs: int = 40, lead_wake: int = 4) -> List[Stage]:
    """Wake, a cycle through every sleep stage, wake again."""
    cycle = [Stage.N1, Stage.N2, Stage.N2, Stage.N3, Stage.N3, Stage.REM, Stage.N2, Stage.W]
    stages = [Stage.W] * lead_wake
    while len(stages) < n_epochs - 2:
        stages.append(cycle[(len(stages) - lead_wake) % len(cycle)])
    return stages + [Stage.W] * (n_epochs - len(stages))


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig.for_sampling_rate(
        FS, conv1_filters=4, conv2_filters=4, n_conv2=1,
        lstm_hidden=4, lstm_layers=2, seq_length=5, dropout=0.1,
    )


@pytest.fixture
def tiny_plan() -> TrainPlan:
    return TrainPlan(
        n_pretrain_epochs=1,
        n_finetune_epochs=1,
        pretrain_batch=16,
        finetune_batch=2,
        seq_len=5,
        lr_pretrain=1e-3,
        lr1=1e-5,
        lr2=1e-3,
        seed=0,
    )


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config, seed=0)


@pytest.fixture
def make_recording() -> Callable[..., SubjectRecording]:
    def build(
        subject_id: str,
        stages: Optional[Sequence[Stage]] = None,
        seed: int = 0,
        recording_id: Optional[str] = None,
        labelled: bool = True
    ) -> SubjectRecording:
        stages = list(stages) if stages is not None else night_stages()
        rng = np.random.default_rng(seed)
        return SubjectRecording(
            subject_id=subject_id,
            recording_id=recording_id or subject_id,
            fs=FS,
            epochs=[
                EpochRecord(subject_id, i, synthetic_epoch(stage, rng), stage if labelled else None)
                for i, stage in enumerate(stages)
            ],
        )
    return build


@pytest.fixture
def synthetic_recordings(make_recording) -> List[SubjectRecording]:
    return [make_recording(f"s{i:02d}", seed=i) for i in range(4)]


# ============================================================================
# EDF builders
# ============================================================================

def eeg_signal_header(label: str, fs: int = FS) -> EdfSignalHeader:
    return EdfSignalHeader(
        label=label,
        transducer="Ag-AgCl electrodes",
        physical_dimension="uV",
        physical_min=-200.0,
        physical_max=200.0,
        digital_min=-32768,
        digital_max=32767,
        samples_per_record=fs * EPOCH_SECONDS,
    )


def psg_bytes(channels: dict, fs: int = FS) -> bytes:
    """EDF with 30-s records holding each named physical signal."""
    headers = [eeg_signal_header(label, fs) for label in channels]
    n_records = len(next(iter(channels.values()))) // (fs * EPOCH_SECONDS)
    digital = [physical_to_digital(np.asarray(s), h) for s, h in zip(channels.values(), headers)]
    header = make_header(headers, n_records, float(EPOCH_SECONDS), patient="X X X X", recording="Startdate X")
    return write_edf(header, digital)


def hypnogram_bytes(annotations: Sequence[Annotation]) -> bytes:
    """EDF+ file holding only an annotation signal, in one record."""
    record_bytes = 2 * (40 * len(annotations) + 32)
    signal = EdfSignalHeader(
        label=EDF_ANNOTATION_LABEL,
        physical_min=-1.0,
        physical_max=1.0,
        samples_per_record=record_bytes // 2,
    )
    records = encode_annotation_records(annotations, 1, 0.0, record_bytes)
    header = make_header([signal], 1, 0.0, reserved=EDF_PLUS_CONTINUOUS)
    return write_edf(header, [annotation_signal(records)])


def stage_annotations(stages: Sequence[Stage], extra: Sequence[Annotation] = ()) -> List[Annotation]:
    """One annotation per run of equal stages, as hypnogram files store them."""
    annotations, start = [], 0
    for i in range(1, len(stages) + 1):
        if i == len(stages) or stages[i] != stages[start]:
            annotations.append(Annotation(
                float(start * EPOCH_SECONDS), float((i - start) * EPOCH_SECONDS), RK_TEXT[stages[start]]
            ))
            start = i
    return annotations + list(extra)


@pytest.fixture
def write_night() -> Callable[..., Path]:
    """Write a Sleep-EDF style PSG/hypnogram pair and return the PSG path."""
    def write(
        directory: Path,
        night: str,
        stages: Optional[Sequence[Stage]] = None,
        seed: int = 0,
        extra: Sequence[Annotation] = ()
    ) -> Path:
        stages = list(stages) if stages is not None else night_stages()
        rng = np.random.default_rng(seed)
        fpz = np.concatenate([synthetic_epoch(s, rng) for s in stages])
        pz = 0.5 * fpz
        directory.mkdir(parents=True, exist_ok=True)
        psg = directory / f"{night}E0-PSG.edf"
        psg.write_bytes(psg_bytes({"EEG Fpz-Cz": fpz, "EEG Pz-Oz": pz}))
        (directory / f"{night}EC-Hypnogram.edf").write_bytes(hypnogram_bytes(stage_annotations(stages, extra)))
        return psg
    return write
