"""Model analysis: first-layer filter activations and LSTM cell traces."""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from constants import ANALYSIS_CHUNK, DEFAULT_TRACE_CELLS, N_STAGES, STAGE_NAMES
from exceptions import ShapeError, ValidationError
from layers import Mode, conv_block_forward
from models import CellTrace, FilterActivationMap, Stage, SubjectRecording
from network import SleepStageNet
from tensor import no_grad, reshape

logger = logging.getLogger(__name__)


def first_layer_activations(model: SleepStageNet, epochs: np.ndarray) -> Dict[str, np.ndarray]:
    """Per-epoch sums over positions of each branch's post-ReLU conv1 output.

    Returns:
        Branch name -> [n_epochs, n_filters]
    """
    epochs = np.asarray(epochs, dtype=np.float64)
    sums: Dict[str, list] = {model.small.name: [], model.large.name: []}
    with no_grad():
        for start in range(0, epochs.shape[0], ANALYSIS_CHUNK):
            chunk = epochs[start:start + ANALYSIS_CHUNK]
            x = reshape(chunk, (chunk.shape[0], chunk.shape[1], 1))
            for branch in (model.small, model.large):
                z = conv_block_forward(x, branch.conv1, Mode.EVAL)
                sums[branch.name].append(z.data.sum(axis=1))
    return {name: np.concatenate(parts) for name, parts in sums.items()}


def _rescale_rows(means: np.ndarray, counts: np.ndarray) -> Tuple[np.ndarray, List[str]]:
    values = np.zeros_like(means)
    flagged = []
    for c in range(means.shape[0]):
        row = means[c]
        low, high = row.min(), row.max()
        if counts[c] == 0 or high == low:
            flagged.append(STAGE_NAMES[c])
            continue
        values[c] = (row - low) / (high - low)
    return values, flagged


def filter_activations(
    model: SleepStageNet,
    epochs: np.ndarray,
    predictions: Sequence[int]
) -> Dict[str, FilterActivationMap]:
    """Mean first-layer activation of every filter per predicted stage.

    For each stage, the per-epoch activation sums of the epochs predicted
    as that stage are averaged, then the row is min-max rescaled to [0, 1].
    Stages with no epochs, or a constant row, get a zero row and are flagged.

    Args:
        model: Trained network
        epochs: [n_epochs, fs x 30]
        predictions: Predicted stage of every epoch

    Returns:
        Branch name ("small", "large") -> FilterActivationMap

    Raises:
        ValidationError: If there are no predictions
        ShapeError: If epochs and predictions differ in count
    """
    predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
    if predictions.size == 0:
        raise ValidationError("predictions", 0, "no predictions to analyse")
    if len(epochs) != predictions.size:
        raise ShapeError("filter_activations", [np.shape(epochs), predictions.shape], "one prediction per epoch")

    counts = np.bincount(predictions, minlength=N_STAGES)
    maps = {}
    for branch, sums in first_layer_activations(model, epochs).items():
        means = np.zeros((N_STAGES, sums.shape[1]))
        for c in range(N_STAGES):
            if counts[c]:
                means[c] = sums[predictions == c].mean(axis=0)
        values, flagged = _rescale_rows(means, counts)
        if flagged:
            logger.warning(f"{branch} branch: zero rows for stages {', '.join(flagged)}")
        maps[branch] = FilterActivationMap(branch, values, counts.tolist(), flagged)
    return maps


def cell_trace(
    model: SleepStageNet,
    recording: SubjectRecording,
    cells: Sequence[int] = DEFAULT_TRACE_CELLS,
    layer: int = -1
) -> CellTrace:
    """tanh of selected forward-LSTM memory cells at every epoch.

    The states start from zeros at the recording's first epoch.

    Raises:
        ValidationError: If a cell or layer index is out of range, or the
            recording is empty
    """
    hidden, layers = model.config.lstm_hidden, model.config.lstm_layers
    bad = [c for c in cells if not 0 <= c < hidden]
    if bad:
        raise ValidationError("cells", bad, f"indices must lie in [0, {hidden})")
    if not -layers <= layer < layers:
        raise ValidationError("layer", layer, f"network has {layers} LSTM layers")
    if len(recording) == 0:
        raise ValidationError("recording", recording.recording_id, "has no epochs")

    probabilities, raw = model.score_samples(recording.samples, trace_layer=layer)
    return CellTrace(
        recording_id=recording.recording_id,
        layer=layer % layers,
        cells=list(cells),
        values=np.tanh(raw[:, list(cells)]),
        stages=[Stage(int(s)) for s in np.argmax(probabilities, axis=1)],
    )


def filter_map_to_dataframe(activation_map: FilterActivationMap) -> pd.DataFrame:
    frame = pd.DataFrame(
        activation_map.values,
        index=list(STAGE_NAMES),
        columns=[f"filter{k}" for k in range(activation_map.values.shape[1])],
    )
    frame.index.name = "stage"
    return frame


def cell_trace_to_dataframe(trace: CellTrace, epoch_indices: Optional[np.ndarray] = None) -> pd.DataFrame:
    frame = pd.DataFrame(trace.values, columns=[f"cell{c}" for c in trace.cells])
    frame.insert(0, "stage", [s.label for s in trace.stages])
    frame.insert(0, "epoch_index", np.arange(len(frame)) if epoch_indices is None else epoch_indices)
    return frame


def save_analysis(
    maps: Dict[str, FilterActivationMap],
    trace: Optional[CellTrace],
    directory: Union[str, Path],
    filter_template: str,
    trace_file: str,
    epoch_indices: Optional[np.ndarray] = None
) -> None:
    """Write filter maps and the cell trace as CSV files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for branch, activation_map in maps.items():
        filter_map_to_dataframe(activation_map).to_csv(directory / filter_template.format(branch=branch))
    if trace is not None:
        cell_trace_to_dataframe(trace, epoch_indices).to_csv(directory / trace_file, index=False)
    logger.info(f"Saved analysis to {directory}")
