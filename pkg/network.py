"""The sleep staging network.

Two CNN branches (small first-layer filters for temporal detail, large ones
for frequency detail) featurize each 30-s epoch; a two-layer bidirectional
peephole LSTM reads the feature sequence and its output is added to a
fully-connected shortcut of the same features before the softmax layer.

LSTM state is carried across windows of one recording and reset to zeros
at the start of every recording.
"""

import copy
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import BranchConfig, ModelConfig
from exceptions import ShapeError, ValidationError
from layers import (
    BatchNormState, ConvBlock, DenseBlock, LstmState, Mode, OutputLayer,
    PeepholeLstmParams, bilstm_forward, conv_block_forward, dense, dropout,
    linear
)
from models import EpochPrediction, Stage, SubjectRecording
from tensor import (
    Tensor, add, as_tensor, concat, maxpool1d, no_grad, reshape, select,
    softmax, stack
)

logger = logging.getLogger(__name__)

CNN_PREFIXES: Tuple[str, ...] = ("small.", "large.")


# ============================================================================
# Recurrent state
# ============================================================================

@dataclass
class SequenceState:
    """Detached LSTM states of every lane, per direction and layer.

    Each entry is an (h, c) pair of [lanes, hidden] arrays. Holding plain
    arrays truncates backpropagation at window boundaries.
    """

    forward: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    backward: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    @classmethod
    def zeros(cls, lanes: int, hidden: int, layers: int) -> "SequenceState":
        def blank() -> List[Tuple[np.ndarray, np.ndarray]]:
            return [(np.zeros((lanes, hidden)), np.zeros((lanes, hidden))) for _ in range(layers)]
        return cls(blank(), blank())

    @classmethod
    def from_lstm(cls, forward: Sequence[LstmState], backward: Sequence[LstmState]) -> "SequenceState":
        return cls(
            [(s.h.data.copy(), s.c.data.copy()) for s in forward],
            [(s.h.data.copy(), s.c.data.copy()) for s in backward],
        )

    @property
    def lanes(self) -> int:
        return self.forward[0][0].shape[0] if self.forward else 0

    def to_lstm(self) -> Tuple[List[LstmState], List[LstmState]]:
        def convert(pairs):
            return [LstmState(Tensor(h), Tensor(c)) for h, c in pairs]
        return convert(self.forward), convert(self.backward)

    def take(self, lane_ids: np.ndarray) -> "SequenceState":
        """States of a subset of lanes, in the given order."""
        def pick(pairs):
            return [(h[lane_ids].copy(), c[lane_ids].copy()) for h, c in pairs]
        return SequenceState(pick(self.forward), pick(self.backward))

    def put(self, lane_ids: np.ndarray, update: "SequenceState") -> None:
        """Write back the states of a subset of lanes."""
        for pairs, new_pairs in ((self.forward, update.forward), (self.backward, update.backward)):
            for (h, c), (new_h, new_c) in zip(pairs, new_pairs):
                h[lane_ids] = new_h
                c[lane_ids] = new_c


@dataclass
class SequenceOutput:
    """Logits, continuation states and forward cell values of one window."""

    logits: Tensor
    states: SequenceState
    forward_cells: List[List[np.ndarray]]


# ============================================================================
# CNN branch
# ============================================================================

@dataclass
class CnnBranch:
    """conv1 -> maxpool -> dropout -> conv x n -> maxpool -> flatten."""

    name: str
    config: BranchConfig
    conv1: ConvBlock
    convs: List[ConvBlock]
    dropout: float

    @classmethod
    def create(
        cls,
        name: str,
        config: BranchConfig,
        rng: np.random.Generator,
        dropout_rate: float,
        bn_decay: float,
        bn_epsilon: float
    ) -> "CnnBranch":
        conv1 = ConvBlock.create(
            rng, config.conv1_width, 1, config.conv1_filters, config.conv1_stride,
            weight_decay=True, bn_decay=bn_decay, bn_epsilon=bn_epsilon
        )
        convs = []
        in_channels = config.conv1_filters
        for _ in range(config.n_conv2):
            convs.append(ConvBlock.create(
                rng, config.conv2_width, in_channels, config.conv2_filters, 1,
                bn_decay=bn_decay, bn_epsilon=bn_epsilon
            ))
            in_channels = config.conv2_filters
        return cls(name, config, conv1, convs, dropout_rate)

    def blocks(self) -> Dict[str, ConvBlock]:
        named = {f"{self.name}.conv1": self.conv1}
        for i, block in enumerate(self.convs):
            named[f"{self.name}.convs.{i}"] = block
        return named

    def forward(self, x: Tensor, mode: Mode, rng: Optional[np.random.Generator]) -> Tensor:
        cfg = self.config
        h = conv_block_forward(x, self.conv1, mode)
        h = maxpool1d(h, cfg.pool1_size, cfg.pool1_stride)
        h = dropout(h, self.dropout, mode, rng)
        for block in self.convs:
            h = conv_block_forward(h, block, mode)
        h = maxpool1d(h, cfg.pool2_size, cfg.pool2_stride)
        return reshape(h, (h.shape[0], h.shape[1] * h.shape[2]))


# ============================================================================
# Network
# ============================================================================

class SleepStageNet:
    """Representation learning CNNs plus sequence residual learning.

    Attributes:
        config: Layout the network was built from
        small: Small-filter CNN branch
        large: Large-filter CNN branch
        forward_layers: Forward LSTM stack
        backward_layers: Backward LSTM stack
        shortcut: Fully-connected shortcut of the CNN features
        output: Final softmax projection
        states: Single-session LSTM state used by predict
        rng: Generator for dropout masks
    """

    def __init__(
        self,
        config: ModelConfig,
        small: CnnBranch,
        large: CnnBranch,
        forward_layers: List[PeepholeLstmParams],
        backward_layers: List[PeepholeLstmParams],
        shortcut: DenseBlock,
        output: OutputLayer,
        rng: np.random.Generator
    ):
        self.config = config
        self.small = small
        self.large = large
        self.forward_layers = forward_layers
        self.backward_layers = backward_layers
        self.shortcut = shortcut
        self.output = output
        self.rng = rng
        self.states = self.zero_states(1)

    # ------------------------------------------------------------------
    # Parameters
    # ------------------------------------------------------------------

    def _blocks_with_bn(self) -> Dict[str, Union[ConvBlock, DenseBlock]]:
        named: Dict[str, Union[ConvBlock, DenseBlock]] = {}
        named.update(self.small.blocks())
        named.update(self.large.blocks())
        named["shortcut"] = self.shortcut
        return named

    def named_parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for prefix, block in self._blocks_with_bn().items():
            if isinstance(block, ConvBlock):
                params[f"{prefix}.filters"] = block.filters
            else:
                params[f"{prefix}.weights"] = block.weights
            params[f"{prefix}.bn.gamma"] = block.bn.gamma
            params[f"{prefix}.bn.beta"] = block.bn.beta
        for direction, layers in (("forward", self.forward_layers), ("backward", self.backward_layers)):
            for i, layer in enumerate(layers):
                params.update(layer.named_parameters(f"lstm.{direction}.{i}"))
        params.update(self.output.named_parameters("output"))
        return params

    def batch_norms(self) -> Dict[str, BatchNormState]:
        return {f"{prefix}.bn": block.bn for prefix, block in self._blocks_with_bn().items()}

    def cnn_parameter_names(self) -> List[str]:
        return [n for n in self.named_parameters() if n.startswith(CNN_PREFIXES)]

    def sequence_parameter_names(self) -> List[str]:
        return [n for n in self.named_parameters() if not n.startswith(CNN_PREFIXES)]

    def first_layer_filters(self) -> List[Tensor]:
        """Filters covered by the L2 penalty."""
        return [
            block.filters
            for block in self._blocks_with_bn().values()
            if isinstance(block, ConvBlock) and block.subject_to_weight_decay
        ]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.named_parameters().values()))

    def zero_grad(self) -> None:
        for param in self.named_parameters().values():
            param.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Copies of every parameter and batch-norm moving statistic."""
        state = {name: p.data.copy() for name, p in self.named_parameters().items()}
        for prefix, bn in self.batch_norms().items():
            state[f"{prefix}.moving_mean"] = bn.moving_mean.copy()
            state[f"{prefix}.moving_var"] = bn.moving_var.copy()
        return state

    def cnn_state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.state_dict().items() if k.startswith(CNN_PREFIXES)}

    def load_state_dict(self, state: Dict[str, np.ndarray], prefixes: Optional[Tuple[str, ...]] = None) -> None:
        """Copy arrays into the network.

        Args:
            state: Name to array mapping as produced by state_dict
            prefixes: Restrict loading to names with these prefixes

        Raises:
            ValidationError: If a required name is missing
            ShapeError: If an array has the wrong shape
        """
        def wanted(name: str) -> bool:
            return prefixes is None or name.startswith(prefixes)

        for name, param in self.named_parameters().items():
            if not wanted(name):
                continue
            value = self._lookup(state, name, param.shape)
            param.data = value
            param.zero_grad()
        for prefix, bn in self.batch_norms().items():
            if not wanted(prefix):
                continue
            bn.moving_mean = self._lookup(state, f"{prefix}.moving_mean", bn.moving_mean.shape)
            bn.moving_var = self._lookup(state, f"{prefix}.moving_var", bn.moving_var.shape)

    @staticmethod
    def _lookup(state: Dict[str, np.ndarray], name: str, shape: Tuple[int, ...]) -> np.ndarray:
        if name not in state:
            raise ValidationError("state_dict", name, "missing entry")
        value = np.asarray(state[name], dtype=np.float64)
        if value.shape != shape:
            raise ShapeError("load_state_dict", [value.shape, shape], f"entry '{name}'")
        return value.copy()

    def load_cnn_state(self, cnn_state: Dict[str, np.ndarray]) -> None:
        """Replace both CNN branches (parameters and moving statistics)."""
        self.load_state_dict(cnn_state, prefixes=CNN_PREFIXES)

    def clone(self) -> "SleepStageNet":
        return copy.deepcopy(self)

    # ------------------------------------------------------------------
    # Forward passes
    # ------------------------------------------------------------------

    @property
    def feature_size(self) -> int:
        return self.config.feature_size

    def zero_states(self, lanes: int) -> SequenceState:
        return SequenceState.zeros(lanes, self.config.lstm_hidden, self.config.lstm_layers)

    def featurize(self, epochs: Union[Tensor, np.ndarray], mode: Mode = Mode.EVAL) -> Tensor:
        """Concatenated branch outputs for a batch of epochs.

        Args:
            epochs: [batch, fs x 30] or [batch, fs x 30, 1]
            mode: Train or eval

        Returns:
            Tensor [batch, feature_size]

        Raises:
            ShapeError: If the epoch length is not fs x 30
        """
        x = as_tensor(epochs)
        if x.ndim == 2:
            x = reshape(x, (x.shape[0], x.shape[1], 1))
        expected = self.config.epoch_samples
        if x.ndim != 3 or x.shape[1] != expected or x.shape[2] != 1:
            raise ShapeError(
                "featurize", [x.shape],
                f"expected epochs of fs x 30 = {expected} samples"
            )
        return concat([self.small.forward(x, mode, self.rng), self.large.forward(x, mode, self.rng)], axis=1)

    def sequence_forward(self, features: Tensor, states: SequenceState, mode: Mode) -> SequenceOutput:
        """Sequence residual learning over [lanes, seq, D] features."""
        if features.ndim != 3 or features.shape[2] != self.feature_size:
            raise ShapeError(
                "sequence_pass", [features.shape],
                f"expected feature width {self.feature_size}"
            )
        lanes, seq, width = features.shape
        if states.lanes != lanes:
            raise ShapeError("sequence_pass", [features.shape, (states.lanes,)], "one state per lane")

        flat = dropout(reshape(features, (lanes * seq, width)), self.config.dropout, mode, self.rng)
        shortcut = dense(flat, self.shortcut, mode)
        steps_in = reshape(flat, (lanes, seq, width))
        steps_short = reshape(shortcut, (lanes, seq, self.config.shortcut_width))

        init_fwd, init_bwd = states.to_lstm()
        bi = bilstm_forward(
            [select(steps_in, t, axis=1) for t in range(seq)],
            self.forward_layers, self.backward_layers, init_fwd, init_bwd,
            mode, self.config.dropout, self.rng
        )
        summed = [add(bi.outputs[t], select(steps_short, t, axis=1)) for t in range(seq)]
        out = reshape(stack(summed, axis=1), (lanes * seq, self.config.shortcut_width))
        out = dropout(out, self.config.dropout, mode, self.rng)
        logits = linear(out, self.output)
        return SequenceOutput(
            logits=logits,
            states=SequenceState.from_lstm(bi.final_forward, bi.final_backward),
            forward_cells=bi.forward_cells,
        )

    def sequence_pass(
        self,
        features: Tensor,
        states: Optional[SequenceState] = None,
        mode: Mode = Mode.EVAL
    ) -> Tuple[Tensor, SequenceState]:
        """Logits for a window of features plus the continuation states.

        Args:
            features: [seq, D] for one lane or [lanes, seq, D]
            states: Carried states (defaults to the model's own session)
            mode: Train or eval

        Returns:
            (logits [seq, C] or [lanes x seq, C], new states)
        """
        single = features.ndim == 2
        if single:
            features = reshape(features, (1, features.shape[0], features.shape[1]))
        if states is None:
            states = self.states
        result = self.sequence_forward(features, states, mode)
        return result.logits, result.states

    def reset_states(self) -> "SleepStageNet":
        """Zero every h and c of the model's own session."""
        self.states = self.zero_states(1)
        return self

    # ------------------------------------------------------------------
    # Inference
    # ------------------------------------------------------------------

    def score_samples(self, samples: np.ndarray, trace_layer: Optional[int] = None) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        """Walk a recording's epochs in windows of seq_length.

        Args:
            samples: [n_epochs, fs x 30] in time order
            trace_layer: Forward LSTM layer whose cells to record

        Returns:
            (probabilities [n_epochs, C], forward cells [n_epochs, hidden]
            or None)
        """
        self.reset_states()
        seq = self.config.seq_length
        probabilities, cells = [], []
        with no_grad():
            for start in range(0, samples.shape[0], seq):
                window = samples[start:start + seq]
                features = self.featurize(window, Mode.EVAL)
                features = reshape(features, (1, features.shape[0], features.shape[1]))
                result = self.sequence_forward(features, self.states, Mode.EVAL)
                self.states = result.states
                probabilities.append(softmax(result.logits.data))
                if trace_layer is not None:
                    cells.append(np.stack([c[0] for c in result.forward_cells[trace_layer]]))
        traced = np.concatenate(cells) if trace_layer is not None else None
        return np.concatenate(probabilities), traced

    def predict(self, recording: SubjectRecording) -> List[EpochPrediction]:
        """Stage and class probabilities for every epoch of a recording.

        Raises:
            ValidationError: If the recording has no epochs
        """
        if len(recording) == 0:
            raise ValidationError("recording", recording.recording_id, "has no epochs")
        probabilities, _ = self.score_samples(recording.samples)
        return [
            EpochPrediction(int(index), Stage(int(np.argmax(p))), p)
            for index, p in zip(recording.epoch_indices, probabilities)
        ]


def build_model(config: ModelConfig, seed: int = 0) -> SleepStageNet:
    """Construct a freshly initialised network.

    Initialisation and dropout draw from independent generators spawned
    from ``seed``, so equal seeds give identical networks.

    Args:
        config: Network layout
        seed: Seed of the initialisation and dropout generators

    Returns:
        SleepStageNet instance
    """
    init_seq, dropout_seq = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(init_seq)

    small = CnnBranch.create(
        "small", config.small_branch, rng, config.dropout, config.bn_decay, config.bn_epsilon
    )
    large = CnnBranch.create(
        "large", config.large_branch, rng, config.dropout, config.bn_decay, config.bn_epsilon
    )

    def lstm_stack() -> List[PeepholeLstmParams]:
        layers, input_size = [], config.feature_size
        for _ in range(config.lstm_layers):
            layers.append(PeepholeLstmParams.create(rng, input_size, config.lstm_hidden))
            input_size = config.lstm_hidden
        return layers

    forward_layers = lstm_stack()
    backward_layers = lstm_stack()
    shortcut = DenseBlock.create(
        rng, config.feature_size, config.shortcut_width, config.bn_decay, config.bn_epsilon
    )
    output = OutputLayer.create(rng, config.shortcut_width, config.n_classes)

    model = SleepStageNet(
        config, small, large, forward_layers, backward_layers, shortcut, output,
        np.random.default_rng(dropout_seq)
    )
    logger.debug(
        f"Built network for fs={config.fs}: feature width {config.feature_size}, "
        f"{model.parameter_count()} parameters"
    )
    return model
