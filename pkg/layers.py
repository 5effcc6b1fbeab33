"""Trainable layers built on the tensor engine.

Convolutional and dense blocks (op -> batch norm -> ReLU), inverted dropout,
a peephole LSTM cell and the two-layer bidirectional LSTM stack. Layers are
plain parameter holders; forward functions take the mode explicitly.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from constants import BN_DECAY, BN_EPSILON, FORGET_GATE_BIAS
from exceptions import ShapeError, ValidationError
from tensor import (
    Tensor, add, batch_norm_op, concat, conv1d, expand, matmul, mul, narrow,
    relu, sigmoid, tanh
)

logger = logging.getLogger(__name__)


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


def uniform_init(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> Tensor:
    """Trainable tensor drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


# ============================================================================
# Batch normalisation
# ============================================================================

@dataclass
class BatchNormState:
    """Per-channel affine parameters and moving statistics.

    Attributes:
        gamma: Scale, trainable
        beta: Shift, trainable
        moving_mean: Running mean used in eval mode
        moving_var: Running (biased) variance used in eval mode
        decay: Weight of the old value in the running averages
        epsilon: Variance guard
    """

    gamma: Tensor
    beta: Tensor
    moving_mean: np.ndarray
    moving_var: np.ndarray
    decay: float = BN_DECAY
    epsilon: float = BN_EPSILON

    def __post_init__(self) -> None:
        if not 0.0 < self.decay < 1.0:
            raise ValidationError("decay", self.decay, "must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValidationError("epsilon", self.epsilon, "must be positive")

    @classmethod
    def create(cls, channels: int, decay: float = BN_DECAY, epsilon: float = BN_EPSILON) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            moving_mean=np.zeros(channels),
            moving_var=np.ones(channels),
            decay=decay,
            epsilon=epsilon,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        self.moving_mean = self.decay * self.moving_mean + (1.0 - self.decay) * batch_mean
        self.moving_var = self.decay * self.moving_var + (1.0 - self.decay) * batch_var


def batch_norm(x: Tensor, state: BatchNormState, mode: Mode) -> Tensor:
    """Normalise over all non-channel axes.

    Train mode uses batch statistics and updates the moving statistics;
    eval mode uses the moving statistics.

    Raises:
        ValidationError: On a train-mode batch of one
    """
    if x.shape[-1] != state.channels:
        raise ShapeError("batch_norm", [x.shape, state.gamma.shape])
    if mode == Mode.TRAIN:
        if x.shape[0] < 2:
            raise ValidationError("batch", x.shape[0], "train-mode batch norm needs at least 2 rows")
        out, mean, var = batch_norm_op(x, state.gamma, state.beta, state.epsilon)
        state.update(mean, var)
        return out
    out, _, _ = batch_norm_op(
        x, state.gamma, state.beta, state.epsilon, state.moving_mean, state.moving_var
    )
    return out


def dropout(x: Tensor, p: float, mode: Mode, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity in eval mode or when p is 0."""
    if not 0.0 <= p < 1.0:
        raise ValidationError("dropout", p, "rate must lie in [0, 1)")
    if mode == Mode.EVAL or p == 0.0:
        return x
    if rng is None:
        raise ValidationError("rng", None, "train-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(mask))


# ============================================================================
# Convolutional and dense blocks
# ============================================================================

@dataclass
class ConvBlock:
    """conv1d -> batch norm -> ReLU.

    Attributes:
        filters: [width, in_ch, out_ch]
        stride: Convolution stride
        bn: Batch norm over out_ch channels
        subject_to_weight_decay: Whether the L2 penalty covers the filters
    """

    filters: Tensor
    stride: int
    bn: BatchNormState
    subject_to_weight_decay: bool = False

    def __post_init__(self) -> None:
        if self.filters.shape[0] < 1 or self.stride < 1:
            raise ValidationError("conv", (self.filters.shape[0], self.stride), "width and stride must be positive")
        if self.bn.channels != self.filters.shape[2]:
            raise ShapeError("conv_block", [self.filters.shape, self.bn.gamma.shape])

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        width: int,
        in_channels: int,
        out_channels: int,
        stride: int = 1,
        weight_decay: bool = False,
        bn_decay: float = BN_DECAY,
        bn_epsilon: float = BN_EPSILON
    ) -> "ConvBlock":
        return cls(
            filters=uniform_init(rng, (width, in_channels, out_channels), width * in_channels),
            stride=stride,
            bn=BatchNormState.create(out_channels, bn_decay, bn_epsilon),
            subject_to_weight_decay=weight_decay,
        )

    @property
    def in_channels(self) -> int:
        return self.filters.shape[1]

    @property
    def out_channels(self) -> int:
        return self.filters.shape[2]


def conv_block_forward(x: Tensor, block: ConvBlock, mode: Mode) -> Tensor:
    if x.ndim != 3 or x.shape[2] != block.in_channels:
        raise ShapeError("conv_block", [x.shape, block.filters.shape], "channel mismatch")
    return relu(batch_norm(conv1d(x, block.filters, block.stride, "same"), block.bn, mode))


@dataclass
class DenseBlock:
    """matmul -> batch norm -> ReLU (the shortcut projection)."""

    weights: Tensor
    bn: BatchNormState

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        in_features: int,
        out_features: int,
        bn_decay: float = BN_DECAY,
        bn_epsilon: float = BN_EPSILON
    ) -> "DenseBlock":
        return cls(
            weights=uniform_init(rng, (in_features, out_features), in_features),
            bn=BatchNormState.create(out_features, bn_decay, bn_epsilon),
        )

    @property
    def out_features(self) -> int:
        return self.weights.shape[1]


def dense(x: Tensor, block: DenseBlock, mode: Mode) -> Tensor:
    """relu(batch_norm(x . W))."""
    if x.ndim != 2 or x.shape[1] != block.weights.shape[0]:
        raise ShapeError("dense", [x.shape, block.weights.shape])
    return relu(batch_norm(matmul(x, block.weights), block.bn, mode))


@dataclass
class OutputLayer:
    """Affine projection to class logits."""

    weights: Tensor
    bias: Tensor

    @classmethod
    def create(cls, rng: np.random.Generator, in_features: int, n_classes: int) -> "OutputLayer":
        return cls(
            weights=uniform_init(rng, (in_features, n_classes), in_features),
            bias=Tensor(np.zeros(n_classes), requires_grad=True),
        )

    def named_parameters(self, prefix: str) -> Dict[str, Tensor]:
        return {f"{prefix}.weights": self.weights, f"{prefix}.bias": self.bias}


def linear(x: Tensor, layer: OutputLayer) -> Tensor:
    if x.ndim != 2 or x.shape[1] != layer.weights.shape[0]:
        raise ShapeError("linear", [x.shape, layer.weights.shape])
    out = matmul(x, layer.weights)
    return add(out, expand(layer.bias, out.shape))


# ============================================================================
# Peephole LSTM
# ============================================================================

@dataclass
class PeepholeLstmParams:
    """One peephole LSTM layer.

    Gate blocks are fused along the last axis in the order i, f, g, o.

    Attributes:
        W: Input weights [input_size, 4 x hidden]
        U: Recurrent weights [hidden, 4 x hidden]
        p_i: Input-gate peephole [hidden]
        p_f: Forget-gate peephole [hidden]
        p_o: Output-gate peephole [hidden]
        b: Biases [4 x hidden]
        hidden_size: Number of cells
    """

    W: Tensor
    U: Tensor
    p_i: Tensor
    p_f: Tensor
    p_o: Tensor
    b: Tensor
    hidden_size: int

    def __post_init__(self) -> None:
        h = self.hidden_size
        if self.U.shape != (h, 4 * h) or self.W.shape[1] != 4 * h or self.b.shape != (4 * h,):
            raise ShapeError("lstm_params", [self.W.shape, self.U.shape, self.b.shape])
        for peephole in (self.p_i, self.p_f, self.p_o):
            if peephole.shape != (h,):
                raise ShapeError("lstm_params", [peephole.shape], f"peepholes must have length {h}")

    @classmethod
    def create(cls, rng: np.random.Generator, input_size: int, hidden_size: int) -> "PeepholeLstmParams":
        bias = np.zeros(4 * hidden_size)
        bias[hidden_size:2 * hidden_size] = FORGET_GATE_BIAS
        return cls(
            W=uniform_init(rng, (input_size, 4 * hidden_size), input_size),
            U=uniform_init(rng, (hidden_size, 4 * hidden_size), hidden_size),
            p_i=uniform_init(rng, (hidden_size,), hidden_size),
            p_f=uniform_init(rng, (hidden_size,), hidden_size),
            p_o=uniform_init(rng, (hidden_size,), hidden_size),
            b=Tensor(bias, requires_grad=True),
            hidden_size=hidden_size,
        )

    @property
    def input_size(self) -> int:
        return self.W.shape[0]

    def named_parameters(self, prefix: str) -> Dict[str, Tensor]:
        return {
            f"{prefix}.{name}": getattr(self, name)
            for name in ("W", "U", "p_i", "p_f", "p_o", "b")
        }


@dataclass
class LstmState:
    """Hidden and cell state, [batch, hidden] each."""

    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, batch: int, hidden_size: int) -> "LstmState":
        return cls(Tensor(np.zeros((batch, hidden_size))), Tensor(np.zeros((batch, hidden_size))))


def lstm_step(x_t: Tensor, state: LstmState, params: PeepholeLstmParams) -> LstmState:
    """Advance one time step.

    i = sig(W_i x + U_i h + p_i * c_prev + b_i)
    f = sig(W_f x + U_f h + p_f * c_prev + b_f)
    g = tanh(W_g x + U_g h + b_g)
    c = f * c_prev + i * g
    o = sig(W_o x + U_o h + p_o * c + b_o)
    h = o * tanh(c)
    """
    hidden = params.hidden_size
    if x_t.ndim != 2 or x_t.shape[1] != params.input_size:
        raise ShapeError("lstm_step", [x_t.shape, params.W.shape])
    batch = x_t.shape[0]
    if state.h.shape != (batch, hidden) or state.c.shape != (batch, hidden):
        raise ShapeError("lstm_step", [x_t.shape, state.h.shape, state.c.shape])

    z = add(add(matmul(x_t, params.W), matmul(state.h, params.U)), expand(params.b, (batch, 4 * hidden)))
    z_i = narrow(z, 0, hidden)
    z_f = narrow(z, hidden, 2 * hidden)
    z_g = narrow(z, 2 * hidden, 3 * hidden)
    z_o = narrow(z, 3 * hidden, 4 * hidden)

    def peep(vector: Tensor, cell: Tensor) -> Tensor:
        return mul(expand(vector, (batch, hidden)), cell)

    i = sigmoid(add(z_i, peep(params.p_i, state.c)))
    f = sigmoid(add(z_f, peep(params.p_f, state.c)))
    g = tanh(z_g)
    c = add(mul(f, state.c), mul(i, g))
    o = sigmoid(add(z_o, peep(params.p_o, c)))
    return LstmState(h=mul(o, tanh(c)), c=c)


@dataclass
class BiLstmOutput:
    """Result of a bidirectional pass.

    Attributes:
        outputs: Per-position [batch, 2 x hidden] (top forward || top backward)
        final_forward: Forward state after the last position, per layer
        final_backward: Backward state after the first position, per layer
        forward_cells: Forward cell values per layer, per position
    """

    outputs: List[Tensor]
    final_forward: List[LstmState]
    final_backward: List[LstmState]
    forward_cells: List[List[np.ndarray]] = field(default_factory=list)


def _run_stack(
    seq: Sequence[Tensor],
    layers: Sequence[PeepholeLstmParams],
    init: Sequence[LstmState],
    mode: Mode,
    dropout_p: float,
    rng: Optional[np.random.Generator]
) -> Tuple[List[Tensor], List[LstmState], List[List[np.ndarray]]]:
    inputs = list(seq)
    finals: List[LstmState] = []
    cells: List[List[np.ndarray]] = []
    for depth, (params, state) in enumerate(zip(layers, init)):
        if depth > 0:
            # Between layers only; recurrent paths are never dropped
            inputs = [dropout(x, dropout_p, mode, rng) for x in inputs]
        outputs, layer_cells = [], []
        for x_t in inputs:
            state = lstm_step(x_t, state, params)
            outputs.append(state.h)
            layer_cells.append(state.c.data)
        finals.append(state)
        cells.append(layer_cells)
        inputs = outputs
    return inputs, finals, cells


def bilstm_forward(
    seq: Sequence[Tensor],
    fwd_params: Sequence[PeepholeLstmParams],
    bwd_params: Sequence[PeepholeLstmParams],
    init_fwd: Sequence[LstmState],
    init_bwd: Sequence[LstmState],
    mode: Mode = Mode.EVAL,
    dropout_p: float = 0.0,
    rng: Optional[np.random.Generator] = None
) -> BiLstmOutput:
    """Run a forward stack left to right and a backward stack right to left.

    The two directions never feed each other; each position's output is
    the concatenation of the top-layer forward and backward hidden states.

    Raises:
        ValidationError: If the sequence is empty
        ShapeError: If layer and state counts disagree
    """
    if not seq:
        raise ValidationError("sequence", 0, "bidirectional LSTM needs at least one position")
    if len(fwd_params) != len(init_fwd) or len(bwd_params) != len(init_bwd):
        raise ShapeError(
            "bilstm", [(len(fwd_params), len(init_fwd)), (len(bwd_params), len(init_bwd))],
            "one initial state per layer"
        )

    fwd_out, fwd_final, fwd_cells = _run_stack(seq, fwd_params, init_fwd, mode, dropout_p, rng)
    bwd_out, bwd_final, _ = _run_stack(seq[::-1], bwd_params, init_bwd, mode, dropout_p, rng)
    bwd_out = bwd_out[::-1]

    outputs = [concat([f, b], axis=1) for f, b in zip(fwd_out, bwd_out)]
    return BiLstmOutput(outputs, fwd_final, bwd_final, fwd_cells)
