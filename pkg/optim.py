"""Adam with per-group learning rates, global-norm clipping and L2 decay."""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

import numpy as np

from constants import ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON
from exceptions import ShapeError, TrainingError, ValidationError
from tensor import Tensor, add, mul, scale, sum_all

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """First and second moments of a set of parameters.

    Attributes:
        lr: Learning rate
        beta1: Decay of the first moment
        beta2: Decay of the second moment
        epsilon: Added to the root of the second moment
        t: Number of steps taken
        m: First moment per parameter name
        v: Second moment per parameter name
    """

    lr: float
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class ParamGroup:
    """Parameters sharing one learning rate and one Adam state.

    Attributes:
        name: Group name ("cnn" or "sequence")
        params: Parameter tensors by dotted name
        state: Adam state of the group
        decayed: Names carrying the L2 penalty
    """

    name: str
    params: Dict[str, Tensor]
    state: AdamState
    decayed: Tuple[str, ...] = ()

    @property
    def lr(self) -> float:
        return self.state.lr

    def gradients(self) -> Dict[str, np.ndarray]:
        return {
            name: np.zeros_like(p.data) if p.grad is None else p.grad
            for name, p in self.params.items()
        }


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState
) -> None:
    """One Adam update, in place.

    With lr = 0 the parameters are left untouched while the moments still
    advance.

    Raises:
        ShapeError: If a gradient's shape differs from its parameter
        TrainingError: If a gradient contains NaN, naming the parameter;
            nothing is updated in that case
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError("adam_step", [p.shape, g.shape], f"parameter '{name}'")
        if np.isnan(g).any():
            raise TrainingError(name, "gradient contains NaN")

    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(p.data), np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        if state.lr == 0.0:
            continue
        m_hat = m / correction1
        v_hat = v / correction2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)


def global_norm(grads: Iterable[np.ndarray]) -> float:
    """sqrt of the summed squares of every gradient."""
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_global_norm(
    grads: Mapping[str, np.ndarray],
    threshold: float
) -> Tuple[Dict[str, np.ndarray], float]:
    """Rescale all gradients jointly so their global norm is at most ``threshold``.

    Returns:
        (clipped gradients, global norm before clipping)

    Raises:
        ValidationError: If threshold is not positive
    """
    if threshold <= 0:
        raise ValidationError("clip_threshold", threshold, "must be positive")
    norm = global_norm(grads.values())
    if norm <= threshold:
        return dict(grads), norm
    factor = threshold / norm
    return {name: g * factor for name, g in grads.items()}, norm


def l2_penalty(filters: Sequence[Tensor], lam: float) -> Tensor:
    """lam * sum of squared weights over ``filters``."""
    total = None
    for w in filters:
        term = sum_all(mul(w, w))
        total = term if total is None else add(total, term)
    if total is None:
        return Tensor(0.0)
    return scale(total, lam)


def build_param_groups(
    model,
    lr_cnn: float,
    lr_sequence: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    epsilon: float = ADAM_EPSILON
) -> List[ParamGroup]:
    """Split a SleepStageNet into the CNN group and the sequence group.

    The CNN group holds both branches including their batch-norm affines;
    the sequence group holds the LSTMs, the shortcut and the output layer.

    Raises:
        TrainingError: If the groups do not partition the parameters
    """
    named = model.named_parameters()
    cnn_names = model.cnn_parameter_names()
    seq_names = model.sequence_parameter_names()
    if set(cnn_names) & set(seq_names) or set(cnn_names) | set(seq_names) != set(named):
        raise TrainingError("param_groups", "CNN and sequence groups must partition the parameters")
    decayed = tuple(n for n in cnn_names if n.endswith("conv1.filters"))
    return [
        ParamGroup("cnn", {n: named[n] for n in cnn_names}, AdamState(lr_cnn, beta1, beta2, epsilon), decayed),
        ParamGroup("sequence", {n: named[n] for n in seq_names}, AdamState(lr_sequence, beta1, beta2, epsilon)),
    ]


def step_groups(groups: Sequence[ParamGroup], clip_threshold: float = 0.0) -> float:
    """Clip (when a threshold is given) and apply Adam to every group.

    Returns:
        Global gradient norm before clipping
    """
    grads: Dict[str, np.ndarray] = {}
    for group in groups:
        grads.update(group.gradients())
    if clip_threshold > 0:
        grads, norm = clip_global_norm(grads, clip_threshold)
    else:
        norm = global_norm(grads.values())
    if not np.isfinite(norm):
        bad = next((n for n, g in grads.items() if not np.isfinite(g).all()), "global norm")
        raise TrainingError(bad, f"gradient is not finite (global norm {norm})")
    for group in groups:
        adam_step(group.params, {n: grads[n] for n in group.params}, group.state)
    return norm
