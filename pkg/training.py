"""Two-step training.

1. Pre-train the two CNN branches with a temporary softmax head on a
   class-balanced (oversampled) epoch set.
2. Fine-tune the whole network on the sequential data with a small
   learning rate for the CNNs, a larger one for the sequence part, and
   global-norm gradient clipping; LSTM states reset at every recording.

Both phases add an L2 penalty on the first-layer convolution filters.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from config import TrainPlan
from constants import ANALYSIS_CHUNK
from dataset import arrange_subject_sequences
from exceptions import ValidationError
from layers import Mode, OutputLayer, dropout, linear
from models import StepRecord, SubjectRecording
from network import SleepStageNet
from optim import (
    AdamState, adam_step, build_param_groups, global_norm, l2_penalty,
    step_groups
)
from tensor import add, backward, no_grad, reshape, softmax, softmax_cross_entropy

logger = logging.getLogger(__name__)


@dataclass
class TrainingHooks:
    """Optional callbacks observing a training run.

    Attributes:
        on_step: Receives the StepRecord of every optimizer step
        on_state_reset: Receives (recording_id, pass) at every LSTM reset
        on_pass_end: Receives (phase, pass, mean loss) after every pass
    """

    on_step: Optional[Callable[[StepRecord], None]] = None
    on_state_reset: Optional[Callable[[str, int], None]] = None
    on_pass_end: Optional[Callable[[str, int, float], None]] = None

    def step(self, record: StepRecord) -> None:
        if self.on_step is not None:
            self.on_step(record)

    def state_reset(self, recording_id: str, pass_index: int) -> None:
        if self.on_state_reset is not None:
            self.on_state_reset(recording_id, pass_index)

    def pass_end(self, phase: str, pass_index: int, loss: float) -> None:
        if self.on_pass_end is not None:
            self.on_pass_end(phase, pass_index, loss)


def log_hooks(training_logger: logging.Logger, base: Optional[TrainingHooks] = None) -> TrainingHooks:
    """Hooks that also write every step to a training log."""
    base = base or TrainingHooks()

    def on_step(record: StepRecord) -> None:
        training_logger.info(record.to_log_line())
        base.step(record)

    return TrainingHooks(on_step, base.on_state_reset, base.on_pass_end)


@dataclass
class PretrainResult:
    """Output of pre-training.

    Attributes:
        cnn_state: Parameters and moving statistics of both branches
        pass_losses: Mean loss of every pass
        head: Temporary softmax head; used only by the CNN-only baseline
    """

    cnn_state: Dict[str, np.ndarray]
    pass_losses: List[float] = field(default_factory=list)
    head: Optional[OutputLayer] = None


def _minibatches(order: np.ndarray, size: int) -> List[np.ndarray]:
    batches = [order[i:i + size] for i in range(0, order.size, size)]
    # Batch norm needs two samples
    if len(batches) > 1 and batches[-1].size == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def pretrain(
    model: SleepStageNet,
    x: np.ndarray,
    y: np.ndarray,
    plan: TrainPlan,
    hooks: Optional[TrainingHooks] = None
) -> PretrainResult:
    """Supervised pre-training of the CNN branches.

    Args:
        model: Network whose branches are trained in place
        x: Balanced epochs [N, fs x 30]
        y: Stage of every epoch
        plan: Training hyperparameters
        hooks: Instrumentation callbacks

    Returns:
        PretrainResult; the head's parameters are not part of cnn_state

    Raises:
        ValidationError: If the class counts are not all equal
    """
    hooks = hooks or TrainingHooks()
    n_classes = model.config.n_classes
    y = np.asarray(y, dtype=np.int64)
    counts = np.bincount(y, minlength=n_classes)
    if counts.min() != counts.max():
        raise ValidationError("pretraining data", counts.tolist(), "class counts must be equal; oversample first")

    head_seq, shuffle_seq = np.random.SeedSequence(plan.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    head = OutputLayer.create(np.random.default_rng(head_seq), model.feature_size, n_classes)

    named = model.named_parameters()
    params = {n: named[n] for n in model.cnn_parameter_names()}
    params.update(head.named_parameters("head"))
    state = AdamState(plan.lr_pretrain, plan.adam_beta1, plan.adam_beta2, plan.adam_epsilon)

    logger.info(f"Pre-training CNNs on {len(y)} epochs for {plan.n_pretrain_epochs} passes")
    pass_losses = []
    for pass_index in range(plan.n_pretrain_epochs):
        losses = []
        batches = _minibatches(shuffle_rng.permutation(len(y)), plan.pretrain_batch)
        for step, batch in enumerate(batches):
            for p in params.values():
                p.zero_grad()
            features = model.featurize(x[batch], Mode.TRAIN)
            if plan.pretrain_head_dropout:
                features = dropout(features, model.config.dropout, Mode.TRAIN, model.rng)
            loss = softmax_cross_entropy(linear(features, head), y[batch])
            if plan.weight_decay_lambda > 0:
                loss = add(loss, l2_penalty(model.first_layer_filters(), plan.weight_decay_lambda))
            backward(loss)

            grads = {n: p.grad for n, p in params.items()}
            norm = global_norm(grads.values())
            adam_step(params, grads, state)
            losses.append(loss.item())
            hooks.step(StepRecord("pretrain", pass_index, step, loss.item(), norm, plan.lr_pretrain, 0.0))

        pass_losses.append(float(np.mean(losses)))
        logger.info(f"Pretrain pass {pass_index + 1}/{plan.n_pretrain_epochs}: loss {pass_losses[-1]:.4f}")
        hooks.pass_end("pretrain", pass_index, pass_losses[-1])

    return PretrainResult(cnn_state=model.cnn_state_dict(), pass_losses=pass_losses, head=head)


def finetune(
    model: SleepStageNet,
    cnn_state: Dict[str, np.ndarray],
    recordings: Sequence[SubjectRecording],
    plan: TrainPlan,
    hooks: Optional[TrainingHooks] = None
) -> SleepStageNet:
    """Fine-tune the whole network on sequential data.

    Backpropagation is truncated at window boundaries; the carried LSTM
    states start from zeros at the beginning of every recording.

    Args:
        model: Network to train in place
        cnn_state: Pre-trained branch parameters to transplant
        recordings: Labelled training recordings in time order
        plan: Training hyperparameters
        hooks: Instrumentation callbacks

    Returns:
        The trained model

    Raises:
        ShapeError: If cnn_state does not fit the network
        ValidationError: If a recording has unlabelled epochs
    """
    hooks = hooks or TrainingHooks()
    model.load_cnn_state(cnn_state)
    for recording in recordings:
        if (recording.labels < 0).any():
            raise ValidationError("recording", recording.recording_id, "has unlabelled epochs")

    groups = build_param_groups(
        model, plan.lr1, plan.lr2, plan.adam_beta1, plan.adam_beta2, plan.adam_epsilon
    )
    width = model.feature_size
    logger.info(
        f"Fine-tuning on {len(recordings)} recordings for {plan.n_finetune_epochs} passes "
        f"(lr {plan.lr1:g}/{plan.lr2:g})"
    )
    for pass_index in range(plan.n_finetune_epochs):
        losses = []
        step = 0
        for recording in recordings:
            states = model.zero_states(plan.finetune_batch)
            hooks.state_reset(recording.recording_id, pass_index)
            for batch in arrange_subject_sequences(recording, plan.finetune_batch, plan.seq_len):
                model.zero_grad()
                lanes, window, length = batch.epochs.shape
                features = model.featurize(batch.epochs.reshape(lanes * window, length), Mode.TRAIN)
                features = reshape(features, (lanes, window, width))
                out = model.sequence_forward(features, states.take(batch.lane_ids), Mode.TRAIN)
                loss = softmax_cross_entropy(out.logits, batch.labels.reshape(-1))
                if plan.weight_decay_lambda > 0:
                    loss = add(loss, l2_penalty(model.first_layer_filters(), plan.weight_decay_lambda))
                backward(loss)

                norm = step_groups(groups, plan.clip_threshold)
                states.put(batch.lane_ids, out.states)
                losses.append(loss.item())
                hooks.step(StepRecord("finetune", pass_index, step, loss.item(), norm, plan.lr1, plan.lr2))
                step += 1

        mean_loss = float(np.mean(losses)) if losses else float("nan")
        logger.info(f"Finetune pass {pass_index + 1}/{plan.n_finetune_epochs}: loss {mean_loss:.4f}")
        hooks.pass_end("finetune", pass_index, mean_loss)

    model.reset_states()
    return model


def predict_cnn_only(
    model: SleepStageNet,
    head: OutputLayer,
    recording: SubjectRecording
) -> np.ndarray:
    """Class probabilities from the CNN branches and the pre-training head alone.

    Returns:
        [n_epochs, n_classes] probabilities
    """
    samples = recording.samples
    probabilities = []
    with no_grad():
        for start in range(0, samples.shape[0], ANALYSIS_CHUNK):
            features = model.featurize(samples[start:start + ANALYSIS_CHUNK], Mode.EVAL)
            probabilities.append(softmax(linear(features, head).data))
    if not probabilities:
        return np.zeros((0, model.config.n_classes))
    return np.concatenate(probabilities)
