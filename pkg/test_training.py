"""Pre-training, fine-tuning and the CNN-only baseline."""

from dataclasses import replace

import numpy as np
import pytest

from config import ModelConfig, TrainPlan
from conftest import night_stages, synthetic_epoch
from dataset import oversample, stack_epochs
from exceptions import ValidationError
from models import EpochRecord, SubjectRecording
from network import build_model
from training import TrainingHooks, finetune, predict_cnn_only, pretrain


@pytest.fixture
def balanced(synthetic_recordings):
    return oversample(*stack_epochs(synthetic_recordings[:2]), seed=0)


class Recorder:
    def __init__(self):
        self.steps, self.resets, self.passes = [], [], []

    def hooks(self):
        return TrainingHooks(self.steps.append, lambda *a: self.resets.append(a), lambda *a: self.passes.append(a))


class TestPretrain:
    def test_trains_only_the_branches(self, tiny_model, tiny_plan, balanced):
        before = tiny_model.state_dict()
        recorder = Recorder()
        result = pretrain(tiny_model, *balanced, tiny_plan, recorder.hooks())

        assert set(result.cnn_state) <= {n for n in before if n.startswith(("small.", "large."))}
        assert any(not np.array_equal(result.cnn_state[n], before[n]) for n in result.cnn_state)
        after = tiny_model.state_dict()
        for name in tiny_model.sequence_parameter_names():
            np.testing.assert_array_equal(after[name], before[name])

        n_batches = len(balanced[1]) // tiny_plan.pretrain_batch
        assert len(recorder.steps) in (n_batches, n_batches + 1)
        assert all(s.phase == "pretrain" and np.isfinite(s.loss) for s in recorder.steps)
        assert len(result.pass_losses) == 1
        assert recorder.passes == [("pretrain", 0, result.pass_losses[0])]
        assert result.head is not None

    def test_unbalanced_data_is_rejected(self, tiny_model, tiny_plan, synthetic_recordings):
        with pytest.raises(ValidationError):
            pretrain(tiny_model, *stack_epochs(synthetic_recordings[:1]), tiny_plan)

    @pytest.mark.slow
    def test_loss_falls_over_passes(self, tiny_model, tiny_plan, balanced):
        plan = replace(tiny_plan, n_pretrain_epochs=15, lr_pretrain=3e-3)
        result = pretrain(tiny_model, *balanced, plan)
        assert result.pass_losses[-1] < result.pass_losses[0]


class TestFinetune:
    def test_state_resets_and_steps(self, tiny_config, tiny_plan, balanced, synthetic_recordings):
        cnn_state = pretrain(build_model(tiny_config, 0), *balanced, tiny_plan).cnn_state
        recorder = Recorder()
        model = finetune(build_model(tiny_config, 1), cnn_state, synthetic_recordings[:2], tiny_plan, recorder.hooks())

        assert recorder.resets == [("s00", 0), ("s01", 0)]
        # 40 epochs in 2 lanes of 20 give 4 windows of 5 per recording
        assert [s.step for s in recorder.steps] == list(range(8))
        for s in recorder.steps:
            assert s.phase == "finetune"
            assert (s.lr_cnn, s.lr_sequence) == (tiny_plan.lr1, tiny_plan.lr2)
            assert np.isfinite(s.grad_norm)
        assert recorder.passes[0][:2] == ("finetune", 0)
        assert len(model.predict(synthetic_recordings[2])) == 40

    def test_frozen_cnn_keeps_the_pretrained_filters(self, tiny_config, tiny_plan, synthetic_recordings):
        source = build_model(tiny_config, 0)
        cnn_state = source.cnn_state_dict()
        plan = replace(tiny_plan, lr1=0.0)
        model = finetune(build_model(tiny_config, 1), cnn_state, synthetic_recordings[:1], plan)

        params = model.named_parameters()
        for name in model.cnn_parameter_names():
            np.testing.assert_array_equal(params[name].data, cnn_state[name])

    def test_unlabelled_recordings_are_rejected(self, tiny_model, tiny_plan, make_recording):
        with pytest.raises(ValidationError):
            finetune(tiny_model, tiny_model.cnn_state_dict(), [make_recording("a", labelled=False)], tiny_plan)


def test_cnn_only_probabilities(tiny_model, tiny_plan, balanced, make_recording):
    result = pretrain(tiny_model, *balanced, tiny_plan)
    recording = make_recording("a")
    probabilities = predict_cnn_only(tiny_model, result.head, recording)
    assert probabilities.shape == (len(recording), 5)
    np.testing.assert_allclose(probabilities.sum(axis=1), 1.0)


def oscillation_night(subject_id, seed, fs=100, n_epochs=200):
    rng = np.random.default_rng(seed)
    return SubjectRecording(
        subject_id=subject_id,
        recording_id=subject_id,
        fs=fs,
        epochs=[
            EpochRecord(subject_id, i, synthetic_epoch(stage, rng, fs), stage)
            for i, stage in enumerate(night_stages(n_epochs))
        ],
    )


def accuracy(model, recordings):
    y_true = np.concatenate([r.labels for r in recordings])
    y_pred = np.concatenate([[int(p.stage) for p in model.predict(r)] for r in recordings])
    return float(np.mean(y_true == y_pred))


@pytest.mark.slow
def test_two_step_training_fits_distinct_oscillations():
    nights = [oscillation_night(f"s{i}", seed=10 + i) for i in range(4)]
    train, held_out = nights[:3], nights[3:]
    config = ModelConfig.for_sampling_rate(
        100, conv1_filters=8, conv2_filters=8, n_conv2=1,
        lstm_hidden=16, lstm_layers=1, seq_length=25, dropout=0.1,
    )
    plan = TrainPlan(
        n_pretrain_epochs=5, n_finetune_epochs=10, pretrain_batch=32, finetune_batch=2,
        seq_len=25, lr_pretrain=3e-3, lr1=1e-4, lr2=1e-3, seed=0,
    )

    model = build_model(config, plan.seed)
    pretrained = pretrain(model, *oversample(*stack_epochs(train), seed=plan.seed), plan)
    finetune(model, pretrained.cnn_state, train, plan)

    assert accuracy(model, train) >= 0.95
    assert accuracy(model, held_out) >= 0.80
