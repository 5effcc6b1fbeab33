"""Adam, gradient clipping, L2 decay and parameter groups."""

import numpy as np
import pytest

from exceptions import ShapeError, TrainingError, ValidationError
from layers import Mode
from optim import (
    AdamState, adam_step, build_param_groups, clip_global_norm, global_norm,
    l2_penalty, step_groups
)
from tensor import Tensor, backward, reshape, softmax_cross_entropy


class TestAdam:
    def test_first_step_moves_by_learning_rate_times_sign(self):
        p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        g = np.array([0.5, -4.0, 1e-3])
        state = AdamState(lr=0.01)
        adam_step({"p": p}, {"p": g}, state)
        expected = np.array([1.0, -2.0, 3.0]) - 0.01 * g / (np.abs(g) + state.epsilon)
        np.testing.assert_allclose(p.data, expected, rtol=1e-12)
        assert state.t == 1

    def test_zero_learning_rate_freezes_parameters(self):
        p = Tensor(np.ones(2), requires_grad=True)
        state = AdamState(lr=0.0)
        adam_step({"p": p}, {"p": np.ones(2)}, state)
        np.testing.assert_array_equal(p.data, 1.0)
        assert state.t == 1
        np.testing.assert_allclose(state.m["p"], 0.1)

    def test_nan_gradient_aborts_before_any_update(self):
        a, b = Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(2), requires_grad=True)
        state = AdamState(lr=0.1)
        with pytest.raises(TrainingError) as info:
            adam_step({"a": a, "b": b}, {"a": np.ones(2), "b": np.array([np.nan, 0.0])}, state)
        assert "b" in info.value.format_message()
        np.testing.assert_array_equal(a.data, 1.0)
        assert state.t == 0

    def test_gradient_shape_must_match(self):
        with pytest.raises(ShapeError):
            adam_step({"p": Tensor(np.ones(2), requires_grad=True)}, {"p": np.ones(3)}, AdamState(lr=0.1))


class TestClipping:
    def test_large_gradients_are_scaled_to_the_threshold(self):
        rng = np.random.default_rng(0)
        grads = {"a": rng.normal(size=(10, 10)) * 20, "b": rng.normal(size=5) * 20}
        clipped, norm = clip_global_norm(grads, 10.0)
        assert norm > 10.0
        assert global_norm(clipped.values()) <= 10.0 + 1e-9
        np.testing.assert_allclose(clipped["a"] / grads["a"], 10.0 / norm)

    def test_small_gradients_are_untouched(self):
        grads = {"a": np.array([3.0, 4.0])}
        clipped, norm = clip_global_norm(grads, 10.0)
        assert norm == pytest.approx(5.0)
        np.testing.assert_array_equal(clipped["a"], grads["a"])

    def test_norms_across_many_magnitudes(self):
        rng = np.random.default_rng(3)
        for target in np.logspace(-1, 6, 50):
            grads = {"w": rng.normal(size=(4, 6)), "b": rng.normal(size=3)}
            scale = target / global_norm(grads.values())
            grads = {name: g * scale for name, g in grads.items()}
            clipped, norm = clip_global_norm(grads, 10.0)
            assert norm == pytest.approx(target)
            assert global_norm(clipped.values()) <= 10.0 + 1e-9
            if target > 10.0:
                assert global_norm(clipped.values()) == pytest.approx(10.0)
                # Direction is preserved
                np.testing.assert_allclose(clipped["w"] * norm / 10.0, grads["w"])
            else:
                np.testing.assert_array_equal(clipped["b"], grads["b"])

    def test_threshold_must_be_positive(self):
        with pytest.raises(ValidationError):
            clip_global_norm({"a": np.ones(1)}, 0.0)


class TestWeightDecay:
    def test_penalty_and_gradient(self):
        w = Tensor(np.array([2.0]), requires_grad=True)
        penalty = l2_penalty([w], 1e-3)
        assert penalty.item() == pytest.approx(0.004)
        backward(penalty)
        np.testing.assert_allclose(w.grad, [0.004])

    def test_no_filters_gives_zero(self):
        assert l2_penalty([], 1e-3).item() == 0.0


class TestParamGroups:
    def test_groups_and_decayed_filters(self, tiny_model):
        cnn, sequence = build_param_groups(tiny_model, 1e-6, 1e-4)
        assert (cnn.name, cnn.lr, sequence.name, sequence.lr) == ("cnn", 1e-6, "sequence", 1e-4)
        assert sorted(cnn.decayed) == ["large.conv1.filters", "small.conv1.filters"]
        assert not sequence.decayed

    def test_frozen_cnn_group_only_moves_the_sequence_part(self, tiny_model, tiny_config, make_recording):
        before = tiny_model.state_dict()
        groups = build_param_groups(tiny_model, 0.0, 1e-2)
        recording = make_recording("a")
        features = tiny_model.featurize(recording.samples[:10], Mode.TRAIN)
        out = tiny_model.sequence_forward(
            reshape(features, (2, 5, tiny_config.feature_size)), tiny_model.zero_states(2), Mode.TRAIN
        )
        tiny_model.zero_grad()
        backward(softmax_cross_entropy(out.logits, recording.labels[:10]))
        norm = step_groups(groups, clip_threshold=10.0)

        assert norm > 0
        after = tiny_model.state_dict()
        for name in tiny_model.cnn_parameter_names():
            np.testing.assert_array_equal(after[name], before[name])
        moved = [n for n in tiny_model.sequence_parameter_names() if not np.array_equal(after[n], before[n])]
        assert "output.weights" in moved
