"""Checkpoint files and the archive container beneath them."""

import numpy as np
import pytest

from archive_helpers import decode_archive, encode_archive, write_archive
from checkpoints import (
    checkpoint_subjects, load_checkpoint, load_cnn_state, provenance,
    save_checkpoint, save_cnn_checkpoint
)
from constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from exceptions import CheckpointError, FileOperationError
from layers import OutputLayer


def probabilities(model, recording):
    return np.stack([p.probabilities for p in model.predict(recording)])


class TestArchive:
    def test_arrays_keep_dtype_and_shape(self):
        arrays = {"b": np.arange(6, dtype=np.int64).reshape(2, 3), "a": np.linspace(0, 1, 4)}
        metadata, decoded = decode_archive(encode_archive(b"TESTARCH", 3, {"x": [1, 2]}, arrays), b"TESTARCH", 3)
        assert metadata == {"x": [1, 2]}
        for name, array in arrays.items():
            assert decoded[name].dtype == array.dtype
            np.testing.assert_array_equal(decoded[name], array)

    def test_encoding_is_deterministic(self):
        arrays = {"z": np.ones(2), "a": np.zeros(3)}
        assert encode_archive(b"TESTARCH", 1, {"k": 1, "a": 2}, arrays) == encode_archive(
            b"TESTARCH", 1, {"a": 2, "k": 1}, dict(reversed(list(arrays.items())))
        )

    @pytest.mark.parametrize("mutate", [
        lambda data: data[:-3],
        lambda data: b"WRONGMAG" + data[8:],
        lambda data: data[:8] + (9).to_bytes(4, "little") + data[12:],
    ])
    def test_malformed_archives(self, mutate):
        data = encode_archive(b"TESTARCH", 1, {}, {"a": np.ones(4)})
        with pytest.raises(FileOperationError):
            decode_archive(mutate(data), b"TESTARCH", 1)


class TestModelCheckpoints:
    def test_round_trip_reproduces_predictions(self, tmp_path, tiny_model, make_recording):
        recording = make_recording("a")
        origin = provenance(7, pass_index=1, step=3, train_subjects=["s01", "s02"])
        path = save_checkpoint(tmp_path / "model.ssckpt", tiny_model, origin)

        loaded, metadata = load_checkpoint(path)
        assert loaded.config == tiny_model.config
        assert checkpoint_subjects(metadata) == ["s01", "s02"]
        assert metadata["provenance"]["step"] == 3
        np.testing.assert_array_equal(probabilities(loaded, recording), probabilities(tiny_model, recording))

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.ssckpt")

    def test_corrupt_file(self, tmp_path, tiny_model):
        path = save_checkpoint(tmp_path / "model.ssckpt", tiny_model)
        path.write_bytes(path.read_bytes()[:200])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_other_version(self, tmp_path, tiny_model):
        metadata = {"kind": "full", "model_config": tiny_model.config.to_dict()}
        path = write_archive(tmp_path / "old.ssckpt", CHECKPOINT_MAGIC, CHECKPOINT_VERSION + 1, metadata, tiny_model.state_dict())
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_unknown_and_missing_entries(self, tmp_path, tiny_model):
        metadata = {"kind": "full", "model_config": tiny_model.config.to_dict()}
        state = tiny_model.state_dict()
        extra = dict(state, **{"stray.weights": np.ones(2)})
        path = write_archive(tmp_path / "extra.ssckpt", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, metadata, extra)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

        state.pop("output.bias")
        path = write_archive(tmp_path / "short.ssckpt", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, metadata, state)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_kind_mismatch(self, tmp_path, tiny_model):
        path = save_cnn_checkpoint(tmp_path / "cnn.ssckpt", tiny_model.config, tiny_model.cnn_state_dict())
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


class TestCnnCheckpoints:
    def test_branches_and_head(self, tmp_path, tiny_model):
        head = OutputLayer.create(np.random.default_rng(0), tiny_model.feature_size, 5)
        path = save_cnn_checkpoint(
            tmp_path / "cnn.ssckpt", tiny_model.config, tiny_model.cnn_state_dict(), head,
            provenance(0, train_subjects=["s00"])
        )
        state, loaded_head, config, metadata = load_cnn_state(path)

        assert config == tiny_model.config
        assert set(state) == set(tiny_model.cnn_state_dict())
        assert not any(name.startswith("head.") for name in state)
        np.testing.assert_array_equal(loaded_head.weights.data, head.weights.data)
        assert checkpoint_subjects(metadata) == ["s00"]

    def test_without_head(self, tmp_path, tiny_model):
        path = save_cnn_checkpoint(tmp_path / "cnn.ssckpt", tiny_model.config, tiny_model.cnn_state_dict())
        assert load_cnn_state(path)[1] is None

    def test_full_checkpoint_is_not_a_cnn_checkpoint(self, tmp_path, tiny_model):
        path = save_checkpoint(tmp_path / "model.ssckpt", tiny_model)
        with pytest.raises(CheckpointError):
            load_cnn_state(path)
