"""Label mapping, epoching, discovery, oversampling, lanes, folds and the epoch cache."""

import numpy as np
import pytest

from config import RunConfig
from conftest import FS, night_stages, psg_bytes, synthetic_epoch
from dataset import (
    arrange_subject_sequences, discover_recordings, extract_epochs, input_digest,
    lane_bounds, load_recordings, manifest_table, map_labels, oversample,
    oversample_indices, parse_sidecar_hypnogram, read_epoch_cache, split_folds,
    stack_epochs, stage_counts, trim_wake, write_epoch_cache
)
from exceptions import (
    ConfigurationError, DataPreparationError, EdfParseError, FileOperationError,
    LabelMappingError, ValidationError
)
from models import Annotation, Stage


class TestLabels:
    @pytest.mark.parametrize("label, standard, stage", [
        ("Sleep stage W", "RK", Stage.W),
        ("Sleep stage 1", "RK", Stage.N1),
        ("Sleep stage 4", "RK", Stage.N3),
        ("Sleep stage R", "RK", Stage.REM),
        ("N2", "RK", Stage.N2),
        ("Sleep stage N3", "AASM", Stage.N3),
        ("REM", "AASM", Stage.REM),
    ])
    def test_mapping(self, label, standard, stage):
        assert map_labels(label, standard) is stage

    @pytest.mark.parametrize("label", ["Sleep stage ?", "Movement time", "Sleep stage M"])
    def test_excluded_labels(self, label):
        assert map_labels(label) is None

    def test_unknown_label(self):
        with pytest.raises(LabelMappingError):
            map_labels("Sleep stage X")

    def test_unknown_standard(self):
        with pytest.raises(ConfigurationError):
            map_labels("W", "Dement")


class TestEpoching:
    def test_ninety_seconds_of_wake_at_100_hz(self):
        signal = np.arange(9000, dtype=np.float64)
        recording = extract_epochs(signal, 100, [Annotation(0.0, 90.0, "Sleep stage W")], "s1")
        assert len(recording) == 3
        assert recording.samples.shape == (3, 3000)
        np.testing.assert_array_equal(recording.samples[2], signal[6000:])
        assert list(recording.labels) == [Stage.W] * 3

    def test_excluded_epochs_leave_gaps(self):
        annotations = [
            Annotation(0.0, 30.0, "Sleep stage 2"),
            Annotation(30.0, 30.0, "Movement time"),
            Annotation(60.0, None, "Sleep stage 3"),
        ]
        recording = extract_epochs(np.zeros(3 * 30 * FS), FS, annotations, "s1")
        assert list(recording.epoch_indices) == [0, 2]
        assert list(recording.labels) == [Stage.N2, Stage.N3]

    def test_off_grid_onset(self):
        with pytest.raises(DataPreparationError):
            extract_epochs(np.zeros(3 * 30 * FS), FS, [Annotation(15.0, 30.0, "Sleep stage W")], "s1")

    def test_signal_shorter_than_annotations(self):
        with pytest.raises(DataPreparationError):
            extract_epochs(np.zeros(30 * FS), FS, [Annotation(0.0, 60.0, "Sleep stage 2")], "s1")

    def test_leading_wake_is_trimmed_to_the_margin(self, make_recording):
        recording = make_recording("s1", stages=[Stage.W] * 100 + [Stage.N2] * 5 + [Stage.W] * 3)
        trimmed = trim_wake(recording)
        assert len(trimmed) == 60 + 5 + 3
        assert trimmed.epochs[0].epoch_index == 40

    def test_recording_without_sleep(self, make_recording):
        with pytest.raises(DataPreparationError):
            trim_wake(make_recording("s1", stages=[Stage.W] * 10))


class TestSidecar:
    def test_parse(self):
        text = "epoch_index,stage\n0,W\n1,N1\n\n2,Sleep stage 2\n"
        assert parse_sidecar_hypnogram(text) == [
            Annotation(0.0, 30.0, "W"),
            Annotation(30.0, 30.0, "N1"),
            Annotation(60.0, 30.0, "Sleep stage 2"),
        ]

    def test_malformed_line(self):
        with pytest.raises(ValidationError):
            parse_sidecar_hypnogram("0,W\nbroken\n")


class TestDiscovery:
    def test_pairs_by_prefix_and_sidecar(self, tmp_path, write_night):
        write_night(tmp_path, "SC4001")
        write_night(tmp_path, "SC4011", seed=1)
        rng = np.random.default_rng(2)
        signal = np.concatenate([synthetic_epoch(Stage.N2, rng) for _ in range(3)])
        (tmp_path / "SC4021E0-PSG.edf").write_bytes(psg_bytes({"EEG Fpz-Cz": signal}))
        (tmp_path / "SC4021E0-PSG.hyp.csv").write_text("epoch_index,stage\n0,W\n1,2\n2,2\n")

        sources, unpaired = discover_recordings(tmp_path)
        assert not unpaired
        assert [s.subject_id for s in sources] == ["00", "01", "02"]
        assert sources[0].hypnogram_path.endswith("SC4001EC-Hypnogram.edf")
        assert sources[2].hypnogram_path.endswith(".hyp.csv")

        recordings, failed = load_recordings(sources, RunConfig(data_dir=str(tmp_path), fs=FS))
        assert not failed
        assert [len(r) for r in recordings] == [40, 40, 3]
        assert list(recordings[0].labels) == [int(s) for s in night_stages()]
        assert recordings[0].samples.shape == (40, 30 * FS)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileOperationError):
            discover_recordings(tmp_path / "absent")

    def test_failures_are_collected_unless_strict(self, tmp_path, write_night):
        write_night(tmp_path, "SC4001")
        (tmp_path / "SC4031E0-PSG.edf").write_bytes(b"not an edf file")
        sources, _ = discover_recordings(tmp_path)

        recordings, failed = load_recordings(sources, RunConfig(data_dir=str(tmp_path)))
        assert len(recordings) == 1
        assert list(failed) == ["SC4031E0-PSG.edf"]

        with pytest.raises(EdfParseError):
            load_recordings(sources, RunConfig(data_dir=str(tmp_path), strict=True))

    def test_sampling_rate_must_match_config(self, tmp_path, write_night):
        write_night(tmp_path, "SC4001")
        sources, _ = discover_recordings(tmp_path)
        with pytest.raises(DataPreparationError):
            load_recordings(sources, RunConfig(data_dir=str(tmp_path), fs=100, strict=True))

    def test_digest_follows_file_contents(self, tmp_path, write_night):
        write_night(tmp_path, "SC4001")
        config = RunConfig(data_dir=str(tmp_path))
        sources, _ = discover_recordings(tmp_path)
        before = input_digest(sources, config)
        assert input_digest(sources, config) == before
        write_night(tmp_path, "SC4001", seed=9)
        assert input_digest(sources, config) != before


class TestOversampling:
    def test_every_stage_reaches_the_majority_count(self):
        labels = np.array([0] * 2 + [1] * 1 + [2] * 4 + [3] * 4 + [4] * 4)
        indices = oversample_indices(labels, np.random.default_rng(0))
        assert indices.size == 20
        np.testing.assert_array_equal(np.bincount(labels[indices]), [4, 4, 4, 4, 4])
        # Minority classes are whole copies
        np.testing.assert_array_equal(np.bincount(indices[labels[indices] == 0]), [2, 2])

    def test_remainder_and_seed(self):
        labels = np.array([0] * 3 + [1] * 7 + [2, 3, 4])
        x = np.arange(labels.size)[:, None].astype(float)
        x1, y1 = oversample(x, labels, seed=5)
        x2, y2 = oversample(x, labels, seed=5)
        np.testing.assert_array_equal(np.bincount(y1), [7] * 5)
        np.testing.assert_array_equal(x1, x2)
        np.testing.assert_array_equal(labels[x1[:, 0].astype(int)], y1)

    def test_random_histograms_balance_and_keep_every_epoch(self):
        rng = np.random.default_rng(42)
        for trial in range(1000):
            counts = rng.integers(1, 60, size=5)
            labels = rng.permutation(np.repeat(np.arange(5), counts))
            indices = oversample_indices(labels, np.random.default_rng(trial))

            np.testing.assert_array_equal(np.bincount(labels[indices], minlength=5), [counts.max()] * 5)
            # Every original epoch survives at least as often as it occurred
            assert np.all(np.bincount(indices, minlength=labels.size) >= 1)
            copies = np.bincount(indices, minlength=labels.size)
            for c in range(5):
                whole = counts.max() // counts[c]
                assert copies[labels == c].min() >= whole

    def test_missing_stage(self):
        with pytest.raises(DataPreparationError):
            oversample_indices(np.array([0, 1, 2, 3]), np.random.default_rng(0))

    def test_stack_skips_unlabelled(self, make_recording):
        x, y = stack_epochs([make_recording("a", stages=night_stages(10)), make_recording("b", labelled=False)])
        assert x.shape == (10, 30 * FS)
        assert y.min() >= 0


class TestSequences:
    def test_thousand_epochs_give_four_full_steps(self, make_recording):
        recording = make_recording("a", stages=[Stage.N2] * 1000)
        batches = arrange_subject_sequences(recording, n_lanes=10, seq_len=25)
        assert [b.step for b in batches] == [0, 1, 2, 3]
        for b in batches:
            assert b.epochs.shape == (10, 25, 30 * FS)
            np.testing.assert_array_equal(b.lane_ids, np.arange(10))
        np.testing.assert_array_equal(batches[1].epoch_indices[3], np.arange(325, 350))

    def test_last_lane_takes_the_remainder(self, make_recording):
        assert lane_bounds(1003, 10)[-1] == (900, 1003)
        batches = arrange_subject_sequences(make_recording("a", stages=[Stage.N2] * 1003), 10, 25)
        tail = [b for b in batches if b.step == 4]
        assert len(tail) == 1
        np.testing.assert_array_equal(tail[0].lane_ids, [9])
        np.testing.assert_array_equal(tail[0].epoch_indices[0], [1000, 1001, 1002])

    def test_single_epoch_tail_joins_the_previous_window(self, make_recording):
        batches = arrange_subject_sequences(make_recording("a", stages=[Stage.N2] * 26), 1, 25)
        assert len(batches) == 1
        assert batches[0].labels.shape == (1, 26)

    def test_too_few_epochs_for_lanes(self, make_recording):
        with pytest.raises(DataPreparationError):
            arrange_subject_sequences(make_recording("a", stages=[Stage.N2] * 5), 10, 25)


class TestFolds:
    def test_twenty_subjects_leave_one_out(self):
        folds = split_folds([f"s{i:02d}" for i in range(20)], 20)
        assert len(folds) == 20
        assert all(len(f.test_subjects) == 1 for f in folds)
        assert sorted(s for f in folds for s in f.test_subjects) == [f"s{i:02d}" for i in range(20)]

    def test_sixty_two_subjects_in_thirty_one_folds(self):
        subjects = [f"s{i:02d}" for i in range(62)]
        folds = split_folds(subjects, 31, seed=3)
        assert all(len(f.test_subjects) == 2 for f in folds)
        for f in folds:
            assert not set(f.train_subjects) & set(f.test_subjects)
            assert len(f.train_subjects) == 60

    def test_nights_of_one_subject_share_a_fold(self):
        folds = split_folds(["a", "a", "b", "c"], 3)
        assert sorted(s for f in folds for s in f.test_subjects) == ["a", "b", "c"]

    @pytest.mark.parametrize("k", [1, 5])
    def test_invalid_k(self, k):
        with pytest.raises(ValidationError):
            split_folds(["a", "b", "c"], k)


class TestCacheAndCounts:
    def test_cache_round_trip(self, tmp_path, make_recording):
        recordings = [make_recording("a", stages=night_stages(8)), make_recording("b", seed=1, labelled=False)]
        path = write_epoch_cache(tmp_path / "epochs.cache", recordings, {"digest": "abc"})
        loaded, metadata = read_epoch_cache(path)

        assert metadata["digest"] == "abc"
        assert [(r.subject_id, len(r)) for r in loaded] == [("a", 8), ("b", 40)]
        for original, restored in zip(recordings, loaded):
            np.testing.assert_array_equal(original.samples, restored.samples)
            np.testing.assert_array_equal(original.labels, restored.labels)
            assert restored.fs == FS

    def test_stage_counts_and_manifest(self, make_recording):
        recordings = [make_recording("a", stages=[Stage.W, Stage.N2, Stage.N2]), make_recording("b", stages=[Stage.REM])]
        assert stage_counts(recordings) == {"W": 1, "N1": 0, "N2": 2, "N3": 0, "REM": 1, "Total": 4}
        table = manifest_table(recordings)
        assert list(table["subject_id"]) == ["a", "b", "Total"]
        assert table.iloc[-1]["Total"] == 4
