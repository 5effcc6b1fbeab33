"""Confusion matrices, scoring metrics and report files."""

import json

import numpy as np
import pandas as pd
import pytest
from openpyxl import load_workbook

from exceptions import MetricsError, ShapeError, ValidationError
from excel_helpers import write_metrics_workbook
from metrics import (
    accuracy, confusion, format_report, kappa, metrics_report, per_class_and_mf1,
    report_to_dataframe, save_report
)
from models import ConfusionMatrix

PERCENT_TOLERANCE = 0.05
KAPPA_TOLERANCE = 0.005

SLEEP_EDF_COUNTS = np.array([
    [5433, 572, 107, 13, 102],
    [452, 2802, 827, 4, 639],
    [185, 906, 26786, 1158, 499],
    [18, 4, 1552, 6077, 0],
    [132, 356, 533, 1, 9442],
])

MASS_COUNTS = np.array([
    [6614, 745, 181, 81, 306],
    [295, 1406, 631, 30, 442],
    [391, 618, 14542, 1473, 775],
    [29, 9, 291, 5370, 4],
    [360, 457, 419, 7, 6474],
])

CNN_ONLY_COUNTS = np.array([
    [5215, 709, 94, 19, 190],
    [468, 2582, 747, 11, 916],
    [241, 1846, 24140, 2435, 872],
    [19, 3, 472, 7156, 1],
    [227, 1181, 383, 5, 8668],
])


def percent(values):
    return 100 * np.asarray(values)


class TestPublishedMatrices:
    def test_sleep_edf_fpz_cz(self):
        report = metrics_report(ConfusionMatrix(SLEEP_EDF_COUNTS))
        per_class = report.per_class
        np.testing.assert_allclose(
            percent([m.precision for m in per_class]),
            [87.3473, 60.3879, 89.8708, 83.7860, 88.3917], atol=PERCENT_TOLERANCE
        )
        np.testing.assert_allclose(
            percent([m.recall for m in per_class]),
            [87.2491, 59.3141, 90.6955, 79.4275, 90.2332], atol=PERCENT_TOLERANCE
        )
        np.testing.assert_allclose(
            percent([m.f1 for m in per_class]),
            [87.2981, 59.8462, 90.2813, 81.5486, 89.3029], atol=PERCENT_TOLERANCE
        )
        assert 100 * report.accuracy == pytest.approx(86.2457, abs=PERCENT_TOLERANCE)
        assert 100 * report.macro_f1 == pytest.approx(81.6554, abs=PERCENT_TOLERANCE)
        assert report.kappa == pytest.approx(0.79692, abs=KAPPA_TOLERANCE)
        assert report.n_epochs == int(SLEEP_EDF_COUNTS.sum())
        assert not report.degenerate_classes

    def test_rounded_table_columns(self):
        cm = ConfusionMatrix(SLEEP_EDF_COUNTS)
        frame = report_to_dataframe(metrics_report(cm), cm)
        assert list(frame["PR"]) == [87.3, 60.4, 89.9, 83.8, 88.4]
        assert list(frame["RE"]) == [87.2, 59.3, 90.7, 79.4, 90.2]
        assert list(frame["F1"]) == [87.3, 59.8, 90.3, 81.5, 89.3]
        assert frame.loc["N2", "N3"] == 1158

    def test_mass_c4_a1(self):
        per_class, _ = per_class_and_mf1(MASS_COUNTS)
        np.testing.assert_allclose(
            percent([m.f1 for m in per_class]),
            [84.7080, 46.5640, 85.8873, 84.8073, 82.3769], atol=PERCENT_TOLERANCE
        )
        assert 100 * accuracy(MASS_COUNTS) == pytest.approx(82.0167, abs=PERCENT_TOLERANCE)
        assert kappa(MASS_COUNTS) == pytest.approx(0.75701, abs=KAPPA_TOLERANCE)

    def test_cnn_only_n1(self):
        per_class, _ = per_class_and_mf1(CNN_ONLY_COUNTS)
        assert 100 * per_class[1].f1 == pytest.approx(46.7542, abs=PERCENT_TOLERANCE)


class TestConfusion:
    def test_counts_rows_by_expert(self):
        cm = confusion([0, 0, 1, 4, 4], [0, 1, 1, 4, 2])
        assert cm.counts[0, 1] == 1
        assert cm.counts[4, 2] == 1
        assert cm.total == 5
        assert (cm + cm).total == 10

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            confusion([0, 1], [0])

    def test_label_out_of_range(self):
        with pytest.raises(ValidationError):
            confusion([0, 5], [0, 1])

    def test_empty_inputs_give_zero_matrix(self):
        cm = confusion([], [])
        assert cm.counts.shape == (5, 5)
        with pytest.raises(MetricsError):
            accuracy(cm)

    def test_non_square_matrix(self):
        with pytest.raises(ShapeError):
            accuracy(np.ones((2, 3)))


class TestDegenerateCases:
    def test_never_predicted_stage_scores_zero(self):
        y_true = [0, 1, 2, 3, 4, 1]
        y_pred = [0, 0, 2, 3, 4, 2]
        report = metrics_report(confusion(y_true, y_pred))
        n1 = report.per_class[1]
        assert (n1.precision, n1.recall, n1.f1, n1.degenerate) == (0.0, 0.0, 0.0, True)
        assert report.degenerate_classes == ["N1"]
        assert report.macro_f1 == pytest.approx(np.mean([m.f1 for m in report.per_class]))

    def test_kappa_undefined_for_constant_raters(self):
        cm = confusion([0, 0, 0], [0, 0, 0])
        with pytest.raises(MetricsError):
            kappa(cm)
        report = metrics_report(cm)
        assert report.kappa is None
        assert report.accuracy == 1.0
        assert "kappa: undefined" in format_report(report, cm)

    def test_perfect_agreement(self):
        labels = [0, 1, 2, 3, 4, 2]
        report = metrics_report(confusion(labels, labels))
        assert report.kappa == pytest.approx(1.0)
        assert report.macro_f1 == pytest.approx(1.0)


class TestReportFiles:
    def test_save_report(self, tmp_path):
        cm = ConfusionMatrix(SLEEP_EDF_COUNTS)
        metrics_path, confusion_path = save_report(metrics_report(cm), cm, tmp_path / "reports")

        document = json.loads(metrics_path.read_text())
        assert document["accuracy"] == pytest.approx(0.862457, abs=5e-4)
        assert document["confusion"]["counts"][0][0] == 5433
        assert len(document["per_class"]) == 5

        table = pd.read_csv(confusion_path, index_col=0)
        assert table.loc["W", "W"] == 5433
        assert table.loc["REM", "F1"] == 89.3

    def test_workbook(self, tmp_path):
        cm = ConfusionMatrix(SLEEP_EDF_COUNTS)
        report = metrics_report(cm)
        path = write_metrics_workbook(report, cm, [], tmp_path / "metrics.xlsx", cnn_only=report)

        workbook = load_workbook(path)
        assert workbook.sheetnames == ["Pooled", "Summary"]
        pooled = workbook["Pooled"]
        assert pooled["A2"].value == "W"
        assert pooled["B2"].value == 5433
        summary = workbook["Summary"]
        assert summary["A3"].value == "ACC"
        assert summary["B3"].value == pytest.approx(86.2, abs=0.05)
        assert summary["C5"].value == pytest.approx(0.80, abs=0.005)
