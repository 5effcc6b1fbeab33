"""Excel workbook output for evaluation metrics.

This module builds the metrics workbook: the pooled confusion matrix with
per-class PR/RE/F1 columns, the headline metrics, and one row per fold.
"""

import logging
from pathlib import Path
from typing import Any, List, Optional, Sequence, Union

from openpyxl import Workbook
from openpyxl.formatting.rule import DataBarRule
from openpyxl.styles import Alignment, Font, PatternFill
from openpyxl.utils import get_column_letter
from openpyxl.worksheet.worksheet import Worksheet

from constants import (
    EXCEL_DATA_BAR_COLOR, EXCEL_HEADER_COLOR, EXCEL_HEADER_FONT_COLOR,
    EXCEL_MAX_COLUMN_WIDTH, EXCEL_MIN_COLUMN_WIDTH, METRIC_COLUMNS
)
from exceptions import FileOperationError
from metrics import report_to_dataframe
from models import ConfusionMatrix, FoldResult, MetricsReport

logger = logging.getLogger(__name__)


def get_header_fill() -> PatternFill:
    """Get the standard header fill pattern.

    Returns:
        PatternFill for header cells (light blue background)
    """
    return PatternFill(
        start_color=EXCEL_HEADER_COLOR,
        end_color=EXCEL_HEADER_COLOR,
        fill_type="solid"
    )


def get_header_font() -> Font:
    return Font(bold=True, color=EXCEL_HEADER_FONT_COLOR)


def apply_header_style(worksheet: Worksheet, row_num: int) -> None:
    """Apply header styling to a row.

    Args:
        worksheet: Worksheet to modify
        row_num: Row number to style (1-based)
    """
    fill, font = get_header_fill(), get_header_font()
    for cell in worksheet[row_num]:
        cell.fill = fill
        cell.font = font
        cell.alignment = Alignment(horizontal="center", vertical="center")


def style_label_column(worksheet: Worksheet, start_row: int, end_row: int) -> None:
    """Bold the first column of a row range (row labels)."""
    font = get_header_font()
    for row in range(start_row, end_row + 1):
        cell = worksheet.cell(row=row, column=1)
        cell.fill = get_header_fill()
        cell.font = font
        cell.alignment = Alignment(horizontal="left", vertical="center")


def auto_adjust_column_widths(
    worksheet: Worksheet,
    min_width: int = EXCEL_MIN_COLUMN_WIDTH,
    max_width: int = EXCEL_MAX_COLUMN_WIDTH
) -> None:
    """Auto-adjust column widths based on content.

    Args:
        worksheet: Worksheet to modify
        min_width: Minimum column width
        max_width: Maximum column width
    """
    for column_cells in worksheet.columns:
        length = max(len(str(cell.value if cell.value is not None else "")) for cell in column_cells)
        width = max(min(length + 2, max_width), min_width)
        worksheet.column_dimensions[column_cells[0].column_letter].width = width


def add_data_bars(
    worksheet: Worksheet,
    column_letter: str,
    start_row: int,
    end_row: int,
    min_value: float = 0,
    max_value: float = 100,
    color: str = EXCEL_DATA_BAR_COLOR
) -> None:
    """Add data bars to a column range.

    Args:
        worksheet: Worksheet to modify
        column_letter: Column letter (e.g., 'D')
        start_row: Starting row number (1-based)
        end_row: Ending row number (1-based)
        min_value: Minimum value for data bar scale
        max_value: Maximum value for data bar scale
        color: Hex color code for data bars
    """
    if start_row > end_row:
        logger.warning(f"Invalid row range for data bars: {start_row} to {end_row}")
        return
    rule = DataBarRule(
        start_type="num",
        start_value=min_value,
        end_type="num",
        end_value=max_value,
        color=color,
        showValue=True,
        minLength=0,
        maxLength=100
    )
    worksheet.conditional_formatting.add(f"{column_letter}{start_row}:{column_letter}{end_row}", rule)


def _percent(value: Optional[float]) -> Any:
    return "" if value is None else round(100 * value, 1)


def _write_pooled_sheet(worksheet: Worksheet, report: MetricsReport, cm: ConfusionMatrix) -> None:
    frame = report_to_dataframe(report, cm)
    worksheet.append(["Expert \\ Predicted", *frame.columns])
    for stage, row in frame.iterrows():
        worksheet.append([stage, *row.tolist()])
    apply_header_style(worksheet, 1)
    last = frame.shape[0] + 1
    style_label_column(worksheet, 2, last)
    f1_column = get_column_letter(frame.columns.get_loc(METRIC_COLUMNS[2]) + 2)
    add_data_bars(worksheet, f1_column, 2, last)


def _write_summary_sheet(
    worksheet: Worksheet,
    report: MetricsReport,
    cnn_only: Optional[MetricsReport]
) -> None:
    worksheet.append(["Metric", "Sequence model", "CNN only"])
    rows = [
        ("Epochs", report.n_epochs, cnn_only.n_epochs if cnn_only else ""),
        ("ACC", _percent(report.accuracy), _percent(cnn_only.accuracy) if cnn_only else ""),
        ("MF1", _percent(report.macro_f1), _percent(cnn_only.macro_f1) if cnn_only else ""),
        (
            "kappa",
            "" if report.kappa is None else round(report.kappa, 2),
            "" if cnn_only is None or cnn_only.kappa is None else round(cnn_only.kappa, 2),
        ),
    ]
    for row in rows:
        worksheet.append(list(row))
    apply_header_style(worksheet, 1)
    style_label_column(worksheet, 2, len(rows) + 1)


def _write_folds_sheet(worksheet: Worksheet, folds: Sequence[FoldResult]) -> None:
    worksheet.append(["Fold", "Test subjects", "Test epochs", "ACC", "MF1", "kappa"])
    for result in folds:
        worksheet.append([
            result.fold.index,
            ", ".join(result.fold.test_subjects),
            result.report.n_epochs,
            _percent(result.report.accuracy),
            _percent(result.report.macro_f1),
            "" if result.report.kappa is None else round(result.report.kappa, 2),
        ])
    apply_header_style(worksheet, 1)
    if folds:
        add_data_bars(worksheet, "D", 2, len(folds) + 1)


def write_metrics_workbook(
    report: MetricsReport,
    cm: ConfusionMatrix,
    folds: Sequence[FoldResult],
    path: Union[str, Path],
    cnn_only: Optional[MetricsReport] = None
) -> Path:
    """Write the metrics workbook.

    Args:
        report: Pooled metrics
        cm: Pooled confusion matrix
        folds: Per-fold results (may be empty)
        path: Destination .xlsx file
        cnn_only: Pooled metrics of the CNN-only baseline

    Returns:
        Path of the written workbook

    Raises:
        FileOperationError: If the workbook cannot be saved
    """
    workbook = Workbook()
    pooled = workbook.active
    pooled.title = "Pooled"
    _write_pooled_sheet(pooled, report, cm)
    _write_summary_sheet(workbook.create_sheet("Summary"), report, cnn_only)
    sheets: List[Worksheet] = [pooled, workbook["Summary"]]
    if folds:
        folds_sheet = workbook.create_sheet("Folds")
        _write_folds_sheet(folds_sheet, folds)
        sheets.append(folds_sheet)
    for sheet in sheets:
        auto_adjust_column_widths(sheet)

    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        workbook.save(path)
    except OSError as e:
        raise FileOperationError("write", str(path), str(e)) from e
    logger.info(f"Saved metrics workbook to {path}")
    return path
