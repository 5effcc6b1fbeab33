"""Date and time utilities for the sleep stager.

EDF stores its start date as ``dd.mm.yy`` and start time as ``hh.mm.ss``;
two-digit years 85-99 belong to the 1900s, the rest to the 2000s.
"""

import logging
from datetime import datetime
from typing import Optional

from constants import EDF_YEAR_PIVOT, EPOCH_SECONDS, TIMESTAMP_FORMAT

logger = logging.getLogger(__name__)


def parse_edf_datetime(date_text: str, time_text: str) -> Optional[datetime]:
    """Combine EDF start date and time fields.

    Args:
        date_text: Date field, e.g. "24.04.89"
        time_text: Time field, e.g. "16.13.00"

    Returns:
        Datetime, or None if either field is malformed
    """
    try:
        day, month, year = (int(p) for p in date_text.strip().split("."))
        hour, minute, second = (int(p) for p in time_text.strip().split("."))
        year += 1900 if year >= EDF_YEAR_PIVOT else 2000
        return datetime(year, month, day, hour, minute, second)
    except ValueError:
        logger.warning(f"Invalid EDF start date/time: {date_text!r} {time_text!r}")
        return None


def epochs_to_hours(n_epochs: int) -> float:
    return n_epochs * EPOCH_SECONDS / 3600.0


def get_current_timestamp(format_str: str = TIMESTAMP_FORMAT) -> str:
    """Get current timestamp as formatted string.

    Args:
        format_str: strftime format string

    Returns:
        Formatted timestamp string
    """
    return datetime.now().strftime(format_str)
