"""Hypnogram rendering as text and as a deterministic SVG step plot."""

import io
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import matplotlib
matplotlib.use("Agg")
import numpy as np
from matplotlib import rc_context
from matplotlib.figure import Figure

from constants import HYPNOGRAM_HASH_SALT, HYPNOGRAM_ORDER, STAGE_CHARS, STAGE_NAMES
from date_helpers import epochs_to_hours
from exceptions import FileOperationError, ValidationError
from models import Stage

logger = logging.getLogger(__name__)

StageToken = Union[Stage, int, str]


def to_stages(tokens: Sequence[StageToken]) -> List[Stage]:
    """Coerce stage names, text characters or class indices to stages.

    Raises:
        ValidationError: On an empty sequence or an unknown token
    """
    if len(tokens) == 0:
        raise ValidationError("stages", 0, "hypnogram needs at least one epoch")
    stages = []
    for token in tokens:
        if isinstance(token, Stage):
            stages.append(token)
        elif isinstance(token, (int, np.integer)) and 0 <= int(token) < len(STAGE_NAMES):
            stages.append(Stage(int(token)))
        elif isinstance(token, str) and token in STAGE_NAMES:
            stages.append(Stage.from_label(token))
        elif isinstance(token, str) and token in STAGE_CHARS:
            stages.append(Stage(STAGE_CHARS.index(token)))
        else:
            raise ValidationError("stage", token, f"unknown stage token; expected one of {', '.join(STAGE_NAMES)}")
    return stages


def render_text(tokens: Sequence[StageToken]) -> str:
    """One character per epoch: W, 1, 2, 3 or R."""
    return "".join(stage.char for stage in to_stages(tokens))


def stage_steps(tokens: Sequence[StageToken]) -> Tuple[np.ndarray, np.ndarray]:
    """(plot level per epoch, epoch edges in hours); level 0 is W, 4 is N3."""
    stages = to_stages(tokens)
    levels = np.array([HYPNOGRAM_ORDER.index(s.label) for s in stages], dtype=np.float64)
    edges = epochs_to_hours(np.arange(len(stages) + 1))
    return levels, edges


def render_svg(tokens: Sequence[StageToken], title: Optional[str] = None) -> bytes:
    """Step plot with W at the top and N3 at the bottom over a time axis in hours.

    Output bytes depend only on the stages and title.
    """
    levels, edges = stage_steps(tokens)

    with rc_context({"svg.hashsalt": HYPNOGRAM_HASH_SALT, "svg.fonttype": "path", "font.size": 8}):
        figure = Figure(figsize=(8, 2.5))
        ax = figure.add_subplot(1, 1, 1)
        ax.stairs(levels, edges, baseline=None, color="black", lw=1)
        ax.set_yticks(range(len(HYPNOGRAM_ORDER)))
        ax.set_yticklabels(HYPNOGRAM_ORDER)
        ax.set_ylim(len(HYPNOGRAM_ORDER) - 0.5, -0.5)
        ax.set_xlim(0, edges[-1])
        ax.set_xlabel("Time (hours)")
        ax.set_ylabel("Stage")
        ax.spines[["right", "top"]].set_visible(False)
        if title:
            ax.set_title(title)
        figure.tight_layout()
        buffer = io.BytesIO()
        figure.savefig(buffer, format="svg", metadata={"Date": None})
    return buffer.getvalue()


def render_hypnogram(
    tokens: Sequence[StageToken],
    text_path: Union[str, Path, None] = None,
    svg_path: Union[str, Path, None] = None,
    title: Optional[str] = None
) -> Tuple[str, bytes]:
    """Render both forms, writing them when paths are given.

    Raises:
        ValidationError: On an empty sequence or unknown stage token
        FileOperationError: If an output cannot be written
    """
    text = render_text(tokens)
    svg = render_svg(tokens, title)
    for path, payload in ((text_path, (text + "\n").encode("utf-8")), (svg_path, svg)):
        if path is None:
            continue
        try:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_bytes(payload)
        except OSError as e:
            raise FileOperationError("write", str(path), str(e)) from e
    logger.debug(f"Rendered hypnogram of {len(text)} epochs")
    return text, svg
