"""EDF and EDF+ reading and writing.

Layout:
    - 256-byte fixed header of ASCII fields
    - 256 bytes per signal, stored field-major (all labels, then all
      transducers, ...)
    - data records of 16-bit little-endian two's-complement samples,
      signal after signal within each record

EDF+ annotations live in the "EDF Annotations" signal as time-stamped
annotation lists (TALs): ``+onset[0x15 duration]0x14 label 0x14 ... 0x00``.
"""

import logging
import re
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from constants import (
    EDF_ANNOTATION_LABEL, EDF_FIXED_HEADER_BYTES, EDF_HEADER_FIELDS,
    EDF_SAMPLE_BYTES, EDF_SIGNAL_FIELDS, EDF_SIGNAL_HEADER_BYTES,
    EDF_TEXT_ENCODING, TAL_DURATION_SEPARATOR, TAL_LABEL_TERMINATOR,
    TAL_ONSET_PATTERN, TAL_TERMINATOR
)
from exceptions import (
    AnnotationError, EdfParseError, FileOperationError, ShapeError,
    ValidationError
)
from models import Annotation, EdfHeader, EdfSignalHeader

logger = logging.getLogger(__name__)

INT16_MIN, INT16_MAX = -32768, 32767

_INT_FIELDS = {"header_bytes", "n_records", "n_signals", "digital_min", "digital_max", "samples_per_record"}
_FLOAT_FIELDS = {"record_duration", "physical_min", "physical_max"}
_ONSET_RE = re.compile(TAL_ONSET_PATTERN)


# ============================================================================
# Field codecs
# ============================================================================

def format_edf_number(value: float, width: int = 8) -> str:
    """Shortest fixed-point text of ``value`` fitting in ``width`` characters.

    Formatting is deterministic and idempotent: parsing the text and
    formatting again yields the same text.

    Raises:
        ValidationError: If even the integer part does not fit
    """
    if float(value).is_integer() and len(str(int(value))) <= width:
        return str(int(value))
    for decimals in range(width, -1, -1):
        text = f"{value:.{decimals}f}"
        if "." in text:
            text = text.rstrip("0").rstrip(".")
        if text in ("-0", ""):
            text = "0"
        if len(text) <= width:
            return text
    raise ValidationError("edf_number", value, f"does not fit in {width} characters")


def _encode_field(text: str, width: int, name: str) -> bytes:
    raw = text.encode(EDF_TEXT_ENCODING)
    if len(raw) > width:
        raise ValidationError(name, text, f"longer than the {width}-byte field")
    return raw.ljust(width, b" ")


def _decode_field(data: bytes, offset: int, width: int, name: str) -> str:
    raw = data[offset:offset + width]
    if len(raw) < width:
        raise EdfParseError(offset, f"file ends inside header field '{name}'")
    return raw.decode(EDF_TEXT_ENCODING).rstrip(" ")


def _to_number(text: str, offset: int, name: str) -> Union[int, float]:
    try:
        if name in _INT_FIELDS:
            return int(text.strip())
        return float(text.strip())
    except ValueError:
        raise EdfParseError(offset, f"non-numeric value {text!r} in field '{name}'") from None


def _field_text(value: Union[str, int, float], name: str, width: int) -> str:
    if name in _INT_FIELDS:
        return str(int(value))
    if name in _FLOAT_FIELDS:
        return format_edf_number(float(value), width)
    return str(value)


# ============================================================================
# Parsing
# ============================================================================

def parse_edf(data: bytes) -> Tuple[EdfHeader, List[np.ndarray]]:
    """Decode an EDF/EDF+ file.

    Args:
        data: Complete file contents

    Returns:
        (header, per-signal digital samples as int16 [n_records, spr])

    Raises:
        EdfParseError: On truncation, inconsistent header size or a
            non-numeric numeric field, reporting the byte offset
    """
    if len(data) < EDF_FIXED_HEADER_BYTES:
        raise EdfParseError(len(data), f"file shorter than the {EDF_FIXED_HEADER_BYTES}-byte fixed header")

    values: Dict[str, Union[str, int, float]] = {}
    offsets: Dict[str, int] = {}
    offset = 0
    for name, width in EDF_HEADER_FIELDS:
        text = _decode_field(data, offset, width, name)
        offsets[name] = offset
        values[name] = _to_number(text, offset, name) if name in _INT_FIELDS | _FLOAT_FIELDS else text
        offset += width

    n_signals = int(values["n_signals"])
    header_bytes = int(values["header_bytes"])
    if n_signals < 1:
        raise EdfParseError(offsets["n_signals"], f"signal count {n_signals} must be positive")
    expected_bytes = EDF_FIXED_HEADER_BYTES + EDF_SIGNAL_HEADER_BYTES * n_signals
    if header_bytes != expected_bytes:
        raise EdfParseError(
            offsets["header_bytes"],
            f"header_bytes {header_bytes} inconsistent with {n_signals} signals (expected {expected_bytes})"
        )
    if len(data) < header_bytes:
        raise EdfParseError(len(data), f"file ends inside the {header_bytes}-byte header")

    signal_values: List[Dict[str, Union[str, int, float]]] = [{} for _ in range(n_signals)]
    for name, width in EDF_SIGNAL_FIELDS:
        for i in range(n_signals):
            text = _decode_field(data, offset, width, name)
            signal_values[i][name] = (
                _to_number(text, offset, name) if name in _INT_FIELDS | _FLOAT_FIELDS else text
            )
            offset += width

    signals = [EdfSignalHeader(**sv) for sv in signal_values]
    signal_base = EDF_FIXED_HEADER_BYTES
    for i, sig in enumerate(signals):
        if sig.physical_max == sig.physical_min:
            raise EdfParseError(signal_base + 104 * n_signals + 8 * i, f"signal {i} has an empty physical range")
        if sig.digital_max == sig.digital_min:
            raise EdfParseError(signal_base + 120 * n_signals + 8 * i, f"signal {i} has an empty digital range")
        if sig.samples_per_record < 1:
            raise EdfParseError(signal_base + 216 * n_signals + 8 * i, f"signal {i} has no samples per record")

    samples_per_record = [s.samples_per_record for s in signals]
    record_samples = sum(samples_per_record)
    record_bytes = record_samples * EDF_SAMPLE_BYTES
    available = len(data) - header_bytes
    n_records = int(values["n_records"])
    if n_records < 0:
        n_records = available // record_bytes
        logger.debug(f"Record count unknown, inferred {n_records} from file size")
    if available < n_records * record_bytes:
        raise EdfParseError(
            header_bytes + (available // record_bytes) * record_bytes,
            f"file truncated: {n_records} records of {record_bytes} bytes announced, "
            f"{available} bytes present"
        )
    if available > n_records * record_bytes:
        logger.warning(f"Ignoring {available - n_records * record_bytes} trailing bytes after the last record")

    body = np.frombuffer(data, dtype="<i2", count=n_records * record_samples, offset=header_bytes)
    body = body.reshape(n_records, record_samples)
    bounds = np.cumsum([0] + samples_per_record)
    digital = [body[:, bounds[i]:bounds[i + 1]].astype(np.int16) for i in range(n_signals)]

    header = EdfHeader(
        version=str(values["version"]),
        patient=str(values["patient"]),
        recording=str(values["recording"]),
        start_date=str(values["start_date"]),
        start_time=str(values["start_time"]),
        header_bytes=header_bytes,
        reserved=str(values["reserved"]),
        n_records=int(values["n_records"]),
        record_duration=float(values["record_duration"]),
        signals=signals,
    )
    return header, digital


def read_edf(path: Union[str, Path]) -> Tuple[EdfHeader, List[np.ndarray]]:
    """Read and parse an EDF file from disk.

    Raises:
        FileOperationError: If the file cannot be read
        EdfParseError: If the contents are malformed
    """
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise FileOperationError("read", str(path), str(e)) from e
    logger.debug(f"Parsing {path} ({len(data)} bytes)")
    return parse_edf(data)


# ============================================================================
# Writing
# ============================================================================

def make_header(
    signals: Sequence[EdfSignalHeader],
    n_records: int,
    record_duration: float = 1.0,
    **fields: str
) -> EdfHeader:
    """EdfHeader with a consistent header size."""
    return EdfHeader(
        header_bytes=EDF_FIXED_HEADER_BYTES + EDF_SIGNAL_HEADER_BYTES * len(signals),
        n_records=n_records,
        record_duration=record_duration,
        signals=list(signals),
        **fields
    )


def write_edf(header: EdfHeader, digital: Sequence[np.ndarray]) -> bytes:
    """Encode a header and digital samples as EDF bytes.

    Args:
        header: Header to write; header_bytes is recomputed
        digital: Per-signal samples, [n_records, spr] or flat

    Returns:
        File contents

    Raises:
        ShapeError: If the sample arrays disagree with the header
        ValidationError: If a field or sample does not fit its slot
    """
    n_signals = len(header.signals)
    if n_signals != len(digital) or n_signals == 0:
        raise ShapeError("write_edf", [(n_signals,), (len(digital),)], "one sample array per signal")

    n_records = None
    blocks = []
    for sig, samples in zip(header.signals, digital):
        samples = np.asarray(samples)
        if samples.size % sig.samples_per_record:
            raise ShapeError("write_edf", [samples.shape, (sig.samples_per_record,)], f"signal '{sig.label}'")
        block = samples.reshape(-1, sig.samples_per_record)
        if n_records is None:
            n_records = block.shape[0]
        elif block.shape[0] != n_records:
            raise ShapeError("write_edf", [block.shape, (n_records,)], "signals disagree on record count")
        if block.size and (block.min() < INT16_MIN or block.max() > INT16_MAX):
            raise ValidationError("samples", sig.label, "outside the 16-bit range")
        blocks.append(block)
    if header.n_records not in (-1, n_records):
        raise ValidationError("n_records", header.n_records, f"data holds {n_records} records")

    fixed = dict(
        version=header.version,
        patient=header.patient,
        recording=header.recording,
        start_date=header.start_date,
        start_time=header.start_time,
        header_bytes=EDF_FIXED_HEADER_BYTES + EDF_SIGNAL_HEADER_BYTES * n_signals,
        reserved=header.reserved,
        n_records=header.n_records,
        record_duration=header.record_duration,
        n_signals=n_signals,
    )
    parts = [
        _encode_field(_field_text(fixed[name], name, width), width, name)
        for name, width in EDF_HEADER_FIELDS
    ]
    for name, width in EDF_SIGNAL_FIELDS:
        for sig in header.signals:
            parts.append(_encode_field(_field_text(getattr(sig, name), name, width), width, name))

    body = np.concatenate(blocks, axis=1).astype("<i2")
    parts.append(body.tobytes())
    return b"".join(parts)


# ============================================================================
# Calibration
# ============================================================================

def digital_to_physical(digital: np.ndarray, signal: EdfSignalHeader) -> np.ndarray:
    """Linear map taking [digital_min, digital_max] onto [physical_min, physical_max].

    Values outside the digital range are mapped, not clipped.

    Raises:
        ValidationError: If the digital range is empty
    """
    span = signal.digital_max - signal.digital_min
    if span == 0:
        raise ValidationError("digital range", signal.label, "digital_max equals digital_min")
    gain = (signal.physical_max - signal.physical_min) / span
    return (np.asarray(digital, dtype=np.float64) - signal.digital_min) * gain + signal.physical_min


def physical_to_digital(physical: np.ndarray, signal: EdfSignalHeader) -> np.ndarray:
    """Inverse calibration, rounded and clipped to the digital range."""
    gain = (signal.physical_max - signal.physical_min) / (signal.digital_max - signal.digital_min)
    digital = np.round((np.asarray(physical, dtype=np.float64) - signal.physical_min) / gain + signal.digital_min)
    return np.clip(digital, signal.digital_min, signal.digital_max).astype(np.int16)


# ============================================================================
# EDF+ annotations
# ============================================================================

def _format_seconds(value: float, signed: bool) -> str:
    text = f"{abs(value):.6f}".rstrip("0").rstrip(".")
    if not signed:
        return text
    return ("-" if value < 0 else "+") + text


def encode_tal(annotations: Sequence[Annotation], record_bytes: Optional[int] = None) -> bytes:
    """Encode annotations as consecutive TALs, zero-padded to ``record_bytes``.

    Raises:
        ValidationError: If the TALs do not fit in ``record_bytes``
    """
    parts = []
    for a in annotations:
        timing = _format_seconds(a.onset, signed=True)
        if a.duration is not None:
            timing += TAL_DURATION_SEPARATOR.decode() + _format_seconds(a.duration, signed=False)
        parts.append(
            timing.encode("ascii") + TAL_LABEL_TERMINATOR
            + a.label.encode("utf-8") + TAL_LABEL_TERMINATOR + TAL_TERMINATOR
        )
    encoded = b"".join(parts)
    if record_bytes is None:
        return encoded
    if len(encoded) > record_bytes:
        raise ValidationError("annotations", len(encoded), f"exceed the {record_bytes}-byte record")
    return encoded.ljust(record_bytes, b"\x00")


def encode_annotation_records(
    annotations: Sequence[Annotation],
    n_records: int,
    record_duration: float,
    record_bytes: int
) -> List[bytes]:
    """Spread annotations over data records, each opening with a time-keeping TAL.

    Annotations are packed greedily in order.

    Raises:
        ValidationError: If they do not fit in the available records
    """
    records = []
    pending = list(annotations)
    for r in range(n_records):
        keeping = Annotation(r * record_duration, None, "")
        chosen: List[Annotation] = []
        while pending and len(encode_tal([keeping] + chosen + pending[:1])) <= record_bytes:
            chosen.append(pending.pop(0))
        records.append(encode_tal([keeping] + chosen, record_bytes))
    if pending:
        raise ValidationError("annotations", len(pending), "do not fit in the annotation signal")
    return records


def annotation_signal(records: Sequence[bytes]) -> np.ndarray:
    """Annotation record bytes as the int16 [n_records, spr] signal array."""
    return np.stack([np.frombuffer(r, dtype="<i2") for r in records]).astype(np.int16)


def annotation_records(header: EdfHeader, digital: Sequence[np.ndarray]) -> List[bytes]:
    """Raw bytes of the annotation signal, one entry per data record.

    Raises:
        ValidationError: If the file has no annotation signal
    """
    for sig, samples in zip(header.signals, digital):
        if sig.is_annotation:
            return [row.astype("<i2").tobytes() for row in samples]
    raise ValidationError("signal", EDF_ANNOTATION_LABEL, "not present in this file")


def _parse_seconds(text: bytes, record_index: int, what: str, pattern: Optional[re.Pattern]) -> float:
    decoded = text.decode("ascii", errors="replace").strip()
    if pattern is not None and not pattern.match(decoded):
        raise AnnotationError(record_index, f"non-numeric {what} {decoded!r}")
    try:
        return float(decoded)
    except ValueError:
        raise AnnotationError(record_index, f"non-numeric {what} {decoded!r}") from None


def _parse_tal_record(record: bytes, record_index: int) -> List[Annotation]:
    pieces = record.split(TAL_TERMINATOR)
    if pieces[-1]:
        raise AnnotationError(record_index, f"missing TAL terminator after {pieces[-1][:32]!r}")

    found = []
    for piece in pieces[:-1]:
        if not piece:
            continue
        if not piece.endswith(TAL_LABEL_TERMINATOR):
            raise AnnotationError(record_index, f"TAL {piece[:32]!r} lacks its 0x14 terminator")
        fields = piece.split(TAL_LABEL_TERMINATOR)
        onset_text, _, duration_text = fields[0].partition(TAL_DURATION_SEPARATOR)
        onset = _parse_seconds(onset_text, record_index, "onset", _ONSET_RE)
        duration = (
            _parse_seconds(duration_text, record_index, "duration", None)
            if duration_text.strip() else None
        )
        for raw_label in fields[1:-1]:
            try:
                label = raw_label.decode("utf-8")
            except UnicodeDecodeError:
                raise AnnotationError(record_index, f"label {raw_label[:32]!r} is not UTF-8") from None
            # Empty labels are time-keeping TALs
            if label:
                found.append(Annotation(onset, duration, label))
    return found


def parse_edfplus_annotations(records: Union[bytes, Sequence[bytes]]) -> List[Annotation]:
    """Decode TAL-encoded annotation records.

    Args:
        records: One record's bytes, or the bytes of every record

    Returns:
        Annotations in byte order

    Raises:
        AnnotationError: On a missing terminator or a non-numeric onset,
            naming the record index
    """
    if isinstance(records, (bytes, bytearray)):
        records = [bytes(records)]
    annotations: List[Annotation] = []
    for index, record in enumerate(records):
        annotations.extend(_parse_tal_record(record, index))
    return annotations


# ============================================================================
# Channel selection
# ============================================================================

def load_channel(
    header: EdfHeader,
    digital: Sequence[np.ndarray],
    channel: str,
    montage: Optional[Dict[str, Sequence[str]]] = None
) -> Tuple[np.ndarray, int]:
    """Physical samples of one channel, derived by montage if configured.

    A montage entry ``name -> [positive, negative]`` yields the difference
    positive - negative.

    Args:
        header: Parsed header
        digital: Parsed digital samples
        channel: Signal label or montage name
        montage: Montage definitions

    Returns:
        (physical samples, sampling rate in Hz)

    Raises:
        ValidationError: If the channel is unknown (lists available labels)
            or its sampling rate is not an integer
    """
    labels = header.signal_labels()

    def physical(label: str) -> Tuple[np.ndarray, int]:
        if label not in labels:
            raise ValidationError(
                "channel", label,
                f"available signals: {', '.join(s.label for s in header.signals if not s.is_annotation)}"
            )
        index = labels.index(label)
        fs = header.sampling_rate(index)
        if not float(fs).is_integer():
            raise ValidationError("sampling rate", fs, f"signal '{label}' is not sampled at a whole rate")
        return digital_to_physical(digital[index].reshape(-1), header.signals[index]), int(fs)

    if channel in labels or not montage or channel not in montage:
        return physical(channel)

    positive, negative = montage[channel]
    pos_signal, pos_fs = physical(positive)
    neg_signal, neg_fs = physical(negative)
    if pos_fs != neg_fs or pos_signal.shape != neg_signal.shape:
        raise ValidationError("montage", channel, f"'{positive}' and '{negative}' are sampled differently")
    logger.debug(f"Derived {channel} as {positive} - {negative}")
    return pos_signal - neg_signal, pos_fs
