"""EDF recordings, CHB-MIT seizure summaries and the JSON annotation interchange."""
import calendar
import json
import logging
import os
import re
from collections import Counter
from dataclasses import dataclass, field, asdict
from datetime import datetime, timezone
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import AnnotationError, EdfFormatError, MontageError, TimelineMetadataError

logger = logging.getLogger("edfio")

ANNOTATION_LABEL = "EDF ANNOTATIONS"
DIGITAL_MIN = -32768
DIGITAL_MAX = 32767

# (name, width) of the fixed 256-byte header
_FIXED_FIELDS = (
    ("version", 8), ("patient_id", 80), ("recording_id", 80), ("start_date", 8),
    ("start_time", 8), ("header_bytes", 8), ("reserved", 44), ("n_records", 8),
    ("record_duration", 8), ("n_signals", 4),
)
# (name, width) of the per-signal header, each stored as ns consecutive entries
_SIGNAL_FIELDS = (
    ("label", 16), ("transducer", 80), ("units", 8), ("physical_min", 8), ("physical_max", 8),
    ("digital_min", 8), ("digital_max", 8), ("prefilter", 80), ("samples_per_record", 8), ("reserved", 32),
)


@dataclass
class SignalHeader:
    label: str
    samples_per_record: int
    physical_min: float
    physical_max: float
    digital_min: int
    digital_max: int
    transducer: str = ""
    prefilter: str = ""
    units: str = "uV"


@dataclass
class EdfHeader:
    version: str
    start_datetime: datetime
    n_records: int
    record_duration_s: float
    signals: List[SignalHeader] = field(default_factory=list)
    patient_id: str = ""
    recording_id: str = ""

    @property
    def n_signals(self) -> int:
        return len(self.signals)

    @property
    def header_bytes(self) -> int:
        return 256 * (self.n_signals + 1)

    @property
    def duration_s(self) -> float:
        return self.n_records * self.record_duration_s


@dataclass
class EEGRecord:
    """Multichannel recording in microvolts, data shaped (channels, samples)."""
    channels: List[str]
    fs: float
    data: np.ndarray
    start_time: float = 0.0
    source: str = ""

    @property
    def n_samples(self) -> int:
        return int(self.data.shape[1]) if self.data.ndim == 2 else 0

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.fs

    @property
    def end_time(self) -> float:
        return self.start_time + self.duration_s


@dataclass
class SeizureAnnotation:
    file_id: str
    onset_s: float
    offset_s: float
    file_start: Optional[float] = None

    @property
    def absolute_onset(self) -> float:
        if self.file_start is None:
            raise TimelineMetadataError(f"{self.file_id}: no file start time for seizure at {self.onset_s} s")
        return self.file_start + self.onset_s

    @property
    def absolute_offset(self) -> float:
        return self.absolute_onset + (self.offset_s - self.onset_s)

    @property
    def key(self) -> str:
        """Identifier used by the manual exclusion list ("file:onset")."""
        return f"{self.file_id}:{self.onset_s:g}"


@dataclass
class FileAnnotation:
    """One entry of the JSON interchange: {file, start_time, duration_s, seizures}."""
    file: str
    start_time: Optional[float]
    duration_s: Optional[float] = None
    seizures: List[SeizureAnnotation] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "file": self.file,
            "start_time": self.start_time,
            "duration_s": self.duration_s,
            "seizures": [{"onset_s": s.onset_s, "offset_s": s.offset_s} for s in self.seizures],
        }


# --- EDF parsing ---

def _text(blob: bytes, offset: int, width: int) -> str:
    return blob[offset:offset + width].decode("latin-1").strip()


def _number(blob: bytes, offset: int, width: int, name: str, kind=int):
    raw = _text(blob, offset, width)
    try:
        value = kind(raw)
    except ValueError:
        raise EdfFormatError(f"non-numeric header field {name}={raw!r}", offset)
    if kind is float and not np.isfinite(value):
        raise EdfFormatError(f"non-finite header field {name}={raw!r}", offset)
    return value


def _parse_start(date_text: str, time_text: str, offset: int) -> datetime:
    try:
        day, month, year = (int(x) for x in date_text.split("."))
        hour, minute, second = (int(x) for x in time_text.replace(":", ".").split("."))
        year += 1900 if year >= 85 else 2000
        return datetime(year, month, day, hour, minute, second)
    except ValueError:
        raise EdfFormatError(f"invalid start date/time {date_text!r} {time_text!r}", offset)


def read_edf_header(blob: bytes) -> EdfHeader:
    """Parse and validate the ASCII header only."""
    try:
        return _read_header(blob)
    except EdfFormatError:
        raise
    except (ValueError, IndexError, OverflowError) as exc:
        raise EdfFormatError(f"malformed EDF header: {exc}", 0)


def _read_header(blob: bytes) -> EdfHeader:
    if len(blob) < 256:
        raise EdfFormatError("truncated header", len(blob))
    offsets = {}
    pos = 0
    for name, width in _FIXED_FIELDS:
        offsets[name] = (pos, width)
        pos += width

    n_signals = _number(blob, *offsets["n_signals"], "n_signals")
    if n_signals < 1:
        raise EdfFormatError(f"number of signals must be positive, got {n_signals}", offsets["n_signals"][0])
    header_bytes = _number(blob, *offsets["header_bytes"], "header_bytes")
    if header_bytes != 256 * (n_signals + 1):
        raise EdfFormatError(f"header length {header_bytes} != 256*(ns+1) for ns={n_signals}", offsets["header_bytes"][0])
    if len(blob) < header_bytes:
        raise EdfFormatError("truncated header", len(blob))

    n_records = _number(blob, *offsets["n_records"], "n_records")
    if n_records == -1:
        raise EdfFormatError("n_records == -1: streaming EDF is not supported", offsets["n_records"][0])
    if n_records < 0:
        raise EdfFormatError(f"negative record count {n_records}", offsets["n_records"][0])
    duration = _number(blob, *offsets["record_duration"], "record_duration", float)
    if duration <= 0:
        raise EdfFormatError(f"record duration must be positive, got {duration}", offsets["record_duration"][0])
    start = _parse_start(_text(blob, *offsets["start_date"]), _text(blob, *offsets["start_time"]), offsets["start_date"][0])

    columns: Dict[str, List] = {}
    for name, width in _SIGNAL_FIELDS:
        values = []
        for i in range(n_signals):
            at = pos + i * width
            if name in ("physical_min", "physical_max"):
                values.append(_number(blob, at, width, name, float))
            elif name in ("digital_min", "digital_max", "samples_per_record"):
                values.append(_number(blob, at, width, name))
            else:
                values.append(_text(blob, at, width))
        columns[name] = values
        pos += width * n_signals

    signals = []
    for i in range(n_signals):
        sig = SignalHeader(
            label=columns["label"][i],
            samples_per_record=columns["samples_per_record"][i],
            physical_min=columns["physical_min"][i],
            physical_max=columns["physical_max"][i],
            digital_min=columns["digital_min"][i],
            digital_max=columns["digital_max"][i],
            transducer=columns["transducer"][i],
            prefilter=columns["prefilter"][i],
            units=columns["units"][i],
        )
        if sig.digital_max <= sig.digital_min:
            raise EdfFormatError(f"signal {i} ({sig.label!r}): digital_max <= digital_min", 256)
        if sig.physical_max == sig.physical_min:
            raise EdfFormatError(f"signal {i} ({sig.label!r}): physical_max == physical_min", 256)
        if sig.samples_per_record < 1:
            raise EdfFormatError(f"signal {i} ({sig.label!r}): samples_per_record must be positive", 256)
        signals.append(sig)

    return EdfHeader(
        version=_text(blob, *offsets["version"]),
        start_datetime=start,
        n_records=n_records,
        record_duration_s=duration,
        signals=signals,
        patient_id=_text(blob, *offsets["patient_id"]),
        recording_id=_text(blob, *offsets["recording_id"]),
    )


def normalize_label(label: str) -> str:
    """Case/whitespace-insensitive channel key; strips CHB duplicate suffixes like "T8-P8-0"."""
    key = " ".join(label.split()).upper()
    match = re.match(r"^(.+-.+)-\d+$", key)
    return match.group(1) if match else key


def parse_edf(blob: bytes, source: str = "") -> Tuple[EdfHeader, EEGRecord]:
    """Parse a complete EDF file image into its header and a physical-unit record.

    Only signals at the majority sampling rate are kept (annotation channels
    are skipped). Duplicate labels keep their first occurrence.
    """
    header = read_edf_header(blob)
    try:
        return header, _decode_payload(blob, header, source)
    except EdfFormatError:
        raise
    except (ValueError, IndexError, OverflowError, MemoryError) as exc:
        raise EdfFormatError(f"malformed EDF payload: {exc}", header.header_bytes)


def _decode_payload(blob: bytes, header: EdfHeader, source: str) -> EEGRecord:
    record_samples = sum(s.samples_per_record for s in header.signals)
    expected = header.n_records * record_samples * 2
    available = len(blob) - header.header_bytes
    if available < expected:
        raise EdfFormatError(f"truncated payload: need {expected} bytes, have {available}", len(blob))

    raw = np.frombuffer(blob, dtype="<i2", count=header.n_records * record_samples, offset=header.header_bytes)
    raw = raw.reshape(header.n_records, record_samples)

    eeg = [i for i, s in enumerate(header.signals) if normalize_label(s.label) != ANNOTATION_LABEL]
    if not eeg:
        raise EdfFormatError("file holds no signal channels", 256)
    rates = Counter(header.signals[i].samples_per_record for i in eeg)
    majority = max(rates.items(), key=lambda kv: (kv[1], kv[0]))[0]

    starts = np.concatenate([[0], np.cumsum([s.samples_per_record for s in header.signals])])
    channels, rows, seen = [], [], set()
    for i in eeg:
        sig = header.signals[i]
        if sig.samples_per_record != majority:
            logger.warning(f"{source}: dropping {sig.label!r} sampled at {sig.samples_per_record}/record (majority {majority})")
            continue
        key = normalize_label(sig.label)
        if key in seen:
            logger.warning(f"{source}: duplicate channel label {sig.label!r}, keeping first occurrence")
            continue
        seen.add(key)
        digital = raw[:, starts[i]:starts[i + 1]].reshape(-1).astype(np.float64)
        scale = (sig.physical_max - sig.physical_min) / (sig.digital_max - sig.digital_min)
        rows.append((digital - sig.digital_min) * scale + sig.physical_min)
        channels.append(sig.label)

    data = np.vstack(rows) if header.n_records else np.zeros((len(rows), 0))
    return EEGRecord(
        channels=channels,
        fs=majority / header.record_duration_s,
        data=data,
        start_time=float(calendar.timegm(header.start_datetime.timetuple())),
        source=source,
    )


def read_edf(path: str) -> Tuple[EdfHeader, EEGRecord]:
    with open(path, "rb") as f:
        return parse_edf(f.read(), source=os.path.basename(path))


def select_montage(record: EEGRecord, montage: Sequence[str]) -> EEGRecord:
    """Project the record onto the montage, in montage order."""
    index: Dict[str, int] = {}
    for i, label in enumerate(record.channels):
        index.setdefault(normalize_label(label), i)
    missing = [label for label in montage if normalize_label(label) not in index]
    if missing:
        raise MontageError(missing, record.source)
    rows = [index[normalize_label(label)] for label in montage]
    return EEGRecord(
        channels=list(montage),
        fs=record.fs,
        data=record.data[rows],
        start_time=record.start_time,
        source=record.source,
    )


# --- EDF writing (synthetic data and tests) ---

def _ascii(value, width: int) -> bytes:
    text = str(value)
    if len(text) > width:
        raise ValueError(f"header value {text!r} does not fit in {width} characters")
    return text.ljust(width).encode("ascii")


def _format_number(value: float) -> str:
    """Shortest representation of value that fits the 8-character EDF field."""
    if float(value).is_integer() and abs(value) < 1e7:
        return str(int(value))
    for digits in range(8, 0, -1):
        text = f"{value:.{digits}g}"
        if len(text) <= 8:
            return text
    raise ValueError(f"{value} cannot be written into an 8-character EDF field")


def write_edf(record: EEGRecord, record_duration_s: float = 1.0,
              physical_range: Optional[Tuple[float, float]] = None) -> bytes:
    """Serialize a record to EDF bytes with 16-bit quantization.

    Each channel gets a symmetric integer physical range covering its peak
    amplitude unless `physical_range` pins one for every channel.
    """
    n_channels, n_samples = record.data.shape
    spr = record.fs * record_duration_s
    if not float(spr).is_integer():
        raise ValueError(f"fs*record_duration must be an integer, got {spr}")
    spr = int(spr)
    if n_samples % spr:
        raise ValueError(f"{n_samples} samples do not fill whole {record_duration_s} s records")
    n_records = n_samples // spr

    pmins, pmaxs, digital = [], [], []
    for row in record.data:
        if physical_range is not None:
            pmin, pmax = physical_range
        else:
            peak = float(np.max(np.abs(row))) if row.size else 0.0
            pmax = float(max(1, int(np.ceil(peak))))
            pmin = -pmax
        # the 8-character text is what a reader sees; quantize against it
        pmin_text, pmax_text = _format_number(pmin), _format_number(pmax)
        pmin, pmax = float(pmin_text), float(pmax_text)
        pmins.append(pmin_text)
        pmaxs.append(pmax_text)
        scaled = (row - pmin) * (DIGITAL_MAX - DIGITAL_MIN) / (pmax - pmin) + DIGITAL_MIN
        digital.append(np.clip(np.round(scaled), DIGITAL_MIN, DIGITAL_MAX).astype("<i2"))

    start = datetime.fromtimestamp(record.start_time, tz=timezone.utc)
    fixed = b"".join([
        _ascii("0", 8),
        _ascii("X X X X", 80),
        _ascii(f"Startdate {start:%d-%b-%Y} X X X".upper(), 80),
        _ascii(f"{start:%d.%m.%y}", 8),
        _ascii(f"{start:%H.%M.%S}", 8),
        _ascii(256 * (n_channels + 1), 8),
        _ascii("", 44),
        _ascii(n_records, 8),
        _ascii(_format_number(record_duration_s), 8),
        _ascii(n_channels, 4),
    ])
    per_signal = b"".join([
        b"".join(_ascii(label, 16) for label in record.channels),
        b"".join(_ascii("AgAgCl electrode", 80) for _ in range(n_channels)),
        b"".join(_ascii("uV", 8) for _ in range(n_channels)),
        b"".join(_ascii(v, 8) for v in pmins),
        b"".join(_ascii(v, 8) for v in pmaxs),
        b"".join(_ascii(DIGITAL_MIN, 8) for _ in range(n_channels)),
        b"".join(_ascii(DIGITAL_MAX, 8) for _ in range(n_channels)),
        b"".join(_ascii("", 80) for _ in range(n_channels)),
        b"".join(_ascii(spr, 8) for _ in range(n_channels)),
        b"".join(_ascii("", 32) for _ in range(n_channels)),
    ])
    if n_records:
        stacked = np.stack(digital).reshape(n_channels, n_records, spr).transpose(1, 0, 2)
        payload = np.ascontiguousarray(stacked).astype("<i2").tobytes()
    else:
        payload = b""
    return fixed + per_signal + payload


def save_edf(record: EEGRecord, path: str, record_duration_s: float = 1.0):
    with open(path, "wb") as f:
        f.write(write_edf(record, record_duration_s))


# --- CHB-MIT summaries ---

_FILE_RE = re.compile(r"^\s*File Name:\s*(\S+)", re.IGNORECASE)
_FILE_START_RE = re.compile(r"^\s*File Start Time:\s*(\d+):(\d+):(\d+)", re.IGNORECASE)
_FILE_END_RE = re.compile(r"^\s*File End Time:\s*(\d+):(\d+):(\d+)", re.IGNORECASE)
_SEIZURE_START_RE = re.compile(r"^\s*Seizure(?:\s+\d+)?\s+Start Time:\s*(\d+(?:\.\d+)?)", re.IGNORECASE)
_SEIZURE_END_RE = re.compile(r"^\s*Seizure(?:\s+\d+)?\s+End Time:\s*(\d+(?:\.\d+)?)", re.IGNORECASE)


def _clock(match) -> int:
    hours, minutes, seconds = (int(g) for g in match.groups())
    return hours * 3600 + minutes * 60 + seconds


def summary_to_annotations(text: str) -> List[FileAnnotation]:
    """Convert a CHB-MIT summary text into the JSON interchange entries.

    File start times are times of day; they are unrolled across midnight so
    that the subject timeline is monotonic in file order.
    """
    files: List[FileAnnotation] = []
    clocks: List[Tuple[Optional[int], Optional[int]]] = []
    pending: Optional[float] = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        m = _FILE_RE.match(line)
        if m:
            if pending is not None:
                raise AnnotationError(f"line {lineno}: seizure start without end in {files[-1].file}")
            files.append(FileAnnotation(file=m.group(1), start_time=None))
            clocks.append((None, None))
            continue
        if not files:
            continue
        current = files[-1]
        m = _FILE_START_RE.match(line)
        if m:
            clocks[-1] = (_clock(m), clocks[-1][1])
            continue
        m = _FILE_END_RE.match(line)
        if m:
            clocks[-1] = (clocks[-1][0], _clock(m))
            continue
        m = _SEIZURE_START_RE.match(line)
        if m:
            pending = float(m.group(1))
            continue
        m = _SEIZURE_END_RE.match(line)
        if m:
            if pending is None:
                raise AnnotationError(f"line {lineno}: seizure end without start in {current.file}")
            end = float(m.group(1))
            if end <= pending:
                raise AnnotationError(f"line {lineno}: seizure end {end} <= start {pending} in {current.file}")
            current.seizures.append(SeizureAnnotation(current.file, pending, end))
            pending = None
    if pending is not None:
        raise AnnotationError("summary ends inside a seizure block")

    previous: Optional[int] = None
    for entry, (start, end) in zip(files, clocks):
        if start is None:
            continue
        while previous is not None and start < previous:
            start += 86400
        previous = start
        entry.start_time = float(start)
        if end is not None:
            # either clock may be written past 24:00; only the time of day counts
            entry.duration_s = float((end - start) % 86400 or 86400)
        for seizure in entry.seizures:
            seizure.file_start = entry.start_time
    _validate(files)
    return files


def parse_summary(text: str) -> Tuple[List[SeizureAnnotation], Dict[str, Optional[float]]]:
    """Seizure annotations plus per-file start times from a CHB-MIT summary."""
    files = summary_to_annotations(text)
    start_times = {entry.file: entry.start_time for entry in files}
    return seizures_from_annotations(files), start_times


def _validate(files: Sequence[FileAnnotation]):
    for entry in files:
        for s in entry.seizures:
            if not 0 <= s.onset_s < s.offset_s:
                raise AnnotationError(f"{entry.file}: invalid seizure [{s.onset_s}, {s.offset_s}]")
            if entry.duration_s is not None and s.offset_s > entry.duration_s:
                raise AnnotationError(f"{entry.file}: seizure ends at {s.offset_s} s after file end {entry.duration_s} s")
        if entry.seizures and entry.start_time is None:
            raise TimelineMetadataError(f"{entry.file}: seizures annotated but the file start time is missing")


def seizures_from_annotations(files: Sequence[FileAnnotation],
                              excluded: Sequence[str] = ()) -> List[SeizureAnnotation]:
    """All seizures on the absolute timeline, sorted by onset, minus manual exclusions."""
    _validate(files)
    excluded = set(excluded)
    seizures = []
    for entry in files:
        for s in entry.seizures:
            if s.key in excluded:
                logger.info(f"Excluding seizure {s.key} (manual exclusion list)")
                continue
            seizures.append(SeizureAnnotation(entry.file, s.onset_s, s.offset_s, entry.start_time))
    return sorted(seizures, key=lambda s: s.absolute_onset)


def save_annotations(files: Sequence[FileAnnotation], path: str, subject_id: str = ""):
    with open(path, "w") as f:
        json.dump({"subject": subject_id, "files": [entry.to_dict() for entry in files]}, f, indent=2)


def load_annotations(path: str) -> List[FileAnnotation]:
    try:
        with open(path, "r") as f:
            payload = json.load(f)
    except ValueError as exc:
        raise AnnotationError(f"{path}: invalid JSON ({exc})")
    items = payload.get("files", []) if isinstance(payload, dict) else payload
    files = []
    try:
        for item in items:
            start = item.get("start_time")
            duration = item.get("duration_s")
            entry = FileAnnotation(
                file=str(item["file"]),
                start_time=None if start is None else float(start),
                duration_s=None if duration is None else float(duration),
            )
            entry.seizures = [
                SeizureAnnotation(entry.file, float(s["onset_s"]), float(s["offset_s"]), entry.start_time)
                for s in item.get("seizures", [])
            ]
            files.append(entry)
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise AnnotationError(f"{path}: malformed annotation entry ({exc})")
    _validate(files)
    return files
