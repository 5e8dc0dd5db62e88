"""TSEG1 segment cache.

Layout: b"TSEG1", u16 channels, u32 samples, then one record per segment:
u16 id length, subject id (utf-8), f64 t_start, u8 label, f64 interval
start, i16 cluster (-1 for none), channels*samples little-endian f32.
Loading memory-maps the file; segment payloads are read-only views into it.
"""
import logging
import os
import struct
from typing import Iterable, List, Optional

import numpy as np

from component_logger import access_log
from errors import CheckpointError
from signal_processing import LabeledSegment

logger = logging.getLogger("segment_store")

SEGMENT_MAGIC = b"TSEG1"
_HEADER = struct.Struct("<HI")
_FIELDS = struct.Struct("<dBdh")


class SegmentWriter:
    """Appends segments to a TSEG1 file; the shape is fixed by the first segment."""

    def __init__(self, path: str):
        self.path = path
        self.count = 0
        self.shape: Optional[tuple] = None
        self._file = open(path, "wb")
        self._file.write(SEGMENT_MAGIC)

    def write(self, seg: LabeledSegment):
        data = np.ascontiguousarray(seg.data, dtype="<f4")
        if self.shape is None:
            self.shape = data.shape
            self._file.write(_HEADER.pack(*data.shape))
        elif data.shape != self.shape:
            raise CheckpointError(f"{self.path}: segment shape {data.shape} differs from {self.shape}")
        ident = seg.subject_id.encode("utf-8")
        cluster = -1 if seg.cluster is None else int(seg.cluster)
        self._file.write(struct.pack("<H", len(ident)) + ident)
        self._file.write(_FIELDS.pack(float(seg.t_start), int(seg.label), float(seg.interval_start), cluster))
        self._file.write(data.tobytes())
        self.count += 1

    def write_all(self, segments: Iterable[LabeledSegment]):
        for seg in segments:
            self.write(seg)

    def close(self):
        if self.shape is None:
            self._file.write(_HEADER.pack(0, 0))
        self._file.close()

    def __enter__(self) -> "SegmentWriter":
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()


def save_segments(segments: Iterable[LabeledSegment], path: str) -> int:
    with SegmentWriter(path) as writer:
        writer.write_all(segments)
    return writer.count


def load_segments(path: str) -> List[LabeledSegment]:
    """Parse a TSEG1 file; payloads stay memory-mapped."""
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        head = f.read(len(SEGMENT_MAGIC) + _HEADER.size)
    if head[:len(SEGMENT_MAGIC)] != SEGMENT_MAGIC:
        raise CheckpointError(f"{path}: unknown segment cache magic {head[:len(SEGMENT_MAGIC)]!r}")
    if len(head) < len(SEGMENT_MAGIC) + _HEADER.size:
        raise CheckpointError(f"{path}: truncated segment cache header")
    channels, samples = _HEADER.unpack_from(head, len(SEGMENT_MAGIC))
    offset = len(SEGMENT_MAGIC) + _HEADER.size
    if offset == size:
        return []
    payload = channels * samples * 4
    raw = np.memmap(path, dtype=np.uint8, mode="r")
    segments = []
    try:
        while offset < size:
            (id_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            subject = bytes(raw[offset:offset + id_len]).decode("utf-8")
            offset += id_len
            t_start, label, interval_start, cluster = _FIELDS.unpack_from(raw, offset)
            offset += _FIELDS.size
            if offset + payload > size:
                raise CheckpointError(f"{path}: segment payload truncated at byte {offset}")
            data = raw[offset:offset + payload].view("<f4").reshape(channels, samples)
            offset += payload
            segments.append(LabeledSegment(data=data, label=int(label), t_start=t_start, subject_id=subject,
                                           interval_start=interval_start, cluster=None if cluster < 0 else cluster))
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt segment cache at byte {offset}: {exc}")
    return segments


def split_path(cache_dir: str, split: str) -> str:
    return os.path.join(cache_dir, f"{split}.tseg")


def load_split(cache_dir: str, split: str, command: str, subject_id: str = "") -> List[LabeledSegment]:
    """Load one split's cache and record the read in the access log."""
    path = split_path(cache_dir, split)
    if not os.path.exists(path):
        raise FileNotFoundError(f"segment cache {path} not found; run ingest first")
    segments = load_segments(path)
    access_log.record(command, subject_id, split, len(segments), source=path)
    logger.info(f"{command}: loaded {len(segments)} {split} segments for {subject_id or 'subject'}")
    return segments
