"""Notch + band-pass filtering and 5-second windowing of EEG records."""
import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal as sps

from edfio import EEGRecord
from errors import FilterDesignError
from protocol import IntervalMap, Label

logger = logging.getLogger("signal_processing")

SEGMENT_SECONDS = 5.0
TRAIN_PREICTAL_STRIDE = 2.5


@dataclass
class FilterBank:
    fs: float
    notch_sos: np.ndarray
    band_sos: np.ndarray
    notch_hz: float = 60.0
    band: Tuple[float, float] = (0.5, 100.0)

    @property
    def sos(self) -> np.ndarray:
        return np.vstack([self.notch_sos, self.band_sos])

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots(section[3:]) for section in self.sos])

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0))


@dataclass
class LabeledSegment:
    data: np.ndarray          # (channels, samples) float32, microvolts
    label: int                # 1 preictal, 0 interictal
    t_start: float
    subject_id: str = ""
    interval_start: float = 0.0
    cluster: Optional[int] = None

    @property
    def t_end(self) -> float:
        return self.t_start + SEGMENT_SECONDS


def design_filters(fs: float, notch_hz: float = 60.0, notch_q: float = 30.0,
                   band: Tuple[float, float] = (0.5, 100.0), order: int = 4) -> FilterBank:
    """60 Hz notch biquad followed by a Butterworth band-pass as second-order sections."""
    low, high = band
    if fs <= 2 * high:
        raise FilterDesignError(f"fs={fs} Hz cannot carry a {high} Hz band edge (Nyquist {fs / 2} Hz)")
    if not 0 < low < high:
        raise FilterDesignError(f"invalid band [{low}, {high}] Hz")
    if not 0 < notch_hz < fs / 2:
        raise FilterDesignError(f"notch frequency {notch_hz} Hz outside (0, {fs / 2})")
    b, a = sps.iirnotch(notch_hz, notch_q, fs=fs)
    notch_sos = sps.tf2sos(b, a)
    band_sos = sps.butter(order, [low, high], btype="bandpass", fs=fs, output="sos")
    bank = FilterBank(fs=float(fs), notch_sos=notch_sos, band_sos=band_sos, notch_hz=notch_hz, band=(low, high))
    if not np.all(np.isfinite(bank.sos)) or not bank.is_stable():
        raise FilterDesignError(f"unstable or non-finite filter design at fs={fs}")
    logger.debug(f"Designed filter bank fs={fs} notch={notch_hz}/Q{notch_q} band={band} order={order}")
    return bank


def frequency_response(bank: FilterBank, freqs: Sequence[float], stage: str = "all") -> np.ndarray:
    """Complex response of the bank ("all"), the notch or the band-pass at the given frequencies."""
    sos = {"all": bank.sos, "notch": bank.notch_sos, "band": bank.band_sos}[stage]
    _, h = sps.sosfreqz(sos, worN=np.asarray(freqs, dtype=float), fs=bank.fs)
    return h


def apply_filters(record: EEGRecord, bank: FilterBank) -> EEGRecord:
    """Causal per-channel filtering, initialized at steady state for the first sample."""
    if not math.isclose(record.fs, bank.fs):
        raise FilterDesignError(f"record sampled at {record.fs} Hz, filter bank designed for {bank.fs} Hz")
    data = np.asarray(record.data, dtype=np.float64)
    if data.shape[-1] == 0:
        return replace(record, data=data.copy())
    zi = sps.sosfilt_zi(bank.sos)[:, None, :] * data[:, 0][None, :, None]
    filtered, _ = sps.sosfilt(bank.sos, data, axis=-1, zi=zi)
    return replace(record, data=filtered)


def window_starts(t0: float, t1: float, lo: float, hi: float, stride: float,
                  length: float = SEGMENT_SECONDS) -> List[float]:
    """Window start times on the grid t0 + k*stride whose [t, t+length) fits in [t0,t1) and [lo,hi)."""
    lo, hi = max(t0, lo), min(t1, hi)
    if hi - lo < length - 1e-9:
        return []
    k0 = math.ceil((lo - t0) / stride - 1e-9)
    k1 = math.floor((hi - length - t0) / stride + 1e-9)
    return [t0 + k * stride for k in range(k0, k1 + 1)]


def segment(record: EEGRecord, interval_map: IntervalMap, phase: str = "eval",
            subject_id: str = "") -> List[LabeledSegment]:
    """Cut 5 s labeled windows out of one (already filtered) record.

    Pre-ictal windows overlap by half during training; everything else uses
    non-overlapping windows. Windows never straddle a label change or the
    record boundary.
    """
    if phase not in ("train", "eval"):
        raise ValueError(f"phase must be 'train' or 'eval', got {phase!r}")
    win = int(round(SEGMENT_SECONDS * record.fs))
    if record.n_samples < win:
        return []
    segments: List[LabeledSegment] = []
    for interval in interval_map.intervals:
        if interval.label == Label.EXCLUDED:
            continue
        if interval.t1 <= record.start_time or interval.t0 >= record.end_time:
            continue
        preictal = interval.label == Label.PREICTAL
        stride = TRAIN_PREICTAL_STRIDE if preictal and phase == "train" else SEGMENT_SECONDS
        for t in window_starts(interval.t0, interval.t1, record.start_time, record.end_time, stride):
            s = int(round((t - record.start_time) * record.fs))
            if s < 0 or s + win > record.n_samples:
                continue
            segments.append(LabeledSegment(
                data=np.ascontiguousarray(record.data[:, s:s + win], dtype=np.float32),
                label=1 if preictal else 0,
                t_start=float(t),
                subject_id=subject_id,
                interval_start=float(interval.t0),
                cluster=interval.cluster,
            ))
    segments.sort(key=lambda seg: seg.t_start)
    return segments


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray


def fit_channel_stats(segments: Sequence[LabeledSegment], min_std: float = 1e-6) -> ChannelStats:
    """Per-channel mean/std over a set of segments (the training split)."""
    if not segments:
        raise ValueError("cannot fit channel statistics on zero segments")
    n_channels = segments[0].data.shape[0]
    total = np.zeros(n_channels)
    total_sq = np.zeros(n_channels)
    count = 0
    for seg in segments:
        x = seg.data.astype(np.float64)
        total += x.sum(axis=1)
        total_sq += (x * x).sum(axis=1)
        count += x.shape[1]
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    std = np.sqrt(var)
    std[std < min_std] = 1.0
    return ChannelStats(mean=mean, std=std)
