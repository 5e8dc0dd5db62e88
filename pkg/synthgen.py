"""Deterministic synthetic EEG subjects with planted pre-ictal drifts.

Baseline per channel is 1/f^alpha noise plus a 10 Hz rhythm. Inside each
cluster's pre-ictal window a 15-25 Hz component ramps up so that band power
at the window end is drift_gain times the baseline band power. Artifact
bursts are label-independent wideband transients.
"""
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace, asdict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from config import CANONICAL_MONTAGE
from edfio import EEGRecord, FileAnnotation, SeizureAnnotation, save_annotations, save_edf
from errors import ConfigError, ProtocolError
from protocol import (CLUSTER_GAP_S, PREICTAL_LEAD_S, SAFETY_MARGIN_S, SPH_S, Seizure,
                      cluster_seizures)

logger = logging.getLogger("synthgen")

EPOCH_START = 1577836800.0  # 2020-01-01T00:00:00Z
FILE_SECONDS = 3600


@dataclass
class SubjectProfile:
    seed: int = 0
    n_clusters: int = 3
    hours_per_gap: float = 1.5
    seizures_per_cluster: int = 1
    seizure_s: float = 60.0
    drift_band: Tuple[float, float] = (15.0, 25.0)
    drift_gain: float = 3.0
    drift_floor: float = 0.0        # fraction of the ramp already present at window start
    artifact_rate: float = 2.0      # bursts per hour
    artifact_amplitude: float = 150.0
    alpha: float = 1.0              # noise spectrum exponent
    noise_uv: float = 30.0
    rhythm_hz: float = 10.0
    rhythm_uv: float = 20.0
    channels: Tuple[str, ...] = CANONICAL_MONTAGE
    fs: float = 256.0
    subject_id: str = "synth"

    def __post_init__(self):
        if self.n_clusters < 2:
            raise ConfigError(f"a synthetic subject needs >= 2 clusters, got {self.n_clusters}")
        if self.seizures_per_cluster < 1 or self.seizure_s <= 0:
            raise ConfigError("seizures_per_cluster must be >= 1 and seizure_s > 0")
        if not 0 < self.drift_band[0] < self.drift_band[1] < self.fs / 2:
            raise ConfigError(f"drift band {self.drift_band} outside (0, {self.fs / 2}) Hz")
        if self.drift_gain < 0 or self.artifact_rate < 0 or not 0 <= self.drift_floor <= 1:
            raise ConfigError("drift_gain and artifact_rate must be >= 0, drift_floor in [0, 1]")
        if not float(self.fs).is_integer():
            raise ConfigError("fs must be a whole number of samples per second")

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class ArtifactBurst:
    time: float
    duration: float


@dataclass
class GroundTruth:
    seizures: List[Tuple[float, float]]
    drift_intervals: List[Tuple[float, float]]
    artifacts: List[ArtifactBurst] = field(default_factory=list)
    start: float = EPOCH_START
    end: float = EPOCH_START

    def to_dict(self) -> Dict:
        return {
            "seizures": [list(s) for s in self.seizures],
            "drift_intervals": [list(d) for d in self.drift_intervals],
            "artifacts": [[a.time, a.duration] for a in self.artifacts],
            "start": self.start,
            "end": self.end,
        }


def artifact_profile(base: SubjectProfile, multiplier: float) -> SubjectProfile:
    """Copy of base with the artifact rate scaled."""
    if multiplier < 0:
        raise ConfigError(f"artifact multiplier must be >= 0, got {multiplier}")
    return replace(base, artifact_rate=base.artifact_rate * multiplier)


def clean_profile(seed: int = 0, **overrides) -> SubjectProfile:
    return artifact_profile(SubjectProfile(seed=seed, **overrides), 0.0)


def _rng(profile: SubjectProfile, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([profile.seed, stream])))


def timeline(profile: SubjectProfile) -> Tuple[List[Seizure], float]:
    """Seizure list and recording end.

    hours_per_gap of inter-ictal recording separate consecutive safety zones,
    and also precede the first zone and follow the last one.
    """
    gap = profile.hours_per_gap * 3600.0
    spacing = min(CLUSTER_GAP_S / 2, 600.0) + profile.seizure_s
    seizures: List[Seizure] = []
    lead = EPOCH_START + gap + SAFETY_MARGIN_S
    for c in range(profile.n_clusters):
        onset = lead
        for _ in range(profile.seizures_per_cluster):
            seizures.append(Seizure(onset, onset + profile.seizure_s))
            onset += spacing
        cluster_end = seizures[-1].offset
        lead = cluster_end + SAFETY_MARGIN_S + gap + SAFETY_MARGIN_S
    end = seizures[-1].offset + SAFETY_MARGIN_S + gap
    return seizures, float(math.ceil(end - EPOCH_START) + EPOCH_START)


def _check_clusters(profile: SubjectProfile, seizures: List[Seizure]):
    clusters = cluster_seizures(seizures, CLUSTER_GAP_S)
    if len(clusters) != profile.n_clusters:
        raise ProtocolError(f"profile yields {len(clusters)} clusters, expected {profile.n_clusters}")
    for prev, nxt in zip(clusters, clusters[1:]):
        if prev.safety_zone[1] > nxt.safety_zone[0]:
            raise ProtocolError(f"clusters {prev.index + 1} and {nxt.index + 1} overlap")
    return clusters


def _file_cuts(seizures: List[Seizure], start: float, end: float) -> List[Tuple[float, float]]:
    """Hourly file spans; a cut never falls inside a seizure."""
    spans = []
    t = start
    while t < end:
        cut = min(t + FILE_SECONDS, end)
        for s in seizures:
            if s.onset < cut < s.offset:
                cut = float(math.ceil(s.offset - start) + start)
        spans.append((t, cut))
        t = cut
    return spans


def pink_noise(rng: np.random.Generator, n_channels: int, n_samples: int, alpha: float = 1.0) -> np.ndarray:
    """Unit-variance 1/f^alpha noise via spectral shaping of white noise."""
    white = rng.standard_normal((n_channels, n_samples))
    spectrum = np.fft.rfft(white, axis=-1)
    freqs = np.fft.rfftfreq(n_samples)
    scale = np.zeros_like(freqs)
    scale[1:] = freqs[1:] ** (-alpha / 2.0)
    noise = np.fft.irfft(spectrum * scale, n=n_samples, axis=-1)
    return noise / noise.std(axis=-1, keepdims=True)


def band_noise(rng: np.random.Generator, n_channels: int, n_samples: int, fs: float,
               band: Tuple[float, float]) -> np.ndarray:
    """Unit-variance white noise restricted to band."""
    spectrum = np.fft.rfft(rng.standard_normal((n_channels, n_samples)), axis=-1)
    freqs = np.fft.rfftfreq(n_samples, d=1.0 / fs)
    spectrum[:, (freqs < band[0]) | (freqs > band[1])] = 0.0
    noise = np.fft.irfft(spectrum, n=n_samples, axis=-1)
    return noise / noise.std(axis=-1, keepdims=True)


def baseline_band_power(profile: SubjectProfile, band: Optional[Tuple[float, float]] = None) -> float:
    """Expected baseline noise power (uV^2) inside band for the shaped spectrum."""
    band = band or profile.drift_band
    n = int(FILE_SECONDS * profile.fs)
    freqs = np.fft.rfftfreq(n, d=1.0 / profile.fs)[1:]
    weights = freqs ** (-profile.alpha)
    inside = (freqs >= band[0]) & (freqs <= band[1])
    return profile.noise_uv ** 2 * float(weights[inside].sum() / weights.sum())


def drift_envelope(t: np.ndarray, windows: List[Tuple[float, float]], gain: float, floor: float = 0.0) -> np.ndarray:
    """Planted power multiplier: max(gain - 1, 0) times a linear ramp inside each window."""
    env = np.zeros_like(t)
    excess = max(gain - 1.0, 0.0)
    for t0, t1 in windows:
        inside = (t >= t0) & (t < t1)
        ramp = floor + (1.0 - floor) * (t[inside] - t0) / (t1 - t0)
        env[inside] = excess * ramp
    return env


def artifact_times(profile: SubjectProfile, start: float, end: float) -> List[ArtifactBurst]:
    """Poisson burst onsets over the whole recording, independent of labels."""
    rng = _rng(profile, 1)
    hours = (end - start) / 3600.0
    count = int(rng.poisson(profile.artifact_rate * hours)) if profile.artifact_rate > 0 else 0
    times = np.sort(rng.uniform(start, end - 2.0, size=count))
    durations = rng.uniform(0.5, 2.0, size=count)
    return [ArtifactBurst(float(t), float(d)) for t, d in zip(times, durations)]


class SyntheticSubject:
    """Lazily generated recording: files are synthesized on iteration, one hour at a time."""

    def __init__(self, profile: SubjectProfile):
        self.profile = profile
        self.seizures, end = timeline(profile)
        self.clusters = _check_clusters(profile, self.seizures)
        self.spans = _file_cuts(self.seizures, EPOCH_START, end)
        windows = [(c.lead_onset - PREICTAL_LEAD_S, c.lead_onset - SPH_S) for c in self.clusters]
        self.truth = GroundTruth(
            seizures=[(s.onset, s.offset) for s in self.seizures],
            drift_intervals=windows,
            artifacts=artifact_times(profile, EPOCH_START, end),
            start=EPOCH_START,
            end=end,
        )
        self._band_power = baseline_band_power(profile)
        self._phase = _rng(profile, 2).uniform(0, 2 * np.pi, size=len(profile.channels))
        self._artifact_gain = _rng(profile, 3).uniform(0.5, 1.5, size=len(profile.channels))

    def file_name(self, i: int) -> str:
        return f"{self.profile.subject_id}_{i + 1:02d}.edf"

    @property
    def annotations(self) -> List[FileAnnotation]:
        files = []
        for i, (t0, t1) in enumerate(self.spans):
            entry = FileAnnotation(self.file_name(i), t0, t1 - t0)
            entry.seizures = [SeizureAnnotation(entry.file, s.onset - t0, s.offset - t0, t0)
                              for s in self.seizures if t0 <= s.onset < t1]
            files.append(entry)
        return files

    def record(self, i: int) -> EEGRecord:
        p = self.profile
        t0, t1 = self.spans[i]
        n = int(round((t1 - t0) * p.fs))
        c = len(p.channels)
        rng = _rng(p, 100 + i)
        t = t0 + np.arange(n) / p.fs

        data = p.noise_uv * pink_noise(rng, c, n, p.alpha)
        data += p.rhythm_uv * np.sin(2 * np.pi * p.rhythm_hz * (t - EPOCH_START)[None, :] + self._phase[:, None])

        env = drift_envelope(t, self.truth.drift_intervals, p.drift_gain, p.drift_floor)
        if np.any(env > 0):
            data += np.sqrt(env * self._band_power)[None, :] * band_noise(rng, c, n, p.fs, p.drift_band)

        for burst in self.truth.artifacts:
            if burst.time + burst.duration <= t0 or burst.time >= t1:
                continue
            first = int(round((burst.time - t0) * p.fs))
            length = int(round(burst.duration * p.fs))
            a, b = max(0, first), min(n, first + length)
            if b <= a:
                continue
            # the whole burst is drawn so a file cut does not change its samples
            noise = _rng(p, 10_000 + int(round(burst.time * 1000)) % 1_000_000).standard_normal((c, length))
            shape = np.hanning(length)
            sl = slice(a - first, b - first)
            data[:, a:b] += p.artifact_amplitude * self._artifact_gain[:, None] * shape[None, sl] * noise[:, sl]

        return EEGRecord(channels=list(p.channels), fs=p.fs, data=data, start_time=t0, source=self.file_name(i))

    def records(self) -> Iterator[EEGRecord]:
        for i in range(len(self.spans)):
            yield self.record(i)

    def __len__(self) -> int:
        return len(self.spans)


def generate_subject(profile: SubjectProfile) -> SyntheticSubject:
    """Timeline, annotations and ground truth; EDF payloads are generated per file on demand."""
    subject = SyntheticSubject(profile)
    logger.info(f"Synthetic subject {profile.subject_id}: {len(subject)} files, "
                f"{(subject.truth.end - subject.truth.start) / 3600:.1f} h, {len(subject.clusters)} clusters, "
                f"{len(subject.truth.artifacts)} artifact bursts")
    return subject


def write_subject(profile: SubjectProfile, out_dir: str) -> str:
    """Write hourly EDF files, annotations.json and ground_truth.json; returns the subject directory."""
    subject = generate_subject(profile)
    subject_dir = os.path.join(out_dir, profile.subject_id)
    os.makedirs(subject_dir, exist_ok=True)
    for record in subject.records():
        save_edf(record, os.path.join(subject_dir, record.source))
    save_annotations(subject.annotations, os.path.join(subject_dir, "annotations.json"), profile.subject_id)
    with open(os.path.join(subject_dir, "ground_truth.json"), "w") as f:
        json.dump({"profile": profile.to_dict(), **subject.truth.to_dict()}, f, indent=2)
    return subject_dir
