"""
Tests for the synthetic subject generator.

The generator is the only ground truth available without clinical data, so
the planted drift is measured back out of the samples and the annotations
are pushed through the same protocol code the real data uses.
"""
import os

import numpy as np
import pytest
from scipy.signal import welch

from edfio import load_annotations, read_edf, seizures_from_annotations
from errors import ConfigError, ProtocolError
from protocol import Label, Seizure, build_interval_map, chronological_split, cluster_seizures
from synthgen import (EPOCH_START, SubjectProfile, artifact_profile, artifact_times, clean_profile,
                      drift_envelope, generate_subject, write_subject)

TWO_CHANNELS = ("FP1-F7", "F7-T7")


def _profile(**overrides):
    return clean_profile(4, **{"channels": TWO_CHANNELS, "hours_per_gap": 0.5, **overrides})


def _band_power(x, fs, band=(15.0, 25.0)):
    freqs, psd = welch(x, fs=fs, nperseg=int(fs), axis=-1)
    inside = (freqs >= band[0]) & (freqs <= band[1])
    return float(np.mean(np.sum(psd[..., inside], axis=-1) * (freqs[1] - freqs[0])))


def test_generation_is_deterministic():
    a = generate_subject(_profile()).record(0)
    b = generate_subject(_profile()).record(0)
    np.testing.assert_array_equal(a.data, b.data)
    other = generate_subject(clean_profile(5, channels=TWO_CHANNELS, hours_per_gap=0.5)).record(0)
    assert not np.allclose(a.data, other.data)


def test_timeline_places_drift_before_each_cluster():
    subject = generate_subject(_profile())
    assert len(subject.clusters) == 3
    lead = EPOCH_START + 1800.0 + 5400.0
    assert subject.truth.seizures[0] == (lead, lead + 60.0)
    assert subject.truth.drift_intervals[0] == (lead - 2100.0, lead - 300.0)
    assert all(t1 - t0 <= 3600.0 + 60.0 for t0, t1 in subject.spans)
    assert all(a[1] == b[0] for a, b in zip(subject.spans, subject.spans[1:]))


def test_planted_drift_reaches_the_gain():
    """Band power over the last minute of the pre-ictal window is about 3x the baseline."""
    subject = generate_subject(_profile())
    fs = subject.profile.fs
    window_end = subject.truth.drift_intervals[0][1]
    file_start, file_end = subject.spans[1]
    assert file_start <= window_end - 60.0 and window_end <= file_end
    late = subject.record(1).data
    a = int((window_end - 60.0 - file_start) * fs)
    drifted = _band_power(late[:, a:a + int(60 * fs)], fs)
    baseline = _band_power(subject.record(0).data[:, :int(60 * fs)], fs)
    assert drifted / baseline == pytest.approx(2.97, rel=0.2)


def test_unit_gain_plants_nothing():
    no_drift = generate_subject(_profile(drift_gain=0.0)).record(1)
    unit = generate_subject(_profile(drift_gain=1.0)).record(1)
    np.testing.assert_array_equal(no_drift.data, unit.data)


def test_drift_envelope_ramp():
    t = np.array([0.0, 50.0, 99.0, 100.0])
    np.testing.assert_allclose(drift_envelope(t, [(0.0, 100.0)], 3.0), [0.0, 1.0, 1.98, 0.0])
    np.testing.assert_allclose(drift_envelope(t, [(0.0, 100.0)], 3.0, floor=0.5)[0], 1.0)


def test_artifact_rate():
    profile = SubjectProfile(seed=1, channels=TWO_CHANNELS)
    bursts = artifact_times(profile, 0.0, 100 * 3600.0)
    assert 140 <= len(bursts) <= 260
    assert all(0.0 <= b.time < 100 * 3600.0 and 0.5 <= b.duration <= 2.0 for b in bursts)
    assert generate_subject(_profile()).truth.artifacts == []
    heavy = artifact_profile(profile, 5.0)
    assert heavy.artifact_rate == 10.0
    with pytest.raises(ConfigError):
        artifact_profile(profile, -1.0)


def test_invalid_profiles():
    with pytest.raises(ConfigError):
        SubjectProfile(n_clusters=1)
    with pytest.raises(ConfigError):
        SubjectProfile(drift_band=(15.0, 200.0))
    with pytest.raises(ProtocolError):
        generate_subject(_profile(hours_per_gap=-2.5))


def test_annotations_drive_the_protocol():
    """Annotations of a 3-cluster subject split into clusters 1-2 for training and 3 for test."""
    subject = generate_subject(_profile())
    files = subject.annotations
    assert sum(len(f.seizures) for f in files) == 3
    seizures = seizures_from_annotations(files)
    assert [(s.absolute_onset, s.absolute_offset) for s in seizures] == subject.truth.seizures
    clusters = cluster_seizures([Seizure(s.absolute_onset, s.absolute_offset) for s in seizures])
    extents = [(f.start_time, f.start_time + f.duration_s) for f in files]
    plan = chronological_split(build_interval_map(clusters, extents), 0.2)
    assert plan.train_clusters == [0, 1]
    assert plan.test_cluster == 2


def _annotated_map(files):
    seizures = seizures_from_annotations(files)
    clusters = cluster_seizures([Seizure(s.absolute_onset, s.absolute_offset) for s in seizures])
    return build_interval_map(clusters, [(f.start_time, f.start_time + f.duration_s) for f in files])


def test_drift_intervals_are_the_derived_preictal_intervals():
    for profile in (_profile(), _profile(n_clusters=5, hours_per_gap=1.0, seizures_per_cluster=2)):
        subject = generate_subject(profile)
        imap = _annotated_map(subject.annotations)
        assert [(i.t0, i.t1) for i in imap.labeled(Label.PREICTAL)] == subject.truth.drift_intervals


def test_artifacts_ignore_labels():
    """Burst rate per hour is the same in pre-ictal and inter-ictal time."""
    counts = {Label.PREICTAL: 0, Label.INTERICTAL: 0}
    hours = {Label.PREICTAL: 0.0, Label.INTERICTAL: 0.0}
    for seed in range(5):
        profile = SubjectProfile(seed=seed, n_clusters=8, hours_per_gap=1.0, artifact_rate=40.0,
                                 channels=TWO_CHANNELS)
        subject = generate_subject(profile)
        imap = _annotated_map(subject.annotations)
        for label in counts:
            hours[label] += imap.duration(label) / 3600.0
        for burst in subject.truth.artifacts:
            label = imap.label_at(burst.time)
            if label in counts:
                counts[label] += 1
        drifted = generate_subject(SubjectProfile(seed=seed, n_clusters=8, hours_per_gap=1.0, artifact_rate=40.0,
                                                  drift_gain=0.0, channels=TWO_CHANNELS))
        assert drifted.truth.artifacts == subject.truth.artifacts
    assert counts[Label.PREICTAL] > 500
    rates = {label: counts[label] / hours[label] for label in counts}
    assert rates[Label.PREICTAL] / rates[Label.INTERICTAL] == pytest.approx(1.0, abs=0.2)
    assert rates[Label.INTERICTAL] == pytest.approx(40.0, rel=0.1)


def test_zero_gain_preictal_looks_interictal():
    """Without drift the pre-ictal window carries the baseline power in every band."""
    subject = generate_subject(_profile(drift_gain=0.0))
    fs = subject.profile.fs
    t0, t1 = subject.truth.drift_intervals[0]
    file_start, file_end = subject.spans[1]
    assert file_start <= t0 and t1 <= file_end
    preictal = subject.record(1).data[:, int((t0 - file_start) * fs):int((t1 - file_start) * fs)]
    interictal = subject.record(0).data[:, :int(1800 * fs)]
    for band in ((15.0, 25.0), (1.0, 8.0), (30.0, 60.0)):
        ratio = _band_power(preictal, fs, band) / _band_power(interictal, fs, band)
        assert ratio == pytest.approx(1.0, abs=0.1), band


def test_written_subject_reads_back(tmp_path):
    profile = SubjectProfile(seed=2, n_clusters=2, hours_per_gap=0.5, channels=TWO_CHANNELS, subject_id="synth_rt")
    subject = generate_subject(profile)
    subject_dir = write_subject(profile, str(tmp_path))
    files = load_annotations(os.path.join(subject_dir, "annotations.json"))
    assert [f.file for f in files] == [subject.file_name(i) for i in range(len(subject))]
    for i, entry in enumerate(files):
        header, record = read_edf(os.path.join(subject_dir, entry.file))
        original = subject.record(i)
        assert record.channels == list(TWO_CHANNELS)
        assert record.fs == profile.fs
        assert record.start_time == entry.start_time == original.start_time
        assert record.duration_s == entry.duration_s
        for c, sig in enumerate(header.signals):
            step = (sig.physical_max - sig.physical_min) / (sig.digital_max - sig.digital_min)
            assert np.max(np.abs(record.data[c] - original.data[c])) <= step
