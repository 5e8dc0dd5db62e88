"""
Tests for the filter bank and the 5-second windowing.
"""
import numpy as np
import pytest

from edfio import EEGRecord
from errors import FilterDesignError
from protocol import Interval, IntervalMap, Label
from signal_processing import (LabeledSegment, apply_filters, design_filters, fit_channel_stats,
                               frequency_response, segment, window_starts)

FS = 256.0


def _rms(x):
    return float(np.sqrt(np.mean(np.square(x))))


def _record(data, start=0.0):
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    return EEGRecord(channels=[f"C{i}-P{i}" for i in range(data.shape[0])], fs=FS, data=data, start_time=start)


def test_design_is_stable_with_expected_response():
    bank = design_filters(FS)
    assert bank.is_stable()
    response = np.abs(frequency_response(bank, [0.01, 10.0, 60.0]))
    assert response[0] < 0.01
    assert 10 ** (-3 / 20) <= response[1] <= 10 ** (3 / 20)
    assert response[2] < 0.1


def test_design_rejects_low_sampling_rates():
    with pytest.raises(FilterDesignError):
        design_filters(200.0)
    with pytest.raises(FilterDesignError):
        design_filters(FS, band=(5.0, 1.0))


def test_zero_input_gives_zero_output():
    bank = design_filters(FS)
    out = apply_filters(_record(np.zeros((2, 1024))), bank)
    assert np.all(out.data == 0.0)


def test_filtering_never_looks_ahead(rng):
    bank = design_filters(FS)
    data = rng.normal(scale=30.0, size=(2, 2048))
    base = apply_filters(_record(data), bank).data
    for cut in (1, 300, 2047):
        changed = data.copy()
        changed[:, cut:] += rng.normal(scale=100.0, size=(2, 2048 - cut))
        out = apply_filters(_record(changed), bank).data
        np.testing.assert_array_equal(out[:, :cut], base[:, :cut])
        assert not np.allclose(out[:, cut:], base[:, cut:])


def test_notch_removes_mains():
    """A pure 60 Hz tone loses at least 90 % of its RMS once the notch settles."""
    t = np.arange(int(10 * FS)) / FS
    tone = 100.0 * np.sin(2 * np.pi * 60.0 * t)
    out = apply_filters(_record(tone), design_filters(FS)).data[0]
    settled = int(2 * FS)
    assert _rms(out[settled:]) <= 0.1 * _rms(tone[settled:])


def test_dc_offset_is_removed():
    out = apply_filters(_record(np.full(int(10 * FS), 50.0)), design_filters(FS)).data[0]
    assert np.max(np.abs(out[int(2 * FS):])) < 1.0


def test_alpha_band_is_preserved():
    t = np.arange(int(20 * FS)) / FS
    wave = 40.0 * np.sin(2 * np.pi * 10.0 * t)
    out = apply_filters(_record(wave), design_filters(FS)).data[0]
    ratio = _rms(out[int(10 * FS):]) / _rms(wave[int(10 * FS):])
    assert 10 ** (-3 / 20) <= ratio <= 10 ** (3 / 20)


def test_empty_record_and_rate_mismatch():
    bank = design_filters(FS)
    assert apply_filters(_record(np.zeros((2, 0))), bank).n_samples == 0
    other = EEGRecord(channels=["A-B"], fs=512.0, data=np.zeros((1, 10)))
    with pytest.raises(FilterDesignError):
        apply_filters(other, bank)


def test_window_starts_stay_on_the_interval_grid():
    assert window_starts(0.0, 20.0, 0.0, 100.0, 5.0) == [0.0, 5.0, 10.0, 15.0]
    # the record starts mid-interval: windows keep the interval's grid
    assert window_starts(0.0, 20.0, 3.0, 100.0, 5.0) == [5.0, 10.0, 15.0]
    assert window_starts(0.0, 4.0, 0.0, 100.0, 5.0) == []


def _preictal_map(t0=1000.0, t1=2800.0):
    return IntervalMap([
        Interval(Label.INTERICTAL, 0.0, 500.0),
        Interval(Label.EXCLUDED, 500.0, t0),
        Interval(Label.PREICTAL, t0, t1, 0),
        Interval(Label.EXCLUDED, t1, 4000.0),
    ])


@pytest.fixture(scope="module")
def long_record():
    rng = np.random.default_rng(0)
    return _record(rng.normal(size=(2, int(4000 * FS))).astype(np.float32))


def test_segment_counts_for_half_hour_preictal(long_record):
    """1800 s of pre-ictal gives 719 half-overlapping training windows and 360 evaluation windows."""
    train = [s for s in segment(long_record, _preictal_map(), "train") if s.label == 1]
    evaluation = [s for s in segment(long_record, _preictal_map(), "eval") if s.label == 1]
    assert len(train) == 719
    assert len(evaluation) == 360
    assert train[1].t_start - train[0].t_start == 2.5
    assert all(s.cluster == 0 and s.interval_start == 1000.0 for s in evaluation)
    assert evaluation[-1].t_end <= 2800.0


def test_segments_carry_the_right_samples(long_record):
    segs = segment(long_record, _preictal_map(), "eval", subject_id="s1")
    inter = [s for s in segs if s.label == 0]
    assert len(inter) == 100
    first = inter[0]
    assert first.data.shape == (2, 1280)
    assert first.data.dtype == np.float32
    np.testing.assert_array_equal(first.data, long_record.data[:, :1280])
    assert first.subject_id == "s1"


def test_excluded_and_short_records_give_no_segments(long_record):
    excluded = IntervalMap([Interval(Label.EXCLUDED, 0.0, 4000.0)])
    assert segment(long_record, excluded, "eval") == []
    short = _record(np.zeros((2, int(4 * FS))))
    assert segment(short, _preictal_map(), "eval") == []
    with pytest.raises(ValueError):
        segment(short, _preictal_map(), "test")


def test_fit_channel_stats(rng):
    segs = [LabeledSegment(data=rng.normal(loc=[[3.0], [-1.0]], scale=[[2.0], [0.5]], size=(2, 1280)),
                           label=i % 2, t_start=5.0 * i) for i in range(20)]
    stats = fit_channel_stats(segs)
    stacked = np.concatenate([s.data for s in segs], axis=1)
    np.testing.assert_allclose(stats.mean, stacked.mean(axis=1))
    np.testing.assert_allclose(stats.std, stacked.std(axis=1))
    flat = [LabeledSegment(data=np.ones((2, 10)), label=0, t_start=0.0)]
    np.testing.assert_array_equal(fit_channel_stats(flat).std, [1.0, 1.0])
