"""
Tests for the TSEG1 segment cache and the split access audit.
"""
import numpy as np
import pytest

from component_logger import access_log
from errors import CheckpointError
from segment_store import SegmentWriter, load_segments, load_split, save_segments, split_path
from signal_processing import LabeledSegment


def _segments(rng, n=5):
    return [LabeledSegment(data=rng.normal(size=(3, 40)).astype(np.float32), label=i % 2, t_start=100.0 + 5 * i,
                           subject_id="chb01", interval_start=100.0, cluster=None if i % 2 == 0 else 1)
            for i in range(n)]


def test_cache_round_trip(tmp_path, rng):
    segments = _segments(rng)
    path = str(tmp_path / "train.tseg")
    assert save_segments(segments, path) == 5
    loaded = load_segments(path)
    assert len(loaded) == 5
    for a, b in zip(segments, loaded):
        np.testing.assert_array_equal(a.data, b.data)
        assert (a.label, a.t_start, a.subject_id, a.interval_start, a.cluster) == \
               (b.label, b.t_start, b.subject_id, b.interval_start, b.cluster)


def test_empty_cache(tmp_path):
    path = str(tmp_path / "empty.tseg")
    assert save_segments([], path) == 0
    assert load_segments(path) == []


def test_shape_change_is_rejected(tmp_path, rng):
    with SegmentWriter(str(tmp_path / "x.tseg")) as writer:
        writer.write(_segments(rng, 1)[0])
        with pytest.raises(CheckpointError):
            writer.write(LabeledSegment(data=np.zeros((2, 40), dtype=np.float32), label=0, t_start=0.0))


def test_corrupt_caches(tmp_path, rng):
    path = tmp_path / "bad.tseg"
    path.write_bytes(b"NOPE!" + b"\x00" * 20)
    with pytest.raises(CheckpointError):
        load_segments(str(path))
    good = tmp_path / "good.tseg"
    save_segments(_segments(rng), str(good))
    path.write_bytes(good.read_bytes()[:-7])
    with pytest.raises(CheckpointError):
        load_segments(str(path))


def test_load_split_records_access(tmp_path, rng):
    save_segments(_segments(rng), split_path(str(tmp_path), "train"))
    assert len(load_split(str(tmp_path), "train", "train", "chb01")) == 5
    assert access_log.splits_read("train") == ["train"]
    access_log.assert_not_read("train", "test")
    with pytest.raises(FileNotFoundError):
        load_split(str(tmp_path), "test", "train", "chb01")
    save_segments(_segments(rng), split_path(str(tmp_path), "test"))
    load_split(str(tmp_path), "test", "train", "chb01")
    with pytest.raises(AssertionError):
        access_log.assert_not_read("train", "test")
