"""
Tests for seizure clustering, interval labeling, eligibility and the
chronological split.

Why this matters:
    Every later number depends on which seconds are pre-ictal, inter-ictal or
    excluded, and on the test cluster never leaking into training. The
    interval map is therefore checked against an independent per-second
    labeler and the split against strict time ordering.
"""
import numpy as np
import pytest

from errors import ProtocolError
from protocol import (PREICTAL_LEAD_S, SAFETY_MARGIN_S, SPH_S, Eligibility, Label, Seizure, SubjectMetadata,
                      build_interval_map, check_eligibility, chronological_split, cluster_seizures,
                      load_protocol, merge_extents, protocol_report, save_protocol)


def _seizures(*spans):
    return [Seizure(float(a), float(b)) for a, b in spans]


def _brute_label(t, clusters, extents):
    """Per-instant labeling written directly from the protocol rules."""
    if not any(a <= t < b for a, b in extents):
        return Label.EXCLUDED
    zones = [(c.lead_onset - SAFETY_MARGIN_S, c.cluster_end + SAFETY_MARGIN_S) for c in clusters]
    for i, c in enumerate(clusters):
        if c.dropped:
            continue
        if c.lead_onset - PREICTAL_LEAD_S <= t < c.lead_onset - SPH_S:
            in_other = any(z0 <= t < z1 for j, (z0, z1) in enumerate(zones) if j != i)
            if not in_other:
                return Label.PREICTAL
    if any(z0 <= t < z1 for z0, z1 in zones):
        return Label.EXCLUDED
    return Label.INTERICTAL


def test_close_seizures_share_a_cluster():
    clusters = cluster_seizures(_seizures((0, 60), (1200, 1260)))
    assert len(clusters) == 1
    assert clusters[0].lead_onset == 0.0
    assert clusters[0].cluster_end == 1260.0


def test_distant_seizures_form_separate_clusters():
    clusters = cluster_seizures(_seizures((0, 60), (2400, 2460)))
    assert [c.lead_onset for c in clusters] == [0.0, 2400.0]
    single = cluster_seizures(_seizures((10, 20)))
    assert len(single) == 1 and single[0].seizures[0].onset == 10.0


def test_gap_reference_onset_vs_offset():
    # offset gap 1790 s (< 30 min), onset gap 2390 s (>= 30 min)
    seizures = _seizures((0, 600), (2390, 2450))
    assert len(cluster_seizures(seizures, reference="offset")) == 1
    assert len(cluster_seizures(seizures, reference="onset")) == 2


def test_unsorted_or_inverted_seizures_raise():
    with pytest.raises(ProtocolError):
        cluster_seizures(_seizures((100, 160), (0, 60)))
    with pytest.raises(ProtocolError):
        cluster_seizures(_seizures((100, 90)))


def test_preictal_window_arithmetic():
    clusters = cluster_seizures(_seizures((36000, 36060)))
    imap = build_interval_map(clusters, [(0.0, 80000.0)])
    assert imap.label_at(33899.0) == Label.EXCLUDED
    assert imap.label_at(33900.0) == Label.PREICTAL
    assert imap.label_at(35699.0) == Label.PREICTAL
    assert imap.label_at(35700.0) == Label.EXCLUDED
    assert imap.duration(Label.PREICTAL) == 1800.0
    assert not clusters[0].margin_deficient


def test_safety_zone_forbids_interictal():
    clusters = cluster_seizures(_seizures((36000, 36300)))
    imap = build_interval_map(clusters, [(0.0, 80000.0)])
    assert imap.label_at(30599.0) == Label.INTERICTAL
    assert imap.label_at(30600.0) == Label.EXCLUDED
    assert imap.label_at(41699.0) == Label.EXCLUDED
    assert imap.label_at(41700.0) == Label.INTERICTAL


def test_no_seizures_means_all_interictal():
    imap = build_interval_map([], [(0.0, 3600.0), (3600.0, 7200.0)])
    assert imap.duration(Label.INTERICTAL) == 7200.0
    assert len(imap.intervals) == 1


def test_margin_deficient_and_dropped_clusters():
    clusters = cluster_seizures(_seizures((1000, 1060), (30000, 30060)))
    imap = build_interval_map(clusters, [(0.0, 60000.0)])
    assert clusters[0].preictal_s == 700.0
    assert clusters[0].margin_deficient and not clusters[0].dropped

    clusters = cluster_seizures(_seizures((800, 860), (30000, 30060)))
    imap = build_interval_map(clusters, [(0.0, 60000.0)])
    assert clusters[0].dropped
    assert imap.label_at(100.0) == Label.EXCLUDED
    assert len(imap.valid_clusters) == 1


def _random_timeline(rng, n_seizures=4):
    onsets = np.cumsum(rng.uniform(2000, 20000, size=n_seizures)) + 3000
    spans = [(float(t), float(t + rng.uniform(20, 120))) for t in onsets]
    extents = []
    t = 0.0
    end = spans[-1][1] + 8000
    while t < end:
        length = float(rng.uniform(1800, 7200))
        extents.append((t, min(t + length, end)))
        t += length + float(rng.choice([0.0, 0.0, rng.uniform(10, 2000)]))
    return spans, extents, end


def test_interval_map_matches_per_second_labeler(rng):
    """200 randomized timelines with gaps: random instants and both sides of every edge get the rule-derived label."""
    for _ in range(200):
        spans, extents, end = _random_timeline(rng)
        clusters = cluster_seizures(_seizures(*spans))
        imap = build_interval_map(clusters, extents)
        merged = merge_extents(extents)
        edges = [x for i in imap.intervals for x in (i.t0 - 0.25, i.t0 + 0.25)]
        for instant in np.concatenate([rng.uniform(0.0, end, size=300), edges]):
            assert imap.label_at(instant) == _brute_label(instant, clusters, merged), instant
        for prev, nxt in zip(imap.intervals, imap.intervals[1:]):
            assert prev.t1 <= nxt.t0


def test_eligibility_rules():
    assert check_eligibility(SubjectMetadata("s", n_clusters=3)) == Eligibility(True, "")
    assert check_eligibility(SubjectMetadata("s", n_clusters=1)).reason == "insufficient clusters"
    assert check_eligibility(SubjectMetadata("s", timeline_ok=False, n_clusters=3)).reason == "timeline metadata"
    montage = check_eligibility(SubjectMetadata("s", montage_missing=["FZ-CZ"], n_clusters=3))
    assert not montage.included and "FZ-CZ" in montage.reason


LEADS = (20000.0, 50000.0, 80000.0)


@pytest.fixture
def three_cluster_map():
    clusters = cluster_seizures(_seizures(*[(t, t + 60) for t in LEADS]))
    return build_interval_map(clusters, [(0.0, 100000.0)])


def test_split_assigns_last_cluster_to_test(three_cluster_map):
    plan = chronological_split(three_cluster_map, 0.2)
    assert plan.train_clusters == [0, 1]
    assert plan.test_cluster == 2
    assert plan.boundary == LEADS[1] + 60 + SAFETY_MARGIN_S
    assert not plan.val_fallback


def test_split_has_no_leakage(three_cluster_map):
    """Train ends before validation starts; both end before the test split starts."""
    plan = chronological_split(three_cluster_map, 0.2)
    train = [i for i in plan.train.intervals if i.label != Label.EXCLUDED]
    val = [i for i in plan.val.intervals if i.label != Label.EXCLUDED]
    test = [i for i in plan.test.intervals if i.label != Label.EXCLUDED]
    assert max(i.t1 for i in train) <= plan.val_start <= min(i.t0 for i in val)
    assert max(i.t1 for i in val) <= plan.boundary <= min(i.t0 for i in test)
    assert {i.cluster for i in test if i.label == Label.PREICTAL} == {2}


def test_validation_is_trailing_fraction(three_cluster_map):
    plan = chronological_split(three_cluster_map, 0.2)
    labeled_val = plan.val.duration(Label.PREICTAL) + plan.val.duration(Label.INTERICTAL)
    labeled_train = plan.train.duration(Label.PREICTAL) + plan.train.duration(Label.INTERICTAL)
    assert labeled_val == pytest.approx(0.2 * (labeled_val + labeled_train))
    assert plan.val.duration(Label.PREICTAL) == 1800.0


def test_ten_hour_training_span_gives_two_hour_validation():
    """Interictal [0, 34200) plus 1800 s of pre-ictal is 10 h of labeled training time."""
    lead = 34200.0 + SAFETY_MARGIN_S
    second = lead + 60 + 2 * SAFETY_MARGIN_S + 3600
    clusters = cluster_seizures(_seizures((lead, lead + 60), (second, second + 60)))
    imap = build_interval_map(clusters, [(0.0, second + 20000)])
    plan = chronological_split(imap, 0.2)
    assert plan.train_clusters == [0]
    val = plan.val.duration(Label.PREICTAL) + plan.val.duration(Label.INTERICTAL)
    train = plan.train.duration(Label.PREICTAL) + plan.train.duration(Label.INTERICTAL)
    assert val == pytest.approx(7200.0)
    assert train == pytest.approx(28800.0)
    # a single training cluster leaves no pre-ictal time before a plain 2 h tail,
    # so each label contributes its own trailing 20 %
    assert plan.val_fallback
    assert plan.val.duration(Label.PREICTAL) == pytest.approx(360.0)


def test_split_needs_two_clusters():
    clusters = cluster_seizures(_seizures((20000, 20060)))
    with pytest.raises(ProtocolError):
        chronological_split(build_interval_map(clusters, [(0.0, 40000.0)]))


def test_protocol_round_trip(tmp_path, three_cluster_map):
    plan = chronological_split(three_cluster_map, 0.2)
    path = str(tmp_path / "protocol.json")
    save_protocol(path, "s01", three_cluster_map, plan, Eligibility(True, ""))
    subject, imap, loaded, eligibility = load_protocol(path)
    assert subject == "s01" and eligibility.included
    assert imap.to_dict() == three_cluster_map.to_dict()
    assert loaded.to_dict() == plan.to_dict()
    assert loaded.test.duration(Label.PREICTAL) == plan.test.duration(Label.PREICTAL)


def test_protocol_report_lists_roles(three_cluster_map):
    plan = chronological_split(three_cluster_map, 0.2)
    text = protocol_report("s01", three_cluster_map, plan, Eligibility(True, ""))
    assert "cluster 1" in text and "-> train" in text
    assert "cluster 3" in text and "-> test" in text


def _labeled(interval_map):
    return [i for i in interval_map.intervals if i.label != Label.EXCLUDED]


def test_randomized_splits_never_overlap_or_cross_gaps(rng):
    split = 0
    while split < 60:
        spans, extents, _ = _random_timeline(rng, n_seizures=int(rng.integers(3, 6)))
        imap = build_interval_map(cluster_seizures(_seizures(*spans)), extents)
        if len(imap.valid_clusters) < 2:
            continue
        split += 1
        plan = chronological_split(imap, float(rng.choice([0.1, 0.2, 0.3])))
        merged = merge_extents(extents)
        pieces = sorted((i for m in plan.maps().values() for i in _labeled(m)), key=lambda i: i.t0)
        for prev, nxt in zip(pieces, pieces[1:]):
            assert prev.t1 <= nxt.t0
        for piece in pieces:
            assert any(a <= piece.t0 and piece.t1 <= b for a, b in merged), piece
            assert imap.label_at(0.5 * (piece.t0 + piece.t1)) == piece.label
        assert max(i.t1 for i in _labeled(plan.train) + _labeled(plan.val)) <= plan.boundary
        assert min(i.t0 for i in _labeled(plan.test)) >= plan.boundary
        assert {i.cluster for i in plan.test.labeled(Label.PREICTAL)} <= {plan.test_cluster}
        assert plan.test_cluster not in {i.cluster for i in plan.train.labeled(Label.PREICTAL)}
        for label in (Label.PREICTAL, Label.INTERICTAL):
            train, val = plan.train.labeled(label), plan.val.labeled(label)
            if train and val:
                assert max(i.t1 for i in train) <= min(i.t0 for i in val)


def test_clustering_is_idempotent(rng):
    for _ in range(200):
        onsets = np.cumsum(rng.uniform(100, 4000, size=int(rng.integers(1, 12))))
        seizures = [Seizure(float(t), float(t + rng.uniform(5, 90))) for t in onsets]
        reference = str(rng.choice(["offset", "onset"]))
        clusters = cluster_seizures(seizures, reference=reference)
        flattened = [s for c in clusters for s in c.seizures]
        again = cluster_seizures(flattened, reference=reference)
        assert [c.to_dict() for c in again] == [c.to_dict() for c in clusters]
        for c in clusters:
            assert len(cluster_seizures(c.seizures, reference=reference)) == 1
