"""Clinical labeling protocol: seizure clusters, interval maps, eligibility, chronological split.

All times are absolute seconds on the subject timeline and every interval is
half-open [t0, t1).
"""
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from errors import ProtocolError

logger = logging.getLogger("protocol")

PREICTAL_LEAD_S = 2100.0      # pre-ictal starts 35 min before the lead onset
SPH_S = 300.0                 # ... and stops 5 min before it
SAFETY_MARGIN_S = 5400.0      # no inter-ictal data within 1.5 h of a cluster
CLUSTER_GAP_S = 1800.0
MIN_PREICTAL_S = 600.0
MIN_LABELED_S = 5.0           # one segment


class Label(str, Enum):
    PREICTAL = "preictal"
    INTERICTAL = "interictal"
    EXCLUDED = "excluded"


class ExclusionReason(str, Enum):
    MONTAGE = "montage incomplete"
    TIMELINE = "timeline metadata"
    CLUSTERS = "insufficient clusters"


@dataclass
class Seizure:
    onset: float
    offset: float
    file_id: str = ""


@dataclass
class SeizureCluster:
    index: int
    seizures: List[Seizure]
    preictal_s: float = 0.0
    margin_deficient: bool = False
    dropped: bool = False

    @property
    def lead_onset(self) -> float:
        return self.seizures[0].onset

    @property
    def cluster_end(self) -> float:
        return max(s.offset for s in self.seizures)

    @property
    def preictal_window(self) -> Tuple[float, float]:
        return self.lead_onset - PREICTAL_LEAD_S, self.lead_onset - SPH_S

    @property
    def safety_zone(self) -> Tuple[float, float]:
        return self.lead_onset - SAFETY_MARGIN_S, self.cluster_end + SAFETY_MARGIN_S

    def to_dict(self) -> Dict:
        return {
            "index": self.index,
            "lead_onset": self.lead_onset,
            "cluster_end": self.cluster_end,
            "n_seizures": len(self.seizures),
            "preictal_s": self.preictal_s,
            "margin_deficient": self.margin_deficient,
            "dropped": self.dropped,
            "seizures": [[s.onset, s.offset] for s in self.seizures],
        }

    @classmethod
    def from_dict(cls, payload: Dict) -> "SeizureCluster":
        return cls(
            index=int(payload["index"]),
            seizures=[Seizure(float(a), float(b)) for a, b in payload["seizures"]],
            preictal_s=float(payload.get("preictal_s", 0.0)),
            margin_deficient=bool(payload.get("margin_deficient", False)),
            dropped=bool(payload.get("dropped", False)),
        )


@dataclass
class Interval:
    label: Label
    t0: float
    t1: float
    cluster: Optional[int] = None

    @property
    def duration(self) -> float:
        return self.t1 - self.t0

    def to_dict(self) -> Dict:
        out = {"label": self.label.value, "t0": self.t0, "t1": self.t1}
        if self.cluster is not None:
            out["cluster"] = self.cluster
        return out

    @classmethod
    def from_dict(cls, payload: Dict) -> "Interval":
        cluster = payload.get("cluster")
        return cls(Label(payload["label"]), float(payload["t0"]), float(payload["t1"]),
                   None if cluster is None else int(cluster))


@dataclass
class IntervalMap:
    intervals: List[Interval] = field(default_factory=list)
    clusters: List[SeizureCluster] = field(default_factory=list)

    @property
    def start(self) -> float:
        return self.intervals[0].t0 if self.intervals else 0.0

    @property
    def end(self) -> float:
        return self.intervals[-1].t1 if self.intervals else 0.0

    def label_at(self, t: float) -> Label:
        for interval in self.intervals:
            if interval.t0 <= t < interval.t1:
                return interval.label
        return Label.EXCLUDED

    def interval_at(self, t: float) -> Optional[Interval]:
        for interval in self.intervals:
            if interval.t0 <= t < interval.t1:
                return interval
        return None

    def labeled(self, label: Label) -> List[Interval]:
        return [i for i in self.intervals if i.label == label]

    def duration(self, label: Label) -> float:
        return sum(i.duration for i in self.labeled(label))

    def restrict(self, t0: float, t1: float) -> "IntervalMap":
        return carve(self, {Label.PREICTAL: [(t0, t1)], Label.INTERICTAL: [(t0, t1)]}, bounds=(t0, t1))

    @property
    def valid_clusters(self) -> List[SeizureCluster]:
        return [c for c in self.clusters if not c.dropped]

    def to_dict(self) -> Dict:
        return {
            "intervals": [i.to_dict() for i in self.intervals],
            "clusters": [c.to_dict() for c in self.clusters],
        }

    @classmethod
    def from_dict(cls, payload: Dict) -> "IntervalMap":
        return cls([Interval.from_dict(i) for i in payload.get("intervals", [])],
                   [SeizureCluster.from_dict(c) for c in payload.get("clusters", [])])


def cluster_seizures(seizures: Sequence[Seizure], gap_s: float = CLUSTER_GAP_S,
                     reference: str = "offset") -> List[SeizureCluster]:
    """Greedy left-to-right grouping of seizures separated by less than gap_s.

    reference="offset" measures the gap from the previous seizure's offset to
    the next onset; "onset" measures onset to onset.
    """
    if reference not in ("offset", "onset"):
        raise ProtocolError(f"unknown gap reference {reference!r}")
    for s in seizures:
        if not s.offset > s.onset:
            raise ProtocolError(f"seizure offset {s.offset} must follow its onset {s.onset}")
    for prev, nxt in zip(seizures, seizures[1:]):
        if not nxt.onset > prev.onset:
            raise ProtocolError(f"seizure onsets must be strictly increasing ({prev.onset} then {nxt.onset})")

    clusters: List[SeizureCluster] = []
    for s in seizures:
        if clusters:
            prev = clusters[-1].seizures[-1]
            gap = s.onset - (prev.offset if reference == "offset" else prev.onset)
            if gap < gap_s:
                clusters[-1].seizures.append(s)
                continue
        clusters.append(SeizureCluster(index=len(clusters), seizures=[s]))
    return clusters


def merge_extents(extents: Iterable[Tuple[float, float]]) -> List[Tuple[float, float]]:
    merged: List[List[float]] = []
    for t0, t1 in sorted(extents):
        if t1 <= t0:
            continue
        if merged and t0 <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], t1)
        else:
            merged.append([t0, t1])
    return [(a, b) for a, b in merged]


def label_point(t: float, clusters: Sequence[SeizureCluster], extents: Sequence[Tuple[float, float]],
                dropped: Sequence[int] = ()) -> Tuple[Label, Optional[int]]:
    """Label of a single instant; the reference rule the interval map is built from."""
    if not any(a <= t < b for a, b in extents):
        return Label.EXCLUDED, None
    def in_zone(cluster: SeizureCluster) -> bool:
        z0, z1 = cluster.safety_zone
        return z0 <= t < z1

    for c in clusters:
        if c.index in dropped:
            continue
        p0, p1 = c.preictal_window
        if p0 <= t < p1 and not any(in_zone(other) for other in clusters if other is not c):
            return Label.PREICTAL, c.index
    if any(in_zone(c) for c in clusters):
        return Label.EXCLUDED, None
    return Label.INTERICTAL, None


def _elementary(clusters: Sequence[SeizureCluster], extents: Sequence[Tuple[float, float]],
                dropped: Sequence[int]) -> List[Interval]:
    lo, hi = extents[0][0], extents[-1][1]
    points = {lo, hi}
    for a, b in extents:
        points.update((a, b))
    for c in clusters:
        points.update(c.preictal_window)
        points.update(c.safety_zone)
    points = sorted(p for p in points if lo <= p <= hi)
    intervals: List[Interval] = []
    for a, b in zip(points, points[1:]):
        label, cluster = label_point(0.5 * (a + b), clusters, extents, dropped)
        last = intervals[-1] if intervals else None
        if last is not None and last.label == label and last.cluster == cluster and last.t1 == a:
            last.t1 = b
        else:
            intervals.append(Interval(label, a, b, cluster))
    return intervals


def build_interval_map(clusters: Sequence[SeizureCluster], extents: Iterable[Tuple[float, float]],
                       min_preictal_s: float = MIN_PREICTAL_S) -> IntervalMap:
    """Label the recorded timeline as pre-ictal / inter-ictal / excluded.

    Each cluster owns the pre-ictal span [lead-2100, lead-300) minus unrecorded
    time and minus the safety zones of other clusters. Clusters whose pre-ictal
    span got clipped are flagged margin-deficient; below min_preictal_s they
    are dropped and their span becomes excluded.
    """
    extents = merge_extents(extents)
    if not extents:
        return IntervalMap([], list(clusters))
    for prev, nxt in zip(clusters, clusters[1:]):
        if nxt.lead_onset <= prev.cluster_end:
            raise ProtocolError(f"clusters {prev.index} and {nxt.index} overlap")

    intervals = _elementary(clusters, extents, dropped=())
    dropped = []
    for c in clusters:
        c.preictal_s = sum(i.duration for i in intervals if i.label == Label.PREICTAL and i.cluster == c.index)
        c.margin_deficient = c.preictal_s < PREICTAL_LEAD_S - SPH_S
        c.dropped = c.preictal_s < min_preictal_s
        if c.dropped:
            dropped.append(c.index)
            logger.warning(f"Cluster {c.index} (lead onset {c.lead_onset:.0f} s) dropped: "
                           f"only {c.preictal_s:.0f} s of pre-ictal data")
        elif c.margin_deficient:
            logger.info(f"Cluster {c.index} is margin-deficient ({c.preictal_s:.0f} s pre-ictal)")
    if dropped:
        intervals = _elementary(clusters, extents, dropped)
    return IntervalMap(intervals, list(clusters))


def carve(interval_map: IntervalMap, keep: Dict[Label, List[Tuple[float, float]]],
          bounds: Optional[Tuple[float, float]] = None) -> IntervalMap:
    """Keep labeled time only inside the given per-label ranges; everything else is excluded."""
    lo, hi = bounds if bounds is not None else (interval_map.start, interval_map.end)
    pieces: List[Interval] = []
    for interval in interval_map.intervals:
        a, b = max(interval.t0, lo), min(interval.t1, hi)
        if b <= a:
            continue
        cuts = {a, b}
        for r0, r1 in keep.get(interval.label, []):
            cuts.update(x for x in (r0, r1) if a < x < b)
        cuts = sorted(cuts)
        for x0, x1 in zip(cuts, cuts[1:]):
            mid = 0.5 * (x0 + x1)
            kept = interval.label != Label.EXCLUDED and any(r0 <= mid < r1 for r0, r1 in keep.get(interval.label, []))
            label = interval.label if kept else Label.EXCLUDED
            cluster = interval.cluster if kept else None
            last = pieces[-1] if pieces else None
            if last is not None and last.label == label and last.cluster == cluster and last.t1 == x0:
                last.t1 = x1
            else:
                pieces.append(Interval(label, x0, x1, cluster))
    return IntervalMap(pieces, interval_map.clusters)


@dataclass
class SubjectMetadata:
    subject_id: str
    montage_missing: List[str] = field(default_factory=list)
    timeline_ok: bool = True
    n_clusters: int = 0


@dataclass
class Eligibility:
    included: bool
    reason: str = ""

    def to_dict(self) -> Dict:
        return {"included": self.included, "reason": self.reason}


def check_eligibility(meta: SubjectMetadata) -> Eligibility:
    """Montage, then timeline metadata, then cluster count."""
    if meta.montage_missing:
        return Eligibility(False, f"{ExclusionReason.MONTAGE.value}: missing {', '.join(meta.montage_missing)}")
    if not meta.timeline_ok:
        return Eligibility(False, ExclusionReason.TIMELINE.value)
    if meta.n_clusters < 2:
        return Eligibility(False, ExclusionReason.CLUSTERS.value)
    return Eligibility(True, "")


@dataclass
class SplitPlan:
    train_clusters: List[int]
    test_cluster: int
    boundary: float
    val_start: float
    train: IntervalMap
    val: IntervalMap
    test: IntervalMap
    val_fallback: bool = False

    def maps(self) -> Dict[str, IntervalMap]:
        return {"train": self.train, "val": self.val, "test": self.test}

    def to_dict(self) -> Dict:
        return {
            "train_clusters": self.train_clusters,
            "test_cluster": self.test_cluster,
            "boundary": self.boundary,
            "val_start": self.val_start,
            "val_fallback": self.val_fallback,
            "train": [i.to_dict() for i in self.train.intervals if i.label != Label.EXCLUDED],
            "val": [i.to_dict() for i in self.val.intervals if i.label != Label.EXCLUDED],
            "test": [i.to_dict() for i in self.test.intervals if i.label != Label.EXCLUDED],
        }

    @classmethod
    def from_dict(cls, payload: Dict, clusters: Sequence[SeizureCluster] = ()) -> "SplitPlan":
        def load(name: str) -> IntervalMap:
            return IntervalMap([Interval.from_dict(i) for i in payload[name]], list(clusters))

        return cls(
            train_clusters=[int(c) for c in payload["train_clusters"]],
            test_cluster=int(payload["test_cluster"]),
            boundary=float(payload["boundary"]),
            val_start=float(payload["val_start"]),
            train=load("train"),
            val=load("val"),
            test=load("test"),
            val_fallback=bool(payload.get("val_fallback", False)),
        )


def _tail_cut(intervals: Sequence[Interval], fraction: float, end: float) -> float:
    """Start of the trailing `fraction` of the intervals' total duration."""
    need = fraction * sum(i.duration for i in intervals)
    if need <= 0:
        return end
    for interval in reversed(intervals):
        if need <= interval.duration:
            return interval.t1 - need
        need -= interval.duration
    return intervals[0].t0


def _has_both(interval_map: IntervalMap) -> bool:
    return (interval_map.duration(Label.PREICTAL) >= MIN_LABELED_S
            and interval_map.duration(Label.INTERICTAL) >= MIN_LABELED_S)


def chronological_split(interval_map: IntervalMap, val_fraction: float = 0.2) -> SplitPlan:
    """First N-1 valid clusters train, the last one tests.

    The test split starts where the (N-1)-th cluster's safety zone ends.
    Validation is the trailing val_fraction of labeled training time; when
    that tail would miss a label, each label contributes its own tail.
    """
    clusters = interval_map.valid_clusters
    if len(clusters) < 2:
        raise ProtocolError(f"chronological split needs >= 2 valid clusters, got {len(clusters)}")
    test = clusters[-1]
    boundary = clusters[-2].safety_zone[1]
    start, end = interval_map.start, interval_map.end
    train_span = interval_map.restrict(start, boundary)
    test_map = interval_map.restrict(boundary, end)

    labeled = [i for i in train_span.intervals if i.label != Label.EXCLUDED]
    cut = _tail_cut(labeled, val_fraction, boundary)
    both = [(start, cut)]
    train = carve(train_span, {Label.PREICTAL: both, Label.INTERICTAL: both}, bounds=(start, boundary))
    val = carve(train_span, {Label.PREICTAL: [(cut, boundary)], Label.INTERICTAL: [(cut, boundary)]},
                bounds=(start, boundary))
    fallback = False
    if val_fraction > 0 and not (_has_both(val) and _has_both(train)):
        fallback = True
        cuts = {label: _tail_cut(train_span.labeled(label), val_fraction, boundary)
                for label in (Label.PREICTAL, Label.INTERICTAL)}
        train = carve(train_span, {label: [(start, c)] for label, c in cuts.items()}, bounds=(start, boundary))
        val = carve(train_span, {label: [(c, boundary)] for label, c in cuts.items()}, bounds=(start, boundary))
        cut = min(cuts.values())
        logger.info(f"Validation tail missed a label; using per-label tails (cuts {cuts})")

    return SplitPlan(
        train_clusters=[c.index for c in clusters[:-1]],
        test_cluster=test.index,
        boundary=boundary,
        val_start=cut,
        train=train,
        val=val,
        test=test_map,
        val_fallback=fallback,
    )


def protocol_report(subject_id: str, interval_map: IntervalMap, plan: Optional[SplitPlan],
                    eligibility: Eligibility) -> str:
    """Human-readable audit of clusters, labeled durations and split assignment."""
    lines = [f"Subject {subject_id}: {'included' if eligibility.included else 'EXCLUDED (' + eligibility.reason + ')'}"]
    for c in interval_map.clusters:
        if plan is None:
            role = "-"
        elif c.dropped:
            role = "dropped"
        elif c.index == plan.test_cluster:
            role = "test"
        else:
            role = "train"
        flags = " margin-deficient" if c.margin_deficient else ""
        lines.append(f"  cluster {c.index + 1}: lead onset {c.lead_onset:.0f} s, {len(c.seizures)} seizure(s), "
                     f"pre-ictal {c.preictal_s:.0f} s{flags} -> {role}")
    for name, m in (plan.maps().items() if plan else [("all", interval_map)]):
        lines.append(f"  {name:>5}: pre-ictal {m.duration(Label.PREICTAL) / 3600:.2f} h, "
                     f"inter-ictal {m.duration(Label.INTERICTAL) / 3600:.2f} h")
    if plan is not None:
        lines.append(f"  test boundary {plan.boundary:.0f} s, validation from {plan.val_start:.0f} s")
    return "\n".join(lines)


def save_protocol(path: str, subject_id: str, interval_map: IntervalMap, plan: Optional[SplitPlan],
                  eligibility: Eligibility):
    payload = {
        "subject": subject_id,
        "eligibility": eligibility.to_dict(),
        "interval_map": interval_map.to_dict(),
        "split": plan.to_dict() if plan else None,
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)


def load_protocol(path: str) -> Tuple[str, IntervalMap, Optional[SplitPlan], Eligibility]:
    """Inverse of save_protocol."""
    with open(path, "r") as f:
        payload = json.load(f)
    interval_map = IntervalMap.from_dict(payload["interval_map"])
    split = payload.get("split")
    plan = SplitPlan.from_dict(split, interval_map.clusters) if split else None
    eligibility = Eligibility(**payload["eligibility"])
    return payload.get("subject", ""), interval_map, plan, eligibility
