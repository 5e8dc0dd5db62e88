"""Alarm post-processing and scoring.

Segment probabilities are fused with a top-K mean over the last W segments,
thresholded, and merged with a refractory period. Sensitivity counts
pre-ictal segments with p > tau; FPR/h counts merged alarm events whose
trigger lies in inter-ictal time.
"""
import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import EvaluationError
from protocol import IntervalMap, Label

logger = logging.getLogger("alarm")

CADENCE_S = 5.0
REFRACTORY_S = 1800.0
THRESHOLD_GRID: Tuple[float, ...] = tuple(round(0.10 + 0.05 * i, 2) for i in range(18))


@dataclass
class ProbabilityTrace:
    t_start: np.ndarray
    p: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.t_start = np.asarray(self.t_start, dtype=np.float64)
        self.p = np.asarray(self.p, dtype=np.float64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.t_start.shape != self.p.shape:
            raise EvaluationError("trace times and probabilities differ in length")
        if self.t_start.size > 1 and np.any(np.diff(self.t_start) <= 0):
            raise EvaluationError("trace times must be strictly increasing")
        if np.any((self.p < 0) | (self.p > 1)):
            raise EvaluationError("trace probabilities must lie in [0, 1]")

    def __len__(self) -> int:
        return int(self.t_start.size)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"t_start": self.t_start, "p": self.p})
        if self.labels is not None:
            frame["label"] = self.labels
        return frame

    def save_csv(self, path: str):
        self.to_frame().to_csv(path, index=False, float_format="%.10g")

    @classmethod
    def load_csv(cls, path: str) -> "ProbabilityTrace":
        frame = pd.read_csv(path)
        labels = frame["label"].to_numpy() if "label" in frame else None
        return cls(frame["t_start"].to_numpy(), frame["p"].to_numpy(), labels)


@dataclass
class AlarmEvent:
    time: float
    score: float
    threshold: float


@dataclass
class EvalReport:
    sensitivity: Optional[float]
    fpr_per_hour: Optional[float]
    tp_seg: int
    fn_seg: int
    n_fp_events: int
    interictal_hours: float
    threshold: float
    n_events: int = 0
    cap_violated: bool = False
    subject_id: str = ""
    label: str = ""

    def to_dict(self) -> Dict:
        return asdict(self)

    @property
    def sensitivity_text(self) -> str:
        return "n/a" if self.sensitivity is None else f"{100 * self.sensitivity:.2f}"

    @property
    def fpr_text(self) -> str:
        return "n/a" if self.fpr_per_hour is None else f"{self.fpr_per_hour:.4f}"


@dataclass
class ThresholdSelection:
    threshold: float
    cap_violated: bool
    grid: List[Dict] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return asdict(self)


def threshold_grid() -> List[float]:
    return list(THRESHOLD_GRID)


def topk_score(window: Sequence[float], k: int) -> float:
    """Mean of the k largest probabilities in the window."""
    values = np.asarray(window, dtype=np.float64)
    if not 1 <= k <= values.size:
        raise ValueError(f"K must lie in [1, {values.size}], got {k}")
    top = np.sort(values)[values.size - k:]
    return math.fsum(top) / k


def contiguous_runs(t_start: np.ndarray, cadence: float = CADENCE_S) -> List[Tuple[int, int]]:
    """[start, stop) index ranges where consecutive segments are exactly one cadence apart."""
    if len(t_start) == 0:
        return []
    breaks = np.flatnonzero(np.abs(np.diff(t_start) - cadence) > 1e-6) + 1
    edges = [0] + breaks.tolist() + [len(t_start)]
    return list(zip(edges[:-1], edges[1:]))


def fused_scores(trace: ProbabilityTrace, window: int = 12, k: int = 8) -> Tuple[np.ndarray, np.ndarray]:
    """Top-K scores stamped at the window's last segment; the window resets at gaps."""
    if not 1 <= k <= window:
        raise ValueError(f"K must lie in [1, W={window}], got {k}")
    times, scores = [], []
    for a, b in contiguous_runs(trace.t_start):
        for i in range(a + window - 1, b):
            times.append(trace.t_start[i])
            scores.append(topk_score(trace.p[i - window + 1:i + 1], k))
    return np.asarray(times, dtype=np.float64), np.asarray(scores, dtype=np.float64)


def raise_alarms(times: Sequence[float], scores: Sequence[float], threshold: float,
                 refractory_s: float = REFRACTORY_S) -> List[AlarmEvent]:
    """First crossing raises an alarm; crossings within refractory_s after it are suppressed."""
    events: List[AlarmEvent] = []
    for t, s in zip(times, scores):
        if s <= threshold:
            continue
        if events and t - events[-1].time < refractory_s:
            continue
        events.append(AlarmEvent(float(t), float(s), threshold))
    return events


def _trace_labels(trace: ProbabilityTrace, interval_map: IntervalMap) -> np.ndarray:
    if trace.labels is not None:
        return trace.labels
    return np.array([1 if interval_map.label_at(t) == Label.PREICTAL else 0 for t in trace.t_start])


def _score(trace: ProbabilityTrace, interval_map: IntervalMap, threshold: float, window: int, k: int,
           refractory_s: float, fused: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> EvalReport:
    labels = _trace_labels(trace, interval_map)
    pre = labels == 1
    tp = int(np.sum(trace.p[pre] > threshold))
    fn = int(np.sum(pre)) - tp
    times, scores = fused if fused is not None else fused_scores(trace, window, k)
    events = raise_alarms(times, scores, threshold, refractory_s)
    n_fp = sum(1 for e in events if interval_map.label_at(e.time) == Label.INTERICTAL)
    hours = interval_map.duration(Label.INTERICTAL) / 3600.0
    return EvalReport(
        sensitivity=tp / (tp + fn) if tp + fn else None,
        fpr_per_hour=n_fp / hours if hours > 0 else None,
        tp_seg=tp,
        fn_seg=fn,
        n_fp_events=n_fp,
        interictal_hours=hours,
        threshold=threshold,
        n_events=len(events),
    )


def compute_report(trace: ProbabilityTrace, interval_map: IntervalMap, threshold: float, window: int = 12,
                   k: int = 8, refractory_s: float = REFRACTORY_S) -> EvalReport:
    """Segment sensitivity and refractory-merged false alarms per inter-ictal hour."""
    report = _score(trace, interval_map, threshold, window, k, refractory_s)
    if report.sensitivity is None:
        logger.warning("No pre-ictal segments in the trace: sensitivity is n/a")
    return report


def select_threshold(trace: ProbabilityTrace, interval_map: IntervalMap, fpr_cap: float = 0.5,
                     window: int = 12, k: int = 8, refractory_s: float = REFRACTORY_S,
                     grid: Sequence[float] = THRESHOLD_GRID) -> ThresholdSelection:
    """Grid search on validation data.

    Among thresholds with FPR/h <= fpr_cap pick the highest sensitivity, then
    the lowest FPR/h, then the lowest tau. If no threshold meets the cap the
    same ordering runs over the whole grid and the selection is flagged.
    """
    labels = _trace_labels(trace, interval_map)
    if not (np.any(labels == 1) and np.any(labels == 0)):
        raise EvaluationError("threshold search needs both pre-ictal and inter-ictal validation segments")
    fused = fused_scores(trace, window, k)
    rows = []
    for tau in grid:
        r = _score(trace, interval_map, tau, window, k, refractory_s, fused)
        fpr = r.fpr_per_hour if r.fpr_per_hour is not None else 0.0
        rows.append({"threshold": tau, "sensitivity": r.sensitivity, "fpr_per_hour": fpr, "n_fp_events": r.n_fp_events})

    def rank(row):
        return (-row["sensitivity"], row["fpr_per_hour"], row["threshold"])

    admissible = [row for row in rows if row["fpr_per_hour"] <= fpr_cap]
    violated = not admissible
    best = min(admissible or rows, key=rank)
    if violated:
        logger.warning(f"No threshold keeps validation FPR/h <= {fpr_cap}; using max-sensitivity tau={best['threshold']}")
    return ThresholdSelection(threshold=best["threshold"], cap_violated=violated, grid=rows)


def cohort_table(reports: Sequence[EvalReport]) -> pd.DataFrame:
    """Per-subject sensitivity (%) and FPR/h with an average row."""
    rows = [{
        "subject": r.subject_id or "-",
        "config": r.label,
        "sensitivity_pct": None if r.sensitivity is None else 100.0 * r.sensitivity,
        "fpr_per_hour": r.fpr_per_hour,
        "threshold": r.threshold,
    } for r in reports]
    frame = pd.DataFrame(rows, columns=["subject", "config", "sensitivity_pct", "fpr_per_hour", "threshold"])
    if len(frame):
        average = {
            "subject": "Average",
            "config": "",
            "sensitivity_pct": frame["sensitivity_pct"].astype(float).mean(skipna=True),
            "fpr_per_hour": frame["fpr_per_hour"].astype(float).mean(skipna=True),
            "threshold": float("nan"),
        }
        frame = pd.concat([frame, pd.DataFrame([average])], ignore_index=True)
    return frame


def format_table(reports: Sequence[EvalReport]) -> str:
    """Fixed-column text table: subject, sensitivity %, FPR/h at 4 decimals."""
    lines = [f"{'Subject':<12}{'Config':<22}{'Sensitivity (%)':>16}{'FPR/h':>10}{'tau':>7}"]
    for _, row in cohort_table(reports).iterrows():
        sens = "n/a" if pd.isna(row["sensitivity_pct"]) else f"{row['sensitivity_pct']:.2f}"
        fpr = "n/a" if pd.isna(row["fpr_per_hour"]) else f"{row['fpr_per_hour']:.4f}"
        tau = "" if pd.isna(row["threshold"]) else f"{row['threshold']:.2f}"
        lines.append(f"{str(row['subject']):<12}{str(row['config']):<22}{sens:>16}{fpr:>10}{tau:>7}")
    return "\n".join(lines)
