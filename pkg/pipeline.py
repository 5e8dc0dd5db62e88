"""Per-subject orchestration: protocol, ingest, train, eval, ablate and cohort report.

Everything a stage produces lands under <out_dir>/<subject>/; ablation
variants get their own run directory below <subject>/ablate/.
"""
import hashlib
import json
import logging
import os
import platform
from dataclasses import dataclass, field, replace, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy

from alarm import (EvalReport, ProbabilityTrace, cohort_table, compute_report, format_table,
                   select_threshold)
from backbone import TitansModel
from component_logger import access_log, component_logger, log_component
from config import PipelineConfig, apply_overrides, load_config, save_config
from edfio import (FileAnnotation, load_annotations, normalize_label, read_edf, read_edf_header,
                   save_annotations, select_montage, seizures_from_annotations, summary_to_annotations)
from errors import CheckpointError, EligibilityError, TimelineMetadataError
from protocol import (MIN_PREICTAL_S, Eligibility, IntervalMap, Seizure, SplitPlan, SubjectMetadata,
                      build_interval_map, check_eligibility, chronological_split, cluster_seizures,
                      load_protocol, protocol_report, save_protocol)
from segment_store import SegmentWriter, load_split, split_path
from signal_processing import apply_filters, design_filters, segment
from trainer import FitResult, fit, predict_trace, sequence_set

logger = logging.getLogger("pipeline")

SPLIT_PHASES = {"train": "train", "val": "eval", "test": "eval"}
ALARM_KEYS = ("topk", "fusion_window", "fpr_cap", "refractory_s")
ARCHITECTURE_KEYS = ("context_segments", "attn_window", "ablation_mode", "d_model", "heads", "head_dim", "n_blocks",
                     "temporal_filters", "spatial_filters", "temporal_kernel", "pool_window", "pool_stride",
                     "segment_pooling")


@dataclass
class RunPaths:
    root: str

    def path(self, name: str) -> str:
        return os.path.join(self.root, name)

    @property
    def cache_dir(self) -> str:
        return self.path("cache")

    @property
    def protocol_json(self) -> str:
        return self.path("protocol.json")

    @property
    def checkpoint(self) -> str:
        return self.path("checkpoint.teeg")

    @property
    def config_env(self) -> str:
        return self.path("config.env")

    @property
    def history(self) -> str:
        return self.path("history.csv")

    @property
    def report_json(self) -> str:
        return self.path("report.json")


def subject_paths(out_dir: str, subject_id: str) -> RunPaths:
    return RunPaths(os.path.join(out_dir, subject_id))


def variant_label(config: PipelineConfig) -> str:
    return f"{config.ablation_mode}-ctx{config.context_segments}"


def variant_paths(out_dir: str, subject_id: str, config: PipelineConfig) -> RunPaths:
    return RunPaths(os.path.join(out_dir, subject_id, "ablate", variant_label(config)))


@dataclass
class RunManifest:
    subject_id: str
    command: str
    config: Dict
    seed: int
    input_hashes: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    versions: Dict[str, str] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)

    def comparable(self) -> Dict:
        """Everything that must match between two reproducible runs."""
        return {"subject_id": self.subject_id, "command": self.command, "config": self.config,
                "seed": self.seed, "input_hashes": self.input_hashes,
                "outputs": {name: file_hash(path) for name, path in self.outputs.items() if os.path.exists(path)}}

    def save(self, path: str):
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> "RunManifest":
        with open(path, "r") as f:
            return cls(**json.load(f))


def file_hash(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _versions() -> Dict[str, str]:
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "pandas": pd.__version__}


def write_manifest(paths: RunPaths, subject_id: str, command: str, config: PipelineConfig,
                   inputs: Sequence[str], outputs: Dict[str, str]) -> RunManifest:
    manifest = RunManifest(
        subject_id=subject_id,
        command=command,
        config=config.to_dict(),
        seed=config.seed,
        input_hashes={os.path.basename(p): file_hash(p) for p in inputs if os.path.exists(p)},
        outputs=outputs,
        versions=_versions(),
        timings=component_logger.stage_timings(),
    )
    manifest.save(paths.path(f"manifest_{command}.json"))
    return manifest


# --- protocol ---

@dataclass
class SubjectProtocol:
    subject_id: str
    files: List[FileAnnotation]
    extents: List[Tuple[float, float]]
    interval_map: IntervalMap
    plan: Optional[SplitPlan]
    eligibility: Eligibility
    montage_missing: List[str] = field(default_factory=list)

    def report(self) -> str:
        return protocol_report(self.subject_id, self.interval_map, self.plan, self.eligibility)


def load_subject_annotations(data_dir: str, subject_id: str) -> List[FileAnnotation]:
    """annotations.json if present, otherwise the CHB-MIT <subject>-summary.txt."""
    subject_dir = os.path.join(data_dir, subject_id)
    json_path = os.path.join(subject_dir, "annotations.json")
    if os.path.exists(json_path):
        return load_annotations(json_path)
    summary = os.path.join(subject_dir, f"{subject_id}-summary.txt")
    if not os.path.exists(summary):
        raise FileNotFoundError(f"no annotations.json or {subject_id}-summary.txt in {subject_dir}")
    with open(summary, "r") as f:
        return summary_to_annotations(f.read())


def _edf_header(path: str):
    with open(path, "rb") as f:
        head = f.read(256)
        try:
            n_signals = int(head[252:256].decode("latin-1").strip())
        except ValueError:
            n_signals = 0
        blob = head + f.read(256 * max(n_signals, 0))
    return read_edf_header(blob)


@log_component("protocol")
def build_protocol(config: PipelineConfig, data_dir: str, subject_id: str) -> SubjectProtocol:
    """Clusters, interval map, eligibility and split, from annotations and EDF headers only."""
    try:
        files = load_subject_annotations(data_dir, subject_id)
        seizures = seizures_from_annotations(files, config.excluded_seizures)
        timeline_ok = all(entry.start_time is not None for entry in files)
    except TimelineMetadataError as exc:
        logger.warning(f"{subject_id}: {exc}")
        files, seizures, timeline_ok = [], [], False

    wanted = {normalize_label(label): label for label in config.montage}
    missing: List[str] = []
    extents: List[Tuple[float, float]] = []
    for entry in files:
        header = _edf_header(os.path.join(data_dir, subject_id, entry.file))
        present = {normalize_label(s.label) for s in header.signals}
        for key, label in wanted.items():
            if key not in present and label not in missing:
                missing.append(label)
        if entry.start_time is not None:
            extents.append((entry.start_time, entry.start_time + header.duration_s))

    if timeline_ok and files:
        clusters = cluster_seizures([Seizure(s.absolute_onset, s.absolute_offset, s.file_id) for s in seizures],
                                    reference=config.gap_reference)
        interval_map = build_interval_map(clusters, extents, MIN_PREICTAL_S)
    else:
        interval_map = IntervalMap()
    meta = SubjectMetadata(subject_id, missing, timeline_ok and bool(files), len(interval_map.valid_clusters))
    eligibility = check_eligibility(meta)
    plan = chronological_split(interval_map, config.val_fraction) if eligibility.included else None
    return SubjectProtocol(subject_id, files, extents, interval_map, plan, eligibility, missing)


def run_protocol(config: PipelineConfig, data_dir: str, out_dir: str, subject_id: str) -> SubjectProtocol:
    proto = build_protocol(config, data_dir, subject_id)
    paths = subject_paths(out_dir, subject_id)
    os.makedirs(paths.root, exist_ok=True)
    save_protocol(paths.protocol_json, subject_id, proto.interval_map, proto.plan, proto.eligibility)
    with open(paths.path("protocol.txt"), "w") as f:
        f.write(proto.report() + "\n")
    if proto.files:
        save_annotations(proto.files, paths.path("annotations.json"), subject_id)
    return proto


def _require_plan(paths: RunPaths, subject_id: str) -> Tuple[IntervalMap, SplitPlan]:
    if not os.path.exists(paths.protocol_json):
        raise FileNotFoundError(f"{paths.protocol_json} not found; run protocol or ingest first")
    _, interval_map, plan, eligibility = load_protocol(paths.protocol_json)
    if not eligibility.included or plan is None:
        raise EligibilityError(subject_id, eligibility.reason)
    return interval_map, plan


# --- ingest ---

@log_component("ingest")
def ingest_subject(config: PipelineConfig, data_dir: str, out_dir: str, subject_id: str) -> Dict[str, int]:
    """Filter every recording and write one TSEG1 cache per split."""
    proto = run_protocol(config, data_dir, out_dir, subject_id)
    if not proto.eligibility.included:
        raise EligibilityError(subject_id, proto.eligibility.reason)
    paths = subject_paths(out_dir, subject_id)
    os.makedirs(paths.cache_dir, exist_ok=True)
    maps = proto.plan.maps()
    writers = {name: SegmentWriter(split_path(paths.cache_dir, name)) for name in maps}
    banks = {}
    try:
        for entry in proto.files:
            _, record = read_edf(os.path.join(data_dir, subject_id, entry.file))
            record = replace(select_montage(record, config.montage), start_time=entry.start_time)
            if record.fs not in banks:
                banks[record.fs] = design_filters(record.fs, config.notch_hz, config.notch_q,
                                                  (config.band_low_hz, config.band_high_hz), config.band_order)
            record = apply_filters(record, banks[record.fs])
            for name, split_map in maps.items():
                writers[name].write_all(segment(record, split_map, SPLIT_PHASES[name], subject_id))
            logger.debug(f"{subject_id}: ingested {entry.file}")
    finally:
        for writer in writers.values():
            writer.close()
    counts = {name: writer.count for name, writer in writers.items()}
    logger.info(f"{subject_id}: cached segments {counts}")
    return counts


# --- train / eval ---

def _n_samples(segments) -> Tuple[int, int]:
    channels, samples = segments[0].data.shape
    return channels, samples


@log_component("train")
def train_subject(config: PipelineConfig, out_dir: str, subject_id: str,
                  paths: Optional[RunPaths] = None) -> FitResult:
    subject = subject_paths(out_dir, subject_id)
    paths = paths or subject
    _require_plan(subject, subject_id)
    train = load_split(subject.cache_dir, "train", "train", subject_id)
    val = load_split(subject.cache_dir, "val", "train", subject_id)
    access_log.assert_not_read("train", "test")
    if not train:
        raise EligibilityError(subject_id, "no training segments")

    channels, samples = _n_samples(train)
    model = TitansModel.initialize(config, channels=channels, n_samples=samples)
    train_set = sequence_set(train, config.context_segments, 1)
    val_set = sequence_set(val, config.context_segments, config.context_segments)
    os.makedirs(paths.root, exist_ok=True)
    save_config(config, paths.config_env)
    result = fit(model, train_set, val_set, config, history_path=paths.history, checkpoint_path=paths.checkpoint)
    write_manifest(paths, subject_id, "train", config,
                   [split_path(subject.cache_dir, "train"), split_path(subject.cache_dir, "val")],
                   {"checkpoint": paths.checkpoint, "history": paths.history, "config": paths.config_env})
    return result


def trained_config(config: PipelineConfig, paths: RunPaths) -> PipelineConfig:
    """Architecture from the run's saved config; alarm settings from the caller's."""
    if not os.path.exists(paths.config_env):
        raise CheckpointError(f"{paths.config_env} not found; train the subject first")
    saved = load_config(paths.config_env)
    ignored = [f"{key}={getattr(config, key)} (trained with {getattr(saved, key)})"
               for key in ARCHITECTURE_KEYS if getattr(config, key) != getattr(saved, key)]
    if ignored:
        logger.warning(f"Ignoring architecture settings that differ from {paths.config_env}: {', '.join(ignored)}")
    return apply_overrides(saved, {key: getattr(config, key) for key in ALARM_KEYS})


@log_component("eval")
def eval_subject(config: PipelineConfig, out_dir: str, subject_id: str,
                 paths: Optional[RunPaths] = None) -> EvalReport:
    """Threshold search on validation, then scoring on the held-out cluster."""
    subject = subject_paths(out_dir, subject_id)
    paths = paths or subject
    _, plan = _require_plan(subject, subject_id)
    config = trained_config(config, paths)
    val = load_split(subject.cache_dir, "val", "eval", subject_id)
    test = load_split(subject.cache_dir, "test", "eval", subject_id)
    if not val or not test:
        raise EligibilityError(subject_id, "validation or test split has no segments")
    channels, samples = _n_samples(val)
    model = TitansModel.from_checkpoint(config, paths.checkpoint, channels, samples)

    val_trace = predict_trace(model, val, config.context_segments)
    selection = select_threshold(val_trace, plan.val, config.fpr_cap, config.fusion_window, config.topk,
                                 config.refractory_s)
    test_trace = predict_trace(model, test, config.context_segments)
    report = compute_report(test_trace, plan.test, selection.threshold, config.fusion_window, config.topk,
                            config.refractory_s)
    report.cap_violated = selection.cap_violated
    report.subject_id = subject_id
    report.label = variant_label(config)

    outputs = {"val_trace": paths.path("val_trace.csv"), "test_trace": paths.path("test_trace.csv"),
               "report": paths.report_json, "report_text": paths.path("report.txt")}
    val_trace.save_csv(outputs["val_trace"])
    test_trace.save_csv(outputs["test_trace"])
    with open(paths.report_json, "w") as f:
        json.dump({"report": report.to_dict(), "selection": selection.to_dict()}, f, indent=2)
    with open(outputs["report_text"], "w") as f:
        f.write(format_table([report]) + "\n")
    write_manifest(paths, subject_id, "eval", config, [paths.checkpoint, subject.protocol_json], outputs)
    logger.info(f"{subject_id} [{report.label}]: sensitivity {report.sensitivity_text}%, "
                f"FPR/h {report.fpr_text}, tau {report.threshold:.2f}")
    return report


def ablation_variants(config: PipelineConfig, modes: Optional[Sequence[str]] = None,
                      contexts: Optional[Sequence[int]] = None) -> List[PipelineConfig]:
    """The default grid is full/attention_only/memory_only at 12 segments plus full at 60."""
    if modes is None and contexts is None:
        grid = [("full", 12), ("attention_only", 12), ("memory_only", 12), ("full", 60)]
    else:
        grid = [(m, c) for m in (modes or [config.ablation_mode]) for c in (contexts or [config.context_segments])]
    variants = []
    for mode, context in grid:
        variants.append(apply_overrides(config, {"ablation_mode": mode, "context_segments": context}))
    return variants


@log_component("ablate")
def ablate_subject(config: PipelineConfig, out_dir: str, subject_id: str,
                   modes: Optional[Sequence[str]] = None, contexts: Optional[Sequence[int]] = None) -> List[EvalReport]:
    """Train and evaluate each variant in its own run directory."""
    reports = []
    for variant in ablation_variants(config, modes, contexts):
        paths = variant_paths(out_dir, subject_id, variant)
        logger.info(f"{subject_id}: ablation variant {variant_label(variant)}")
        train_subject(variant, out_dir, subject_id, paths)
        reports.append(eval_subject(variant, out_dir, subject_id, paths))
    return reports


# --- cohort report ---

def collect_reports(out_dir: str, subjects: Optional[Sequence[str]] = None) -> List[EvalReport]:
    reports = []
    for root, _, files in sorted(os.walk(out_dir)):
        if "report.json" not in files:
            continue
        with open(os.path.join(root, "report.json"), "r") as f:
            payload = json.load(f)["report"]
        report = EvalReport(**payload)
        if subjects and report.subject_id not in subjects:
            continue
        reports.append(report)
    return sorted(reports, key=lambda r: (r.subject_id, r.label))


def write_cohort_report(out_dir: str, subjects: Optional[Sequence[str]] = None, charts: bool = True) -> str:
    """Table-style cohort summary (text + JSON + CSV) and optional trace charts."""
    reports = collect_reports(out_dir, subjects)
    table = format_table(reports)
    with open(os.path.join(out_dir, "cohort_report.txt"), "w") as f:
        f.write(table + "\n")
    with open(os.path.join(out_dir, "cohort_report.json"), "w") as f:
        json.dump([r.to_dict() for r in reports], f, indent=2)
    cohort_table(reports).to_csv(os.path.join(out_dir, "cohort_report.csv"), index=False, float_format="%.6g")
    if charts and reports:
        from visualization import cohort_chart_html, save_cohort_chart, save_trace_chart
        save_cohort_chart(reports, os.path.join(out_dir, "cohort_report.png"))
        with open(os.path.join(out_dir, "cohort_report.html"), "w") as f:
            f.write(f"<html><body><pre>{table}</pre>{cohort_chart_html(reports)}</body></html>\n")
        for root, _, files in sorted(os.walk(out_dir)):
            if "test_trace.csv" in files and "report.json" in files:
                with open(os.path.join(root, "report.json"), "r") as f:
                    report = EvalReport(**json.load(f)["report"])
                trace = ProbabilityTrace.load_csv(os.path.join(root, "test_trace.csv"))
                save_trace_chart(trace, report, os.path.join(root, "test_trace.png"))
    return table
