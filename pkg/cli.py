# cli.py

import argparse
import concurrent.futures
import logging
import os
import sys
from typing import Callable, Dict, List, Optional, Sequence

from config import ABLATION_MODES, PipelineConfig, load_config, setup_logging
from errors import (AnnotationError, CheckpointError, ConfigError, EdfFormatError, EligibilityError,
                    EvaluationError, MontageError, ProtocolError, TimelineMetadataError, TrainingError)

logger = logging.getLogger("cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

DATA_ERRORS = (EdfFormatError, MontageError, TimelineMetadataError, ProtocolError, EligibilityError,
               CheckpointError, TrainingError, AnnotationError, EvaluationError, FileNotFoundError)

COMMANDS = ("synth", "ingest", "protocol", "train", "eval", "ablate", "report")


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse that reports usage errors with exit code 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise UsageError(message)


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--subject", action="append", help="subject id (repeatable or comma-separated)")
    common.add_argument("--data-dir", default="data", help="raw EDF + annotation directory")
    common.add_argument("--out-dir", default="runs", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--context", type=int, choices=[12, 60], help="context length in 5 s segments")
    common.add_argument("--ablation", choices=ABLATION_MODES)
    common.add_argument("--fpr-cap", type=float)
    common.add_argument("--topk", type=int)
    common.add_argument("--fusion-window", type=int)
    common.add_argument("--workers", type=int, help="subjects processed concurrently")

    parser = ArgumentParser(prog="teeg", description="Seizure forecasting pipeline")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    sub.required = True
    synth = sub.add_parser("synth", parents=[common], help="write synthetic subjects")
    synth.add_argument("--profile", choices=["clean", "artifact"], default="clean")
    synth.add_argument("--clusters", type=int, default=3)
    sub.add_parser("ingest", parents=[common], help="parse EDF + annotations into segment caches")
    sub.add_parser("protocol", parents=[common], help="print and write the interval map and split audit")
    sub.add_parser("train", parents=[common], help="fit a per-subject model")
    sub.add_parser("eval", parents=[common], help="threshold search on validation, scoring on test")
    sub.add_parser("ablate", parents=[common], help="train + eval gate and context variants")
    sub.add_parser("report", parents=[common], help="cohort table over every evaluated run")
    return parser


def config_from_args(args) -> PipelineConfig:
    overrides = {
        "seed": args.seed,
        "context_segments": args.context,
        "ablation_mode": args.ablation,
        "fpr_cap": args.fpr_cap,
        "topk": args.topk,
        "fusion_window": args.fusion_window,
        "workers": args.workers,
    }
    return load_config(args.config, {k: v for k, v in overrides.items() if v is not None})


def subjects_from_args(args, default: Optional[List[str]] = None) -> List[str]:
    subjects = []
    for value in args.subject or []:
        subjects.extend(part.strip() for part in value.split(",") if part.strip())
    if not subjects and default is not None:
        return default
    if not subjects:
        raise UsageError("--subject is required for this command")
    return subjects


def discover_subjects(data_dir: str) -> List[str]:
    if not os.path.isdir(data_dir):
        return []
    return sorted(name for name in os.listdir(data_dir) if os.path.isdir(os.path.join(data_dir, name)))


# --- per-subject commands ---

def cmd_synth(config: PipelineConfig, args, subject_id: str) -> int:
    from synthgen import SubjectProfile, artifact_profile, clean_profile, write_subject

    seed = config.seed + sum(ord(ch) for ch in subject_id)
    if args.profile == "artifact":
        profile = artifact_profile(SubjectProfile(seed=seed, n_clusters=args.clusters, subject_id=subject_id,
                                                  hours_per_gap=config.synth_hours_per_gap),
                                   config.artifact_multiplier)
    else:
        profile = clean_profile(seed, n_clusters=args.clusters, subject_id=subject_id,
                                hours_per_gap=config.synth_hours_per_gap)
    path = write_subject(profile, args.data_dir)
    print(f"🧪 {subject_id}: synthetic {args.profile} subject written to {path}")
    return EXIT_OK


def cmd_ingest(config: PipelineConfig, args, subject_id: str) -> int:
    from pipeline import ingest_subject

    counts = ingest_subject(config, args.data_dir, args.out_dir, subject_id)
    print(f"📥 {subject_id}: cached segments {counts}")
    return EXIT_OK


def cmd_protocol(config: PipelineConfig, args, subject_id: str) -> int:
    from pipeline import run_protocol

    proto = run_protocol(config, args.data_dir, args.out_dir, subject_id)
    print(proto.report())
    if not proto.eligibility.included:
        raise EligibilityError(subject_id, proto.eligibility.reason)
    return EXIT_OK


def cmd_train(config: PipelineConfig, args, subject_id: str) -> int:
    from pipeline import train_subject

    result = train_subject(config, args.out_dir, subject_id)
    print(f"🧠 {subject_id}: best epoch {result.best_epoch}, validation loss {result.best_val_loss:.5f}"
          f"{' (early stop)' if result.stopped_early else ''}")
    return EXIT_OK


def cmd_eval(config: PipelineConfig, args, subject_id: str) -> int:
    from alarm import format_table
    from pipeline import eval_subject

    report = eval_subject(config, args.out_dir, subject_id)
    print(format_table([report]))
    if report.cap_violated:
        print(f"⚠️ {subject_id}: no threshold met the validation FPR/h cap")
    return EXIT_OK


def cmd_ablate(config: PipelineConfig, args, subject_id: str) -> int:
    from alarm import format_table
    from pipeline import ablate_subject

    modes = [args.ablation] if args.ablation else None
    contexts = [args.context] if args.context else None
    reports = ablate_subject(config, args.out_dir, subject_id, modes, contexts)
    print(format_table(reports))
    return EXIT_OK


HANDLERS: Dict[str, Callable[[PipelineConfig, argparse.Namespace, str], int]] = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "protocol": cmd_protocol,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def run_subject(handler, config: PipelineConfig, args, subject_id: str) -> int:
    try:
        return handler(config, args, subject_id)
    except DATA_ERRORS as e:
        print(f"❌ {subject_id}: {e}", file=sys.stderr)
        logger.error(f"{args.command} failed for {subject_id}: {e}")
        return EXIT_DATA


def run_subjects(handler, config: PipelineConfig, args, subjects: Sequence[str]) -> int:
    """One subject per worker; the exit code is the worst per-subject code."""
    if config.workers <= 1 or len(subjects) <= 1:
        return max(run_subject(handler, config, args, s) for s in subjects)
    with concurrent.futures.ThreadPoolExecutor(max_workers=config.workers) as executor:
        futures = [executor.submit(run_subject, handler, config, args, s) for s in subjects]
        return max(f.result() for f in futures)


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        setup_logging()
        config = config_from_args(args)
    except UsageError:
        return EXIT_USAGE
    except SystemExit as e:
        return int(e.code or 0)
    except ConfigError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.command == "report":
            from pipeline import write_cohort_report

            subjects = subjects_from_args(args, default=[])
            print(write_cohort_report(args.out_dir, subjects or None))
            return EXIT_OK
        if args.command == "synth":
            subjects = subjects_from_args(args, default=["synth01"])
        else:
            source = args.data_dir if args.command in ("ingest", "protocol") else args.out_dir
            subjects = subjects_from_args(args, default=discover_subjects(source) or None)
        return run_subjects(HANDLERS[args.command], config, args, subjects)
    except UsageError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception:
        logger.exception(f"Unexpected failure in {args.command}")
        raise


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
