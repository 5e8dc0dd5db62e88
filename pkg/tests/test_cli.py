"""
Tests for the command-line surface: exit codes, the protocol command on a
synthetic subject, and (marked slow) full ingest -> train -> eval runs that
check the synthetic baseline, the ablation trends and byte-identical reruns.
"""
import json
import os

import pytest

from cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, run
from component_logger import access_log
from pipeline import file_hash
from synthgen import SubjectProfile, artifact_profile, clean_profile, write_subject

TWO_CHANNELS = ("FP1-F7", "F7-T7")

SMALL_CONFIG = """\
montage=FP1-F7,F7-T7
band_high_hz=40
temporal_filters=2
spatial_filters=2
temporal_kernel=8
pool_window=20
pool_stride=10
d_model=4
heads=1
head_dim=4
epochs=2
batch_size=4
max_sequences_per_epoch=8
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "small.env"
    path.write_text(SMALL_CONFIG)
    return str(path)


@pytest.fixture
def two_cluster_subject(tmp_path):
    data_dir = tmp_path / "data"
    profile = clean_profile(2, n_clusters=2, channels=TWO_CHANNELS, fs=128.0, hours_per_gap=0.25,
                            subject_id="synth01")
    write_subject(profile, str(data_dir))
    return str(data_dir)


def test_usage_errors_exit_one(tmp_path):
    assert run(["bogus"]) == EXIT_USAGE
    assert run(["protocol", "--nope"]) == EXIT_USAGE
    assert run(["train", "--context", "30"]) == EXIT_USAGE
    assert run(["protocol", "--config", str(tmp_path / "absent.env")]) == EXIT_USAGE
    bad = tmp_path / "bad.env"
    bad.write_text("mystery_key=1\n")
    assert run(["protocol", "--config", str(bad)]) == EXIT_USAGE


def test_broken_timeline_exits_two(tmp_path, capsys):
    subject_dir = tmp_path / "data" / "chb99"
    subject_dir.mkdir(parents=True)
    (subject_dir / "chb99-summary.txt").write_text(
        "File Name: chb99_01.edf\nSeizure Start Time: 10 seconds\nSeizure End Time: 50 seconds\n")
    code = run(["protocol", "--subject", "chb99", "--data-dir", str(tmp_path / "data"),
                "--out-dir", str(tmp_path / "runs")])
    assert code == EXIT_DATA
    assert "timeline metadata" in capsys.readouterr().err
    saved = json.loads((tmp_path / "runs" / "chb99" / "protocol.json").read_text())
    assert saved["eligibility"]["included"] is False


def test_missing_subject_data_exits_two(tmp_path):
    assert run(["protocol", "--subject", "ghost", "--data-dir", str(tmp_path),
                "--out-dir", str(tmp_path / "runs")]) == EXIT_DATA
    assert run(["train", "--subject", "ghost", "--out-dir", str(tmp_path / "runs")]) == EXIT_DATA


def test_protocol_on_synthetic_subject(tmp_path, two_cluster_subject, config_file, capsys):
    out_dir = str(tmp_path / "runs")
    code = run(["protocol", "--subject", "synth01", "--data-dir", two_cluster_subject, "--out-dir", out_dir,
                "--config", config_file])
    assert code == EXIT_OK
    text = capsys.readouterr().out
    assert "cluster 1" in text and "-> train" in text
    assert "cluster 2" in text and "-> test" in text
    assert os.path.exists(os.path.join(out_dir, "synth01", "protocol.json"))
    assert os.path.exists(os.path.join(out_dir, "synth01", "protocol.txt"))


def test_full_montage_is_required_by_default(tmp_path, two_cluster_subject, capsys):
    code = run(["protocol", "--subject", "synth01", "--data-dir", two_cluster_subject,
                "--out-dir", str(tmp_path / "runs")])
    assert code == EXIT_DATA
    assert "FZ-CZ" in capsys.readouterr().err


@pytest.mark.slow
def test_end_to_end_run(tmp_path, two_cluster_subject, config_file):
    out_dir = str(tmp_path / "runs")
    common = ["--subject", "synth01", "--data-dir", two_cluster_subject, "--out-dir", out_dir,
              "--config", config_file]
    assert run(["ingest"] + common) == EXIT_OK
    assert run(["train"] + common) == EXIT_OK
    assert "test" not in access_log.splits_read("train")
    assert run(["eval"] + common) == EXIT_OK
    assert run(["report", "--out-dir", out_dir]) == EXIT_OK

    subject = os.path.join(out_dir, "synth01")
    for name in ("checkpoint.teeg", "history.csv", "config.env", "report.json", "test_trace.csv",
                 "manifest_train.json", "manifest_eval.json"):
        assert os.path.exists(os.path.join(subject, name)), name
    report = json.loads(open(os.path.join(subject, "report.json")).read())["report"]
    assert report["subject_id"] == "synth01" and report["label"] == "full-ctx12"
    assert 0.0 <= report["threshold"] <= 1.0
    assert "Average" in open(os.path.join(out_dir, "cohort_report.txt")).read()


LEARNING_CONFIG = """\
montage=FP1-F7,F7-T7
band_high_hz=40
temporal_filters=4
spatial_filters=4
temporal_kernel=16
pool_window=32
pool_stride=16
d_model=8
heads=2
head_dim=4
lr=0.005
epochs=40
batch_size=8
max_sequences_per_epoch=64
patience=8
"""


def _subject(data_dir, subject_id, seed, artifacts=0.0):
    """Three clusters at 128 Hz with half-hour gaps: about 11 h of recording."""
    profile = SubjectProfile(seed=seed, n_clusters=3, channels=TWO_CHANNELS, fs=128.0, hours_per_gap=0.5,
                             subject_id=subject_id)
    write_subject(artifact_profile(profile, artifacts), str(data_dir))
    return str(data_dir)


def _report(path):
    with open(path) as f:
        return json.load(f)["report"]


@pytest.mark.slow
def test_clean_subject_meets_the_baseline(tmp_path):
    data_dir = _subject(tmp_path / "data", "synth03", seed=11)
    config = tmp_path / "learning.env"
    config.write_text(LEARNING_CONFIG)
    out_dir = str(tmp_path / "runs")
    common = ["--subject", "synth03", "--data-dir", data_dir, "--out-dir", out_dir, "--config", str(config)]
    for command in ("ingest", "train", "eval"):
        assert run([command] + common) == EXIT_OK, command
    report = _report(os.path.join(out_dir, "synth03", "report.json"))
    assert report["sensitivity"] >= 0.95
    assert report["fpr_per_hour"] <= 0.5


@pytest.mark.slow
def test_longer_context_and_memory_cut_false_alarms(tmp_path):
    data_dir = _subject(tmp_path / "data", "synth04", seed=12, artifacts=5.0)
    config = tmp_path / "learning.env"
    config.write_text(LEARNING_CONFIG)
    out_dir = str(tmp_path / "runs")
    common = ["--subject", "synth04", "--data-dir", data_dir, "--out-dir", out_dir, "--config", str(config)]
    assert run(["ingest"] + common) == EXIT_OK
    assert run(["ablate"] + common) == EXIT_OK
    variants = os.path.join(out_dir, "synth04", "ablate")
    short = _report(os.path.join(variants, "full-ctx12", "report.json"))
    long = _report(os.path.join(variants, "full-ctx60", "report.json"))
    attention = _report(os.path.join(variants, "attention_only-ctx12", "report.json"))
    assert long["fpr_per_hour"] <= 0.5 * short["fpr_per_hour"]
    assert long["sensitivity"] >= short["sensitivity"] - 0.02
    assert attention["fpr_per_hour"] >= short["fpr_per_hour"]


@pytest.mark.slow
def test_same_seed_runs_are_byte_identical(tmp_path, config_file):
    hashes = []
    for run_name in ("first", "second"):
        data_dir = _subject(tmp_path / run_name / "data", "synth05", seed=13)
        out_dir = str(tmp_path / run_name / "runs")
        common = ["--subject", "synth05", "--data-dir", data_dir, "--out-dir", out_dir, "--config", config_file,
                  "--seed", "21"]
        for command in ("ingest", "train", "eval"):
            assert run([command] + common) == EXIT_OK, command
        subject = os.path.join(out_dir, "synth05")
        hashes.append({artifact: file_hash(os.path.join(subject, artifact))
                       for artifact in ("checkpoint.teeg", "history.csv", "test_trace.csv", "val_trace.csv",
                                        "report.json")})
    assert hashes[0] == hashes[1]
