"""
Smoke tests for the trace and cohort charts.
"""
import base64

import numpy as np

from alarm import EvalReport, ProbabilityTrace
from visualization import cohort_chart_html, save_cohort_chart, save_trace_chart

PNG_MAGIC = b"\x89PNG"


def _report(subject, sensitivity):
    return EvalReport(sensitivity=sensitivity, fpr_per_hour=0.1, tp_seg=1, fn_seg=1, n_fp_events=1,
                      interictal_hours=10.0, threshold=0.4, subject_id=subject, label="full-ctx12")


def test_trace_chart_is_written(tmp_path, rng):
    t = np.arange(200) * 5.0
    trace = ProbabilityTrace(t, rng.uniform(size=200), (t > 600).astype(int))
    path = save_trace_chart(trace, _report("s1", 0.5), str(tmp_path / "trace.png"))
    with open(path, "rb") as f:
        assert f.read(4) == PNG_MAGIC


def test_cohort_chart_png_and_html(tmp_path):
    reports = [_report("s1", 0.5), _report("s2", None)]
    path = save_cohort_chart(reports, str(tmp_path / "cohort.png"))
    with open(path, "rb") as f:
        assert f.read(4) == PNG_MAGIC
    html = cohort_chart_html(reports)
    assert html.startswith('<img src="data:image/png;base64,')
    payload = html.split("base64,", 1)[1].split('"', 1)[0]
    assert base64.b64decode(payload)[:4] == PNG_MAGIC
