import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import io
import base64
import numpy as np
from typing import Optional, Sequence

from alarm import EvalReport, ProbabilityTrace, cohort_table, fused_scores, raise_alarms


def _encode(fig) -> str:
    buffer = io.BytesIO()
    fig.savefig(buffer, format='png')
    buffer.seek(0)
    image_data = base64.b64encode(buffer.getvalue()).decode('utf-8')
    return image_data


def trace_figure(trace: ProbabilityTrace, report: Optional[EvalReport] = None, window: int = 12, k: int = 8,
                 refractory_s: float = 1800.0):
    """Segment probabilities, fused score, threshold and alarm events over time (hours)"""
    fig, ax = plt.subplots(figsize=(12, 4))
    hours = (trace.t_start - trace.t_start[0]) / 3600.0 if len(trace) else trace.t_start
    colors = np.where(trace.labels == 1, "tab:red", "tab:blue") if trace.labels is not None else "tab:blue"
    ax.scatter(hours, trace.p, s=2, c=colors, alpha=0.4, label="segment p")

    times, scores = fused_scores(trace, window, k)
    if len(times):
        ax.plot((times - trace.t_start[0]) / 3600.0, scores, color="black", linewidth=0.8, label=f"top-{k} of {window}")
    if report is not None:
        ax.axhline(report.threshold, color="tab:orange", linestyle="--", label=f"tau={report.threshold:.2f}")
        for event in raise_alarms(times, scores, report.threshold, refractory_s):
            ax.axvline((event.time - trace.t_start[0]) / 3600.0, color="tab:orange", alpha=0.5)
        ax.set_title(f"{report.subject_id} {report.label}: sensitivity {report.sensitivity_text}%, "
                     f"FPR/h {report.fpr_text}")
    ax.set_xlabel("hours since first segment")
    ax.set_ylabel("probability")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="upper left", fontsize="small")
    fig.tight_layout()
    return fig


def save_trace_chart(trace: ProbabilityTrace, report: Optional[EvalReport], path: str, **kwargs):
    fig = trace_figure(trace, report, **kwargs)
    fig.savefig(path, format='png', dpi=120)
    plt.close(fig)
    return path


def cohort_figure(reports: Sequence[EvalReport]):
    """Per-subject sensitivity (%) and FPR/h bars"""
    df = cohort_table(reports)
    df = df[df["subject"] != "Average"]
    names = (df["subject"] + " " + df["config"]).str.strip()

    fig, (left, right) = plt.subplots(1, 2, figsize=(12, 5))
    left.bar(names, df["sensitivity_pct"].astype(float))
    left.set_ylabel("sensitivity (%)")
    left.set_ylim(0, 105)
    right.bar(names, df["fpr_per_hour"].astype(float), color="tab:orange")
    right.set_ylabel("false alarms per hour")
    for ax in (left, right):
        ax.tick_params(axis="x", labelrotation=60, labelsize="small")
    fig.tight_layout()
    return fig


def save_cohort_chart(reports: Sequence[EvalReport], path: str):
    fig = cohort_figure(reports)
    fig.savefig(path, format='png', dpi=120)
    plt.close(fig)
    return path


def cohort_chart_html(reports: Sequence[EvalReport], title: str = "Cohort results") -> str:
    """Cohort chart as an embeddable <img> tag"""
    fig = cohort_figure(reports)
    image_data = _encode(fig)
    plt.close(fig)
    return f'<img src="data:image/png;base64,{image_data}" alt="{title}" />'
