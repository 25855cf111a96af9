"""Report figures rendered next to their delimited outputs.

Uses the Agg backend so figure generation works headless. Each function
writes one PNG and returns the path it wrote.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def robustness_figure(rows, path) -> Path:
    """Average recall versus detection-quality threshold.

    Takes RobustnessRow items; buckets with no records are skipped. Series
    are AR(MSSD), AR(MSPD), and their mean AR(MSSD,MSPD).
    """
    path = Path(path)
    populated = [r for r in rows if r.n_records > 0]
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    if populated:
        x = [r.iou_threshold for r in populated]
        series = (
            ("AR(MSSD)", [r.ar_mssd for r in populated], "o-"),
            ("AR(MSPD)", [r.ar_mspd for r in populated], "s--"),
            ("AR(MSSD,MSPD)", [r.ar_mean for r in populated], "d-."),
        )
        for label, values, style in series:
            ax.plot(x, values, style, label=label)
        ax.legend(loc="lower right")
    else:
        ax.text(0.5, 0.5, "no populated buckets", ha="center", va="center")
    ax.set_xlabel("detection mask IoU threshold")
    ax.set_ylabel("average recall")
    ax.set_ylim(0.0, 1.05)
    ax.set_title("pose recall under degrading detections")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def latency_figure(bench_rows, path) -> Path:
    """Grouped per-stage latency percentiles from bench output rows."""
    path = Path(path)
    stages = [row["stage"] for row in bench_rows]
    quantiles = ("p50_ms", "p90_ms", "p99_ms")
    width = 0.8 / len(quantiles)
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for qi, q in enumerate(quantiles):
        xs = [i + (qi - (len(quantiles) - 1) / 2) * width for i in range(len(stages))]
        ax.bar(xs, [row[q] for row in bench_rows], width=width, label=q)
    ax.set_xticks(range(len(stages)))
    ax.set_xticklabels(stages)
    ax.set_ylabel("latency (ms)")
    ax.set_title("per-stage latency")
    ax.legend()
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
