"""PR-curve and F-measure-curve figures with CSV sidecars.

The CSV files are the normative output; the images are for reading.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MetricsReport  # noqa: E402

STYLE = {
    "font.size": 10,
    "axes.labelsize": 11,
    "legend.fontsize": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.6,
    "figure.dpi": 100,
}


def new_figure(width: float = 5.0, height: float = 4.0):
    fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def unique_labels(reports: Sequence[MetricsReport], names: Sequence[str] | None = None) -> List[str]:
    labels = list(names) if names else [r.dataset for r in reports]
    seen = {}
    out = []
    for label in labels:
        seen[label] = seen.get(label, 0) + 1
        out.append(label if seen[label] == 1 else f"{label} ({seen[label]})")
    return out


def plot_pr(reports, labels, path) -> List[str]:
    with plt.rc_context(STYLE):
        fig, ax = new_figure()
        for report, label in zip(reports, labels):
            ax.plot(report.pr.recall, report.pr.precision, label=label)
        ax.set_xlabel("Recall")
        ax.set_ylabel("Precision")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        legend = ax.legend(loc="lower left")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return [t.get_text() for t in legend.get_texts()]


def plot_f(reports, labels, path) -> List[str]:
    with plt.rc_context(STYLE):
        fig, ax = new_figure()
        for report, label in zip(reports, labels):
            ax.plot(report.pr.thresholds, report.f_curve, label=label)
        ax.set_xlabel("Threshold")
        ax.set_ylabel(r"$F_\beta$")
        ax.set_xlim(0, 255)
        ax.set_ylim(0, 1.02)
        legend = ax.legend(loc="lower left")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return [t.get_text() for t in legend.get_texts()]


def write_curve_csvs(reports, labels, out_dir: Path):
    pr_csv, f_csv = out_dir / "pr_curve.csv", out_dir / "f_curve.csv"
    thresholds = reports[0].pr.thresholds
    with open(pr_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold"] + [f"{col}_{label}" for label in labels for col in ("precision", "recall")])
        for i, t in enumerate(thresholds):
            row = [int(t)]
            for r in reports:
                row += [f"{r.pr.precision[i]:.6f}", f"{r.pr.recall[i]:.6f}"]
            writer.writerow(row)
    with open(f_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold"] + [f"f_{label}" for label in labels])
        for i, t in enumerate(thresholds):
            writer.writerow([int(t)] + [f"{r.f_curve[i]:.6f}" for r in reports])
    return pr_csv, f_csv


def plot_reports(reports: Sequence[MetricsReport], out_dir, names: Sequence[str] | None = None,
                 fmt: str = "png") -> List[Path]:
    """Overlay all reports on a PR figure and an F-vs-threshold figure; returns written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = unique_labels(reports, names)
    pr_img, f_img = out_dir / f"pr_curve.{fmt}", out_dir / f"f_curve.{fmt}"
    plot_pr(reports, labels, pr_img)
    plot_f(reports, labels, f_img)
    return [pr_img, f_img, *write_curve_csvs(reports, labels, out_dir)]
