"""Provider-facing report files: CSV series plus PNG charts.

Two charts mirror what an EHR would show: daily medication compliance as
stacked taken/missed bars, and blood pressure as systolic/diastolic lines.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Optional

from .contracts import SummaryReport
from .core import format_time

logger = logging.getLogger(__name__)

SYSTOLIC = "blood-pressure#systolic"
DIASTOLIC = "blood-pressure#diastolic"


def write_series_csv(report: SummaryReport, path: str | Path) -> Path:
    """Long format: code, time, value (one row per point)."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["code", "time", "value"])
        for code, points in report.series:
            for t, v in points:
                w.writerow([code, format_time(t), repr(float(v))])
    return path


def write_statistics_csv(report: SummaryReport, path: str | Path) -> Path:
    path = Path(path)
    columns = ["count", "min", "max", "mean", "latest"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["code", *columns])
        for code, stats in report.statistics.items():
            w.writerow([code, *("" if stats.get(c) is None else stats.get(c) for c in columns)])
    return path


def compliance_rows(report: SummaryReport) -> list[tuple[str, int, int]]:
    """(day, taken, missed) from the daily compliance series."""
    try:
        taken = report.points("doses-taken")
        missed = report.points("doses-missed")
    except KeyError:
        return []
    return [(t.date().isoformat(), int(a), int(b)) for (t, a), (_, b) in zip(taken, missed)]


def write_compliance_csv(report: SummaryReport, path: str | Path) -> Optional[Path]:
    rows = compliance_rows(report)
    if not rows:
        return None
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["day", "taken", "missed"])
        w.writerows(rows)
    return path


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_compliance(report: SummaryReport, path: str | Path) -> Optional[Path]:
    rows = compliance_rows(report)
    if not rows:
        return None
    plt = _pyplot()
    days = [r[0] for r in rows]
    taken = [r[1] for r in rows]
    missed = [r[2] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    x = list(range(len(days)))
    ax.bar(x, taken, color="#2a9d8f", label="taken")
    ax.bar(x, missed, bottom=taken, color="#e76f51", label="missed")
    ax.set_xticks(x, days)
    ratio = report.compliance["ratio"] if report.compliance else None
    title = "Medication compliance"
    if ratio:
        title += f" ({ratio['numerator']}/{ratio['denominator']})"
    ax.set_title(title)
    ax.set_ylabel("doses")
    ax.set_ylim(0, max(t + m for t, m in zip(taken, missed)) + 1)
    ax.yaxis.get_major_locator().set_params(integer=True)
    ax.legend(loc="upper right", ncol=2)
    ax.tick_params(axis="x", labelrotation=30)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_blood_pressure(report: SummaryReport, path: str | Path) -> Optional[Path]:
    try:
        sys_pts = report.points(SYSTOLIC)
        dia_pts = report.points(DIASTOLIC)
    except KeyError:
        return None
    if not sys_pts and not dia_pts:
        return None
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.plot([t for t, _ in sys_pts], [v for _, v in sys_pts], marker="o", color="#c1121f", label="systolic")
    ax.plot([t for t, _ in dia_pts], [v for _, v in dia_pts], marker="s", color="#003049", label="diastolic")
    ax.set_title("Blood pressure")
    ax.set_ylabel("mm[Hg]")
    ax.legend(loc="upper right")
    fig.autofmt_xdate()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def write_report(report: SummaryReport, out_dir: str | Path, prefix: str = "summary") -> list[Path]:
    """Write every applicable CSV and chart; returns the files written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [
        write_series_csv(report, out / f"{prefix}-series.csv"),
        write_statistics_csv(report, out / f"{prefix}-statistics.csv"),
        write_compliance_csv(report, out / f"{prefix}-compliance.csv"),
        plot_compliance(report, out / f"{prefix}-compliance.png"),
        plot_blood_pressure(report, out / f"{prefix}-blood-pressure.png"),
    ]
    files = [p for p in written if p is not None]
    logger.info("wrote %d report files to %s", len(files), out)
    return files
