"""Metric report rendering: fixed-width tables, delimited output, figure files.

The table prints one row per configuration with mIoU, WeightIoU (when any
report carries it) and one VC<n> column per window length, all at 4 decimal
places. Alongside the text table the same data can be written as CSV and as
matplotlib figures rendered to files.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Mapping, Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from .errors import ValidationError
from .formats import atomic_write_bytes
from .metrics import MetricReport

PathLike = Union[str, Path]


def _column_layout(reports: Sequence[MetricReport]) -> tuple[list[str], bool, list[int]]:
    vc_lengths = sorted({n for report in reports for n in report.vc})
    with_weighted = any(report.weighted_iou is not None for report in reports)
    columns = ["mIoU"] + (["WeightIoU"] if with_weighted else []) + [f"VC{n}" for n in vc_lengths]
    return columns, with_weighted, vc_lengths


def _row_values(report: MetricReport, with_weighted: bool, vc_lengths: Sequence[int]) -> list[float | None]:
    values: list[float | None] = [report.miou]
    if with_weighted:
        values.append(report.weighted_iou)
    values.extend(report.vc.get(n) for n in vc_lengths)
    return values


def emit_report(reports: Sequence[MetricReport], row_labels: Sequence[str]) -> str:
    """Render the fixed-width table; values at 4 decimals, missing cells '-'."""
    reports = list(reports)
    labels = [str(label) for label in row_labels]
    if not reports:
        raise ValidationError("nothing to report")
    if len(reports) != len(labels):
        raise ValidationError(f"{len(reports)} reports but {len(labels)} row labels")

    columns, with_weighted, vc_lengths = _column_layout(reports)
    label_width = max(len("Method"), max(len(label) for label in labels))
    widths = [max(len(name), 6) + 2 for name in columns]

    lines = ["Method".ljust(label_width) + "".join(name.rjust(width) for name, width in zip(columns, widths))]
    for label, report in zip(labels, reports):
        cells = []
        for value, width in zip(_row_values(report, with_weighted, vc_lengths), widths):
            cells.append(("-" if value is None else f"{value:.4f}").rjust(width))
        lines.append(label.ljust(label_width) + "".join(cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# JSON and CSV emission
# ---------------------------------------------------------------------------

def save_report(report: MetricReport, path: PathLike) -> None:
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    atomic_write_bytes(path, text.encode("utf-8"))


def load_report(path: PathLike) -> MetricReport:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid report JSON: {exc}") from None
    return MetricReport.from_dict(doc)


def write_csv(path: PathLike, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_bytes(path, buffer.getvalue().encode("utf-8"))


def write_summary_csv(reports: Sequence[MetricReport], row_labels: Sequence[str], path: PathLike) -> None:
    if len(reports) != len(row_labels):
        raise ValidationError(f"{len(reports)} reports but {len(row_labels)} row labels")
    columns, with_weighted, vc_lengths = _column_layout(reports)
    header = ["label"] + [name.lower() for name in columns] + ["abstained"]
    rows = []
    for label, report in zip(row_labels, reports):
        values = _row_values(report, with_weighted, vc_lengths)
        rows.append([label] + ["" if v is None else repr(float(v)) for v in values] + [report.abstained])
    write_csv(path, header, rows)


def write_per_class_csv(reports: Sequence[MetricReport], row_labels: Sequence[str], path: PathLike) -> None:
    if len(reports) != len(row_labels):
        raise ValidationError(f"{len(reports)} reports but {len(row_labels)} row labels")
    rows = []
    for label, report in zip(row_labels, reports):
        for class_id, iou in enumerate(report.per_class_iou):
            rows.append([label, class_id, "" if iou is None else repr(float(iou))])
    write_csv(path, ["label", "class_id", "iou"], rows)


def write_loss_csv(losses: Sequence[float], path: PathLike) -> None:
    write_csv(path, ["iteration", "loss"], [[i, repr(float(v))] for i, v in enumerate(losses)])


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------

def save_metric_figure(reports: Sequence[MetricReport], row_labels: Sequence[str], path: PathLike) -> None:
    """Grouped bar chart of the table's numeric columns, one group per row."""
    if not reports or len(reports) != len(row_labels):
        raise ValidationError("metric figure needs matching reports and labels")
    columns, with_weighted, vc_lengths = _column_layout(reports)
    fig, ax = plt.subplots(figsize=(max(4.0, 1.8 * len(reports)), 3.2))
    group_width = 0.8
    bar_width = group_width / len(columns)
    for ci, column in enumerate(columns):
        xs, heights = [], []
        for ri, report in enumerate(reports):
            value = _row_values(report, with_weighted, vc_lengths)[ci]
            if value is not None:
                xs.append(ri - group_width / 2 + (ci + 0.5) * bar_width)
                heights.append(value)
        ax.bar(xs, heights, width=bar_width, label=column)
    ax.set_xticks(range(len(reports)))
    ax.set_xticklabels([str(label) for label in row_labels], rotation=20, ha="right")
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("score")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_per_class_figure(reports: Sequence[MetricReport], row_labels: Sequence[str], path: PathLike) -> None:
    """Per-class IoU bars, one series per report row."""
    if not reports or len(reports) != len(row_labels):
        raise ValidationError("per-class figure needs matching reports and labels")
    class_count = max((len(r.per_class_iou) for r in reports), default=0)
    if class_count == 0:
        raise ValidationError("no per-class IoU values to plot")
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * class_count), 3.2))
    bar_width = 0.8 / len(reports)
    for ri, (label, report) in enumerate(zip(row_labels, reports)):
        xs, heights = [], []
        for class_id, iou in enumerate(report.per_class_iou):
            if iou is not None:
                xs.append(class_id - 0.4 + (ri + 0.5) * bar_width)
                heights.append(iou)
        ax.bar(xs, heights, width=bar_width, label=str(label))
    ax.set_xticks(range(class_count))
    ax.set_xlabel("class id")
    ax.set_ylabel("IoU")
    ax.set_ylim(0.0, 1.0)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_loss_figure(curves: Mapping[str, Sequence[float]], path: PathLike) -> None:
    """Training loss curves, one line per model."""
    if not curves:
        raise ValidationError("no loss curves to plot")
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    for label, losses in curves.items():
        ax.plot(range(len(losses)), list(losses), label=str(label), linewidth=1.0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_report_outputs(
    reports: Sequence[MetricReport],
    row_labels: Sequence[str],
    out_dir: PathLike,
) -> list[Path]:
    """Write the table, both CSVs, and both figures into a directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = emit_report(reports, row_labels)
    written = []
    atomic_write_bytes(out_dir / "report.txt", table.encode("utf-8"))
    written.append(out_dir / "report.txt")
    write_summary_csv(reports, row_labels, out_dir / "summary.csv")
    written.append(out_dir / "summary.csv")
    if any(report.per_class_iou for report in reports):
        write_per_class_csv(reports, row_labels, out_dir / "per_class_iou.csv")
        written.append(out_dir / "per_class_iou.csv")
        save_per_class_figure(reports, row_labels, out_dir / "per_class_iou.png")
        written.append(out_dir / "per_class_iou.png")
    save_metric_figure(reports, row_labels, out_dir / "metrics.png")
    written.append(out_dir / "metrics.png")
    return written
