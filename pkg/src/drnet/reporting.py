"""Result tables: markdown rendering, metrics CSV, and ROC point files.

Published results on the two supported SLO datasets are bundled as
reference rows so fresh evaluations can be rendered next to them.  The
markdown snapshots under ``drnet/reference/`` are the canonical bytes for
those rows; the renderer is tested against them.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .metrics import MetricsReport

METRIC_COLUMNS = ("Method", "Year", "Sen", "Spe", "Acc", "AUC", "MCC")


@dataclass(frozen=True)
class MethodRow:
    method: str
    year: int
    sen: float
    spe: float
    acc: float
    auc: float
    mcc: float


IOSTAR_BASELINES = (
    MethodRow("Abbasi-Sureshjani et al.", 2015, 0.7863, 0.9747, 0.9501, 0.9615, 0.7752),
    MethodRow("Zhang et al.", 2016, 0.7545, 0.9740, 0.9514, 0.9626, 0.7318),
    MethodRow("Meyer et al.", 2017, 0.8038, 0.9801, 0.9695, 0.9771, 0.7920),
    MethodRow("Srinidhi et al.", 2018, 0.8269, 0.9669, 0.9564, 0.9663, 0.7057),
    MethodRow("DRNet", 2019, 0.8082, 0.9854, 0.9713, 0.9873, 0.8017),
)

RCSLO_BASELINES = (
    MethodRow("Zhang et al.", 2016, 0.7787, 0.9710, 0.9512, 0.9626, 0.7327),
    MethodRow("Meyer et al.", 2017, 0.8090, 0.9801, 0.9623, 0.9807, 0.7905),
    MethodRow("Srinidhi et al.", 2018, 0.8488, 0.9666, 0.9581, 0.9678, 0.7029),
    MethodRow("DRNet", 2019, 0.8151, 0.9879, 0.9744, 0.9848, 0.8190),
)

BASELINES = {"iostar": IOSTAR_BASELINES, "rcslo": RCSLO_BASELINES}
DATASET_TITLES = {"iostar": "IOSTAR", "rcslo": "RC-SLO"}


def report_to_row(report: MetricsReport, method: str, year: int = 0) -> MethodRow:
    v = report.as_ordered_values()
    return MethodRow(method, year, *v)


def format_markdown_row(row: MethodRow) -> str:
    return (
        f"| {row.method} | {row.year} | {row.sen:.4f} | {row.spe:.4f} "
        f"| {row.acc:.4f} | {row.auc:.4f} | {row.mcc:.4f} |"
    )


def baseline_rows_markdown(dataset: str) -> str:
    """The baseline rows for a dataset, one markdown row per line."""
    if dataset not in BASELINES:
        raise ConfigError(f"unknown dataset {dataset!r}; expected one of {tuple(BASELINES)}")
    return "\n".join(format_markdown_row(r) for r in BASELINES[dataset]) + "\n"


def packaged_baseline_rows(dataset: str) -> str:
    """The checked-in reference bytes for a dataset's baseline rows."""
    if dataset not in BASELINES:
        raise ConfigError(f"unknown dataset {dataset!r}; expected one of {tuple(BASELINES)}")
    return (
        resources.files("drnet.reference")
        .joinpath(f"{dataset}_baselines.md")
        .read_text(encoding="utf-8")
    )


def render_markdown_table(dataset: str, result_rows: Sequence[MethodRow] = ()) -> str:
    """Full comparison table: header, baseline rows, then new result rows."""
    title = DATASET_TITLES.get(dataset)
    if title is None:
        raise ConfigError(f"unknown dataset {dataset!r}; expected one of {tuple(BASELINES)}")
    lines = [
        f"Results on the {title} dataset",
        "",
        "| " + " | ".join(METRIC_COLUMNS) + " |",
        "| " + " | ".join("---" for _ in METRIC_COLUMNS) + " |",
    ]
    lines.append(baseline_rows_markdown(dataset).rstrip("\n"))
    for row in result_rows:
        lines.append(format_markdown_row(row))
    return "\n".join(lines) + "\n"


def write_metrics_csv(path, rows: Iterable[MethodRow]) -> None:
    """One CSV row per method with the table column set."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRIC_COLUMNS)
        for r in rows:
            writer.writerow(
                [r.method, r.year]
                + [f"{v:.4f}" for v in (r.sen, r.spe, r.acc, r.auc, r.mcc)]
            )


def read_metrics_csv(path) -> list[MethodRow]:
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(header) != METRIC_COLUMNS:
            raise ConfigError(f"{path}: not a metrics CSV (header {header})")
        for rec in reader:
            rows.append(
                MethodRow(
                    rec[0],
                    int(rec[1]),
                    *(float(v) for v in rec[2:7]),
                )
            )
    return rows


def write_roc_csv(path, thresholds: np.ndarray, fpr: np.ndarray, tpr: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "fpr", "tpr"])
        for t, x, y in zip(thresholds, fpr, tpr):
            writer.writerow([repr(float(t)), repr(float(x)), repr(float(y))])


def write_per_image_csv(path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "tp", "fp", "tn", "fn", "sen", "spe", "acc", "auc", "mcc"])
        for m in report.per_image:
            writer.writerow(
                [m.id, m.counts.tp, m.counts.fp, m.counts.tn, m.counts.fn]
                + [f"{v:.6f}" for v in (m.sen, m.spe, m.acc, m.auc, m.mcc)]
            )
