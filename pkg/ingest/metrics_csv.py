"""
Results table I/O.

Header: method,n_atlases,repeat,subject,label,dice,mean_sd,max_sd
Floats are written with 6 decimals and infinities as "inf", so the same
rows always serialize to the same bytes.
"""

import csv
import io
import math
from pathlib import Path
from typing import Dict, Iterable, List, Union

from config import RESULTS_HEADER
from core.metrics import MetricReport
from ingest.atomic import atomic_write_text

PathLike = Union[str, Path]
INT_FIELDS = ("n_atlases", "repeat", "label")
FLOAT_FIELDS = ("dice", "mean_sd", "max_sd")
KEY_FIELDS = ("method", "n_atlases", "repeat", "subject", "label")


def format_value(value) -> str:
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return f"{value:.6f}"
    return str(value)


def report_rows(report: MetricReport, method: str, n_atlases: int, repeat: int, subject: str) -> List[dict]:
    return [
        {
            "method": method, "n_atlases": int(n_atlases), "repeat": int(repeat), "subject": subject,
            "label": int(label), "dice": float(dice), "mean_sd": float(mean_sd), "max_sd": float(max_sd),
        }
        for label, dice, mean_sd, max_sd in report.rows()
    ]


def rows_to_text(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULTS_HEADER)
    for row in rows:
        missing = [k for k in RESULTS_HEADER if k not in row]
        if missing:
            raise KeyError(f"results row is missing column(s) {missing}")
        writer.writerow([format_value(row[k]) for k in RESULTS_HEADER])
    return buf.getvalue()


def _parse(row: Dict[str, str]) -> dict:
    out: dict = dict(row)
    for k in INT_FIELDS:
        out[k] = int(row[k])
    for k in FLOAT_FIELDS:
        out[k] = float(row[k])
    return out


def read_metrics_csv(path: PathLike) -> List[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"results table not found: {path}")
    reader = csv.DictReader(io.StringIO(path.read_text()))
    if reader.fieldnames != RESULTS_HEADER:
        raise ValueError(f"{path} has header {reader.fieldnames}, expected {RESULTS_HEADER}")
    return [_parse(r) for r in reader]


def write_metrics_csv(path: PathLike, rows: Iterable[dict]) -> None:
    atomic_write_text(path, rows_to_text(rows))


def append_metrics_csv(path: PathLike, rows: Iterable[dict]) -> None:
    """
    Merge `rows` into the table at `path` and rewrite it atomically. A row
    whose key columns match an existing row replaces it.
    """
    path = Path(path)
    existing = read_metrics_csv(path) if path.exists() else []
    merged: Dict[tuple, dict] = {}
    for row in existing + list(rows):
        merged[tuple(row[k] for k in KEY_FIELDS)] = row
    write_metrics_csv(path, merged.values())


def sort_rows(rows: Iterable[dict]) -> List[dict]:
    return sorted(rows, key=lambda r: tuple(r[k] for k in KEY_FIELDS))
