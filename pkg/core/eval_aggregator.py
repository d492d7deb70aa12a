"""
Aggregates per-subject metric rows from the results table
"""

import math
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List

import numpy as np

from ingest.metrics_csv import read_metrics_csv


def _empty_summary(table_exists: bool) -> Dict:
    return {
        "summary": {
            "total_rows": 0,
            "methods": [],
            "n_values": [],
        },
        "by_method": {},
        "metadata": {
            "rows_analyzed": 0,
            "table_exists": table_exists,
        },
    }


def _finite_mean(values: Iterable[float]) -> float:
    finite = [v for v in values if math.isfinite(v)]
    return float(np.mean(finite)) if finite else math.inf


def _repeat_means(rows: List[dict]) -> Dict[tuple, Dict[str, float]]:
    """
    Per (method, N, repeat): mean over subjects and labels of each metric,
    plus the mean over subjects of the per-subject max surface distance.
    """
    groups = defaultdict(list)
    for r in rows:
        groups[(r["method"], r["n_atlases"], r["repeat"])].append(r)

    out = {}
    for key, group in groups.items():
        per_subject_max = defaultdict(float)
        missing = 0
        for r in group:
            per_subject_max[r["subject"]] = max(per_subject_max[r["subject"]], r["max_sd"])
            if math.isinf(r["mean_sd"]):
                missing += 1
        out[key] = {
            "dice": float(np.mean([r["dice"] for r in group])),
            "mean_sd": _finite_mean(r["mean_sd"] for r in group),
            "max_sd": _finite_mean(r["max_sd"] for r in group),
            "max_sd_global": _finite_mean(per_subject_max.values()),
            "missing_surfaces": missing,
        }
    return out


def aggregate_results(rows: List[dict]) -> Dict:
    """
    Summary keyed by method then N: each metric averaged over subjects and
    labels per repeat, then mean and standard deviation across repeats.
    """
    if not rows:
        return _empty_summary(True)

    per_repeat = _repeat_means(rows)
    grouped = defaultdict(lambda: defaultdict(list))
    for (method, n, _), stats in sorted(per_repeat.items()):
        grouped[method][n].append(stats)

    by_method = {}
    for method in sorted(grouped):
        by_method[method] = {}
        for n in sorted(grouped[method]):
            stats = grouped[method][n]
            dice = [s["dice"] for s in stats]
            by_method[method][str(n)] = {
                "n_repeats": len(stats),
                "dice_mean": round(float(np.mean(dice)), 6),
                "dice_std": round(float(np.std(dice)), 6),
                "mean_sd": round(_finite_mean(s["mean_sd"] for s in stats), 6),
                "max_sd": round(_finite_mean(s["max_sd"] for s in stats), 6),
                "max_sd_global": round(_finite_mean(s["max_sd_global"] for s in stats), 6),
                "missing_surfaces": int(sum(s["missing_surfaces"] for s in stats)),
            }

    return {
        "summary": {
            "total_rows": len(rows),
            "methods": sorted(grouped),
            "n_values": sorted({r["n_atlases"] for r in rows}),
        },
        "by_method": by_method,
        "metadata": {
            "rows_analyzed": len(rows),
            "table_exists": True,
        },
    }


def aggregate_results_file(results_file: str) -> Dict:
    if not Path(results_file).exists():
        return _empty_summary(False)
    return aggregate_results(read_metrics_csv(results_file))


def structure_summary(rows: List[dict]) -> Dict[str, Dict[str, Dict[str, float]]]:
    """Mean Dice per method, N and label (the per-structure view)."""
    acc = defaultdict(list)
    for r in rows:
        acc[(r["method"], r["n_atlases"], r["label"])].append(r["dice"])

    out: Dict[str, Dict[str, Dict[str, float]]] = {}
    for (method, n, label) in sorted(acc):
        out.setdefault(method, {}).setdefault(str(n), {})[str(label)] = round(
            float(np.mean(acc[(method, n, label)])), 6
        )
    return out
