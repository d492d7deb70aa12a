"""
Figures for the results table.

  dice_vs_n.png      mean foreground Dice against N, one curve per method
  sd_vs_n.png        mean surface distance against N
  per_structure.png  per-label Dice at the largest N, small structure hatched
  slices.png         image / truth / one prediction per method (optional)
  plot_data.json     the exact series behind the curves, stably sorted
"""

import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from core.eval_aggregator import aggregate_results, structure_summary  # noqa: E402
from core.synthetic import LABEL_NAMES, SMALL_LABEL  # noqa: E402
from core.volume import LabelMap, Volume  # noqa: E402
from ingest.atomic import atomic_path, atomic_write_text  # noqa: E402

PathLike = Union[str, Path]
REFERENCE_METHODS = ("SegNet-Full",)


def curve_series(rows: List[dict]) -> Dict[str, Dict[str, List[float]]]:
    """method -> {"n": [...], "dice": [...], "dice_std": [...], "mean_sd": [...], "max_sd_global": [...]}"""
    summary = aggregate_results(rows)["by_method"]
    series = {}
    for method in sorted(summary):
        ns = sorted(summary[method], key=int)
        series[method] = {
            "n": [int(n) for n in ns],
            "dice": [summary[method][n]["dice_mean"] for n in ns],
            "dice_std": [summary[method][n]["dice_std"] for n in ns],
            "mean_sd": [summary[method][n]["mean_sd"] for n in ns],
            "max_sd_global": [summary[method][n]["max_sd_global"] for n in ns],
        }
    return series


def _finite(values: Sequence[float]) -> List[float]:
    return [v if np.isfinite(v) else np.nan for v in values]


def _save(fig, path: Path) -> None:
    with atomic_path(path) as tmp:
        fig.savefig(str(tmp), dpi=120, bbox_inches="tight", format="png")
    plt.close(fig)


def _curve_figure(series, key: str, ylabel: str, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    curve_ns = sorted({n for m, s in series.items() if m not in REFERENCE_METHODS for n in s["n"]})
    for method, s in series.items():
        if method in REFERENCE_METHODS:
            ax.axhline(float(np.nanmean(_finite(s[key]))), linestyle="--", color="gray", label=method)
            continue
        ax.plot(s["n"], _finite(s[key]), marker="o", label=method)
    if curve_ns:
        ax.set_xticks(curve_ns)
    ax.set_xlabel("number of atlases N")
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    _save(fig, path)


def _structure_figure(rows: List[dict], path: Path) -> dict:
    per_label = structure_summary(rows)
    chosen = {}
    for method, by_n in per_label.items():
        n = max(by_n, key=int)
        chosen[method] = {"n": int(n), "dice": by_n[n]}

    methods = sorted(chosen)
    labels = sorted({int(l) for c in chosen.values() for l in c["dice"]})
    width = 0.8 / max(len(methods), 1)
    fig, ax = plt.subplots(figsize=(7, 4))
    x = np.arange(len(labels))
    for i, method in enumerate(methods):
        heights = [chosen[method]["dice"].get(str(l), np.nan) for l in labels]
        bars = ax.bar(x + i * width, heights, width, label=f"{method} (N={chosen[method]['n']})")
        for bar, label in zip(bars, labels):
            if label == SMALL_LABEL:
                bar.set_hatch("//")
    ax.set_xticks(x + width * (len(methods) - 1) / 2)
    ax.set_xticklabels([LABEL_NAMES.get(l, str(l)) for l in labels])
    ax.set_ylabel("mean Dice")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    _save(fig, path)
    return chosen


def _slice(arr: np.ndarray) -> np.ndarray:
    return arr if arr.ndim == 2 else arr[:, :, arr.shape[2] // 2]


def _slices_figure(image: Volume, truth: LabelMap, predictions: Dict[str, LabelMap], path: Path) -> None:
    panels = [("image", _slice(image.data), "gray"), ("truth", _slice(truth.labels), "viridis")]
    panels += [(m, _slice(predictions[m].labels), "viridis") for m in sorted(predictions)]
    fig, axes = plt.subplots(1, len(panels), figsize=(2.2 * len(panels), 2.4))
    axes = np.atleast_1d(axes)
    vmax = max(truth.num_labels - 1, 1)
    for ax, (title, arr, cmap) in zip(axes, panels):
        kwargs = {} if cmap == "gray" else {"vmin": 0, "vmax": vmax}
        ax.imshow(arr.T, cmap=cmap, origin="lower", interpolation="nearest", **kwargs)
        ax.set_title(title, fontsize=8)
        ax.axis("off")
    _save(fig, path)


def emit_plots(
    results: List[dict],
    out_dir: PathLike,
    image: Optional[Volume] = None,
    truth: Optional[LabelMap] = None,
    predictions: Optional[Dict[str, LabelMap]] = None,
) -> List[Path]:
    if not results:
        raise ValueError("cannot plot an empty results table")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    series = curve_series(results)
    written = [out_dir / "dice_vs_n.png", out_dir / "sd_vs_n.png", out_dir / "per_structure.png"]
    _curve_figure(series, "dice", "mean foreground Dice", written[0])
    _curve_figure(series, "mean_sd", "mean surface distance (mm)", written[1])
    structures = _structure_figure(results, written[2])

    if image is not None and truth is not None and predictions:
        written.append(out_dir / "slices.png")
        _slices_figure(image, truth, predictions, written[-1])

    data = {"curves": series, "per_structure": structures}
    atomic_write_text(out_dir / "plot_data.json", json.dumps(data, indent=2, sort_keys=True, allow_nan=True) + "\n")
    written.append(out_dir / "plot_data.json")
    return written
