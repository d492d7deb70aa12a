"""
Segmentation evaluation: per-structure Dice and symmetric surface distance.

Surface voxels are label voxels with at least one face-adjacent neighbour of
another label or outside the grid. Surface distances are voxel-centre
Euclidean distances in mm, pooled over both directions; the max of the
pooled set is the symmetric Hausdorff distance.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from core.volume import LabelMap


# ─────────────────────────────────────────────────────────
# Report
# ─────────────────────────────────────────────────────────

@dataclass
class MetricReport:
    labels:         List[int]
    dice:           Dict[int, float]
    mean_sd:        Dict[int, float]
    max_sd:         Dict[int, float]
    missing_surface: List[int] = field(default_factory=list)   # labels with exactly one empty surface

    @property
    def mean_dice(self) -> float:
        return _mean([self.dice[l] for l in self.labels])

    @property
    def mean_mean_sd(self) -> float:
        return _finite_mean([self.mean_sd[l] for l in self.labels])

    @property
    def mean_max_sd(self) -> float:
        return _finite_mean([self.max_sd[l] for l in self.labels])

    @property
    def max_sd_global(self) -> float:
        """Largest surface distance across all included structures."""
        values = [self.max_sd[l] for l in self.labels]
        return max(values) if values else 0.0

    def rows(self) -> List[Tuple[int, float, float, float]]:
        return [(l, self.dice[l], self.mean_sd[l], self.max_sd[l]) for l in self.labels]

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "dice": {str(l): v for l, v in self.dice.items()},
            "mean_sd": {str(l): v for l, v in self.mean_sd.items()},
            "max_sd": {str(l): v for l, v in self.max_sd.items()},
            "missing_surface": list(self.missing_surface),
            "mean_dice": self.mean_dice,
            "mean_mean_sd": self.mean_mean_sd,
            "mean_max_sd": self.mean_max_sd,
            "max_sd_global": self.max_sd_global,
        }


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else 0.0


def _finite_mean(values: Sequence[float]) -> float:
    """Mean over finite entries; inf only when every entry is inf."""
    if not values:
        return 0.0
    finite = [v for v in values if math.isfinite(v)]
    if not finite:
        return math.inf
    return float(np.mean(finite))


def _check_pair(pred: LabelMap, truth: LabelMap) -> None:
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs truth {truth.shape}")


# ─────────────────────────────────────────────────────────
# Overlap
# ─────────────────────────────────────────────────────────

def dice_score(pred: LabelMap, truth: LabelMap, label: int) -> float:
    _check_pair(pred, truth)
    if label < 0 or label >= max(pred.num_labels, truth.num_labels):
        raise ValueError(f"label {label} is outside [0, {max(pred.num_labels, truth.num_labels)})")
    p = pred.labels == label
    t = truth.labels == label
    size = int(p.sum()) + int(t.sum())
    if size == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / size


def present_labels(*maps: LabelMap, include_background: bool = False) -> List[int]:
    found = set()
    for m in maps:
        found.update(int(v) for v in np.unique(m.labels))
    if not include_background:
        found.discard(0)
    return sorted(found)


def mean_foreground_dice(pred: LabelMap, truth: LabelMap) -> float:
    labels = present_labels(pred, truth)
    return _mean([dice_score(pred, truth, l) for l in labels])


# ─────────────────────────────────────────────────────────
# Surfaces
# ─────────────────────────────────────────────────────────

def surface_mask(mask: np.ndarray) -> np.ndarray:
    if not mask.any():
        return np.zeros_like(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    # border_value=0 makes voxels on the grid edge count as boundary
    interior = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return mask & ~interior


def extract_surface(m: LabelMap, label: int) -> np.ndarray:
    """(K, D) integer coordinates of the label's boundary voxels."""
    return np.argwhere(surface_mask(m.labels == label))


def _directed_distances(src: np.ndarray, dst: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    """Distance in mm from every voxel of src to the nearest voxel of dst."""
    edt = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return edt[src]


def surface_distance(
    pred: LabelMap,
    truth: LabelMap,
    label: int,
    spacing: Optional[Sequence[float]] = None,
) -> Tuple[float, float]:
    """
    (mean, max) symmetric surface distance in mm. Both surfaces empty gives
    (0, 0); exactly one empty gives (inf, inf).
    """
    _check_pair(pred, truth)
    spacing = tuple(spacing) if spacing is not None else truth.spacing
    if len(spacing) != len(truth.shape):
        raise ValueError(f"spacing {spacing} does not match rank {len(truth.shape)}")
    sp = surface_mask(pred.labels == label)
    st = surface_mask(truth.labels == label)
    has_p, has_t = bool(sp.any()), bool(st.any())
    if not has_p and not has_t:
        return 0.0, 0.0
    if has_p != has_t:
        return math.inf, math.inf
    pooled = np.concatenate([
        _directed_distances(sp, st, spacing),
        _directed_distances(st, sp, spacing),
    ])
    return float(pooled.mean()), float(pooled.max())


# ─────────────────────────────────────────────────────────
# Full report
# ─────────────────────────────────────────────────────────

def evaluate(
    pred: LabelMap,
    truth: LabelMap,
    spacing: Optional[Sequence[float]] = None,
    included_labels: Optional[Iterable[int]] = None,
) -> MetricReport:
    """
    Per-label metrics and their unweighted means. By default every label
    present in either map is included except background.
    """
    _check_pair(pred, truth)
    labels = sorted(set(included_labels)) if included_labels is not None else present_labels(pred, truth)
    report = MetricReport(labels=labels, dice={}, mean_sd={}, max_sd={})
    for l in labels:
        report.dice[l] = dice_score(pred, truth, l)
        mean_sd, max_sd = surface_distance(pred, truth, l, spacing)
        report.mean_sd[l] = mean_sd
        report.max_sd[l] = max_sd
        if math.isinf(mean_sd):
            report.missing_surface.append(l)
    return report
