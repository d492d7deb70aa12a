"""
Procedural phantom population standing in for a brain MRI cohort.

The base phantom is a nested ellipse with four labels:
  0 background
  1 outer ring (cortex analog)
  2 large interior
  3 small disc inside the interior, < 2% of the foreground

Every subject is the base warped by its own smooth random field plus
Gaussian intensity noise; the labels are warped by the same field.
"""

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from core.augment import sample_smooth_field
from core.configs import AugmentConfig, SyntheticPopConfig
from core.volume import Atlas, LabelMap, Volume, argmax_labels, make_one_hot
from core.warp import warp_probmap, warp_scalar

SPLITS = ("train", "val", "test", "unlabeled")
LABEL_NAMES = {0: "background", 1: "ring", 2: "interior", 3: "small"}
SMALL_LABEL = 3
INTENSITIES = (0.0, 0.8, 0.4, 1.0)
AXIS_SCALE = (1.0, 0.85, 0.9)
SMALL_OFFSET = 0.12   # centre of the small disc, fraction of the extent along axis 0
BASE_BLUR = 0.7


@dataclass
class Dataset:
    train:     List[Atlas]
    val:       List[Atlas]
    test:      List[Atlas]
    unlabeled: List[Atlas]     # labels kept only for the fully supervised reference
    base:      Atlas = None
    num_labels: int = 4
    spacing:   Tuple[float, ...] = ()

    @property
    def unlabeled_volumes(self) -> List[Volume]:
        return [a.image for a in self.unlabeled]

    def split(self, name: str) -> List[Atlas]:
        if name not in SPLITS:
            raise ValueError(f"unknown split '{name}'; choose from {list(SPLITS)}")
        return getattr(self, name)

    def ids(self) -> Dict[str, List[str]]:
        return {s: [a.id for a in self.split(s)] for s in SPLITS}


def check_disjoint(ids: Dict[str, Sequence[str]]) -> None:
    seen: Dict[str, str] = {}
    for split, names in ids.items():
        for name in names:
            if name in seen:
                raise ValueError(f"subject '{name}' appears in both '{seen[name]}' and '{split}'")
            seen[name] = split


# ─────────────────────────────────────────────────────────
# Base phantom
# ─────────────────────────────────────────────────────────

def _normalized_radius(shape: Sequence[int], center: Sequence[float]) -> np.ndarray:
    axes = np.meshgrid(*[np.arange(n, dtype=np.float64) / (n - 1) for n in shape], indexing="ij")
    r2 = sum(((a - c) / AXIS_SCALE[d]) ** 2 for d, (a, c) in enumerate(zip(axes, center)))
    return np.sqrt(r2)


def base_phantom(cfg: SyntheticPopConfig) -> Atlas:
    shape = tuple(cfg.shape)
    ndim = len(shape)
    r = _normalized_radius(shape, (0.5,) * ndim)
    labels = np.zeros(shape, dtype=np.int32)
    labels[r <= cfg.outer_radius] = 1
    labels[r <= cfg.outer_radius - cfg.ring_width] = 2
    small_center = (0.5 + SMALL_OFFSET,) + (0.5,) * (ndim - 1)
    labels[_normalized_radius(shape, small_center) <= cfg.small_radius] = SMALL_LABEL

    image = np.asarray(INTENSITIES, dtype=np.float64)[labels]
    image = ndimage.gaussian_filter(image, sigma=BASE_BLUR).astype(np.float32)
    return Atlas(
        image=Volume(image, spacing=cfg.spacing),
        labels=LabelMap(labels, num_labels=cfg.num_labels, spacing=cfg.spacing),
        id="base",
    )


def label_fractions(labels: LabelMap) -> Dict[int, float]:
    """Share of the foreground occupied by each foreground label."""
    fg = int((labels.labels > 0).sum())
    return {
        l: (int((labels.labels == l).sum()) / fg if fg else 0.0)
        for l in range(1, labels.num_labels)
    }


# ─────────────────────────────────────────────────────────
# Subjects
# ─────────────────────────────────────────────────────────

def make_subject(base: Atlas, cfg: SyntheticPopConfig, rng: np.random.Generator, subject_id: str) -> Atlas:
    deform = AugmentConfig(control_spacing=cfg.deform_spacing, max_amplitude=cfg.deform_amplitude)
    onehot = make_one_hot(base.labels)
    for _ in range(cfg.max_retries):
        f = sample_smooth_field(base.image.shape, deform, rng)
        labels = argmax_labels(warp_probmap(onehot, f), spacing=cfg.spacing)
        if len(np.unique(labels.labels)) < cfg.num_labels:
            continue
        image = warp_scalar(base.image, f).data
        if cfg.noise_std > 0:
            image = image + rng.normal(0.0, cfg.noise_std, size=image.shape).astype(image.dtype)
        return Atlas(image=Volume(image, spacing=cfg.spacing), labels=labels, id=subject_id)
    raise RuntimeError(
        f"subject '{subject_id}': a label vanished in all {cfg.max_retries} sampled deformations"
    )


def synth_population(cfg: SyntheticPopConfig, verbose: bool = False) -> Dataset:
    base = base_phantom(cfg)
    missing = set(range(cfg.num_labels)) - set(np.unique(base.labels.labels).tolist())
    if missing:
        raise ValueError(f"phantom parameters leave label(s) {sorted(missing)} empty at shape {cfg.shape}")

    sizes = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test, "unlabeled": cfg.n_unlabeled}
    splits: Dict[str, List[Atlas]] = {}
    for split_index, split in enumerate(SPLITS):
        splits[split] = [
            make_subject(base, cfg, np.random.default_rng([cfg.rng_seed, split_index, i]), f"{split}_{i:03d}")
            for i in range(sizes[split])
        ]
        if verbose:
            print(f"[synth] {split}: {len(splits[split])} subjects")

    ds = Dataset(base=base, num_labels=cfg.num_labels, spacing=tuple(cfg.spacing), **splits)
    check_disjoint(ds.ids())
    return ds
