"""
Multi-atlas segmentation: register every atlas (plus optional augmented
copies) to the target, propagate one-hot label probabilities through the
predicted fields and fuse by per-voxel summation followed by argmax.
"""

from typing import List, Optional, Sequence

import numpy as np
import torch

from core.augment import augment_atlas
from core.configs import FusionConfig
from core.regnet import RegNet, reg_forward
from core.volume import Atlas, LabelMap, ProbMap, Volume, argmax_labels, make_one_hot
from core.warp import warp_probmap


def propagate_atlas(params: RegNet, atlas: Atlas, target: Volume) -> ProbMap:
    if atlas.image.shape != target.shape:
        raise ValueError(f"shape mismatch: atlas {atlas.image.shape} vs target {target.shape}")
    field = reg_forward(params, atlas.image, target)
    return warp_probmap(make_one_hot(atlas.labels), field)


def fuse(probmaps: Sequence[ProbMap], spacing: Optional[Sequence[float]] = None) -> LabelMap:
    """Unnormalized per-channel sum, then argmax (lowest label wins ties)."""
    if not probmaps:
        raise ValueError("fuse needs at least 1 probability map")
    ref = probmaps[0]
    for k, pm in enumerate(probmaps[1:], start=1):
        if pm.probs.shape != ref.probs.shape:
            raise ValueError(
                f"probability map {k} has shape {pm.probs.shape}, expected {ref.probs.shape}"
            )
    total = np.zeros(ref.probs.shape, dtype=np.float64)
    for pm in probmaps:
        total += pm.probs
    return argmax_labels(total, spacing=spacing)


def build_atlas_pool(atlases: Sequence[Atlas], cfg: FusionConfig) -> List[Atlas]:
    """Originals followed by n_augmented copies taken round-robin over the originals."""
    pool = list(atlases)
    for k in range(cfg.n_augmented):
        source = atlases[k % len(atlases)]
        rng = np.random.default_rng([cfg.rng_seed, k])
        pool.append(augment_atlas(source, cfg.augment, rng))
    return pool


def mas_segment(
    params: RegNet,
    atlases: Sequence[Atlas],
    target: Volume,
    cfg: Optional[FusionConfig] = None,
    verbose: bool = False,
) -> LabelMap:
    cfg = cfg or FusionConfig()
    if not atlases:
        raise ValueError("mas_segment needs at least 1 atlas")
    counts = {a.num_labels for a in atlases}
    if len(counts) != 1:
        raise ValueError(f"atlases disagree on the label count: {sorted(counts)}")

    pool = build_atlas_pool(atlases, cfg)
    params.eval()
    with torch.no_grad():
        probmaps = [propagate_atlas(params, a, target) for a in pool]
    if verbose:
        print(f"[mas] fused {len(atlases)} atlases + {cfg.n_augmented} augmented copies")
    return fuse(probmaps, spacing=target.spacing)
