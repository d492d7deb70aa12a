"""
Smooth random deformations for spatial data augmentation.

A field is drawn as i.i.d. uniform displacements on a coarse control grid
and upsampled to full resolution by linear interpolation. The control
points are spread evenly over the grid, at least `control_spacing` voxels
apart, so every per-voxel finite difference of the result is bounded by
2 * max_amplitude / control_spacing.
"""

from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from core.configs import AugmentConfig
from core.volume import Atlas, Volume, argmax_labels, as_batch, make_one_hot, one_hot_tensor
from core.warp import DisplacementField, warp_probs_tensor, warp_tensor

_MODES = {2: "bilinear", 3: "trilinear"}


def control_grid_shape(shape: Sequence[int], control_spacing: int) -> tuple:
    counts = tuple((int(n) - 1) // control_spacing + 1 for n in shape)
    if any(c < 2 for c in counts):
        raise ValueError(
            f"control grid {counts} for shape {tuple(shape)} at spacing {control_spacing} "
            f"needs at least 2 points per axis"
        )
    return counts


def sample_smooth_field(
    shape: Sequence[int],
    cfg: AugmentConfig,
    rng: Optional[np.random.Generator] = None,
) -> DisplacementField:
    shape = tuple(int(n) for n in shape)
    if len(shape) not in _MODES:
        raise ValueError(f"only 2D and 3D fields are supported, got shape {shape}")
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    counts = control_grid_shape(shape, cfg.control_spacing)

    coarse = rng.uniform(-cfg.max_amplitude, cfg.max_amplitude, size=(len(shape),) + counts)
    coarse_t = torch.from_numpy(coarse.astype(np.float32))[None]
    with torch.no_grad():
        dense = F.interpolate(coarse_t, size=shape, mode=_MODES[len(shape)], align_corners=True)
    return DisplacementField(dense[0].numpy())


def augment_tensors(
    image: torch.Tensor,
    probs: torch.Tensor,
    flow: torch.Tensor,
) -> tuple:
    """Warp an image batch and its label probabilities with one shared field (no grad)."""
    with torch.no_grad():
        return warp_tensor(image, flow), warp_probs_tensor(probs, flow)


def augment_atlas(
    a: Atlas,
    cfg: AugmentConfig,
    rng: Optional[np.random.Generator] = None,
) -> Atlas:
    field = sample_smooth_field(a.image.shape, cfg, rng)
    image_t = as_batch(a.image)
    probs_t = as_batch(make_one_hot(a.labels), dtype=image_t.dtype)
    flow_t = as_batch(field, dtype=image_t.dtype)
    warped_img, warped_probs = augment_tensors(image_t, probs_t, flow_t)
    return Atlas(
        image=Volume(warped_img[0, 0].numpy(), spacing=a.image.spacing),
        labels=argmax_labels(warped_probs[0].numpy(), spacing=a.labels.spacing),
        id=a.id,
    )


def augment_batch(
    image: torch.Tensor,
    labels: torch.Tensor,
    num_labels: int,
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> tuple:
    """
    Training-loop variant on tensors: (1,1,*S) image + (1,*S) labels ->
    augmented image and hard augmented labels.
    """
    field = sample_smooth_field(image.shape[2:], cfg, rng)
    flow = as_batch(field, dtype=image.dtype)
    probs = one_hot_tensor(labels, num_labels, dtype=image.dtype)
    warped_img, warped_probs = augment_tensors(image, probs, flow)
    return warped_img, warped_probs.argmax(dim=1)
