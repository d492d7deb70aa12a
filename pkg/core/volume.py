"""
Volumetric data model shared by every other module.

Volume / LabelMap / ProbMap / Atlas are immutable containers around numpy
arrays. The differentiable code paths (warp, losses, networks) work on
batched torch tensors shaped (B, C, *spatial); `as_batch` bridges the two.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

SUPPORTED_NDIMS = (2, 3)


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, copy=True)
    out.flags.writeable = False
    return out


def _check_spacing(spacing: Optional[Sequence[float]], ndim: int) -> tuple:
    if spacing is None:
        return (1.0,) * ndim
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != ndim:
        raise ValueError(f"spacing has {len(spacing)} entries, expected {ndim}")
    if any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise ValueError(f"spacing entries must be finite and > 0, got {spacing}")
    # NIfTI pixdim is float32; keep only what a header can hold
    rounded = tuple(float(np.float32(s)) for s in spacing)
    if any(not np.isfinite(s) or s <= 0 for s in rounded):
        raise ValueError(f"spacing {spacing} is outside the float32 range")
    return rounded


def _check_shape(shape: tuple) -> None:
    if len(shape) not in SUPPORTED_NDIMS:
        raise ValueError(f"only 2D and 3D grids are supported, got shape {shape}")
    if any(n < 2 for n in shape):
        raise ValueError(f"every axis needs at least 2 voxels, got shape {shape}")


@dataclass(frozen=True)
class Volume:
    """Scalar intensity grid with per-axis spacing in mm."""
    data:    np.ndarray
    spacing: tuple = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        _check_shape(data.shape)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume data contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing, data.ndim))

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim


@dataclass(frozen=True)
class LabelMap:
    """Discrete segmentation; 0 is background, values lie in [0, num_labels)."""
    labels:     np.ndarray
    num_labels: int
    spacing:    tuple = None

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.mod(labels, 1) == 0):
                raise ValueError("label map contains non-integer values")
            labels = labels.astype(np.int32)
        _check_shape(labels.shape)
        if self.num_labels < 1:
            raise ValueError(f"num_labels must be >= 1, got {self.num_labels}")
        _check_label_range(labels, self.num_labels)
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "num_labels", int(self.num_labels))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing, labels.ndim))

    @property
    def shape(self) -> tuple:
        return self.labels.shape

    @property
    def ndim(self) -> int:
        return self.labels.ndim


@dataclass(frozen=True)
class ProbMap:
    """Per-voxel label distribution, channels first: (L, *spatial)."""
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs)
        if not np.issubdtype(probs.dtype, np.floating):
            probs = probs.astype(np.float32)
        if probs.ndim < 2 or probs.shape[0] < 1:
            raise ValueError(f"probability map needs a non-empty channel axis, got shape {probs.shape}")
        if not np.all(np.isfinite(probs)):
            raise ValueError("probability map contains non-finite values")
        if probs.min() < 0 or probs.max() > 1:
            raise ValueError("probability map entries must lie in [0, 1]")
        sums = probs.sum(axis=0, dtype=np.float64)
        worst = float(np.abs(sums - 1.0).max())
        if worst > 1e-5:
            raise ValueError(f"channels must sum to 1 per voxel (max deviation {worst:.2e})")
        object.__setattr__(self, "probs", _frozen(probs))

    @property
    def num_labels(self) -> int:
        return self.probs.shape[0]

    @property
    def shape(self) -> tuple:
        return self.probs.shape[1:]


@dataclass(frozen=True)
class Atlas:
    """An image paired with its manual segmentation."""
    image:  Volume
    labels: LabelMap
    id:     str = field(default="")

    def __post_init__(self):
        if self.image.shape != self.labels.shape:
            raise ValueError(
                f"atlas '{self.id}': image shape {self.image.shape} != label shape {self.labels.shape}"
            )

    @property
    def num_labels(self) -> int:
        return self.labels.num_labels


def _check_label_range(labels: np.ndarray, num_labels: int) -> None:
    if labels.size == 0:
        return
    lo, hi = int(labels.min()), int(labels.max())
    if lo < 0 or hi >= num_labels:
        raise ValueError(f"label values must lie in [0, {num_labels}), found range [{lo}, {hi}]")


# ── One-hot encoding and its inverse ────────────────────────────────
def make_one_hot(labels: Union[LabelMap, np.ndarray], num_labels: Optional[int] = None) -> ProbMap:
    if isinstance(labels, LabelMap):
        arr = labels.labels
        num_labels = labels.num_labels if num_labels is None else num_labels
    else:
        arr = np.asarray(labels)
        if num_labels is None:
            raise ValueError("num_labels is required for raw label arrays")
    _check_label_range(arr, num_labels)
    channels = np.arange(num_labels).reshape((-1,) + (1,) * arr.ndim)
    return ProbMap((arr[None] == channels).astype(np.float32))


def argmax_labels(
    probs: Union[ProbMap, np.ndarray],
    spacing: Optional[Sequence[float]] = None,
) -> LabelMap:
    """Maximum-likelihood label per voxel; ties go to the lowest channel index."""
    arr = probs.probs if isinstance(probs, ProbMap) else np.asarray(probs)
    if arr.ndim < 2 or arr.shape[0] == 0:
        raise ValueError(f"cannot take argmax over an empty channel axis (shape {arr.shape})")
    # np.argmax returns the first maximal index
    labels = np.argmax(arr, axis=0).astype(np.int32)
    return LabelMap(labels, num_labels=arr.shape[0], spacing=spacing)


# ── numpy <-> torch bridges ─────────────────────────────────────────
def as_batch(x, dtype: Optional[torch.dtype] = None) -> torch.Tensor:
    """
    Batched tensor view of a domain object.

    Volume -> (1, 1, *S), ProbMap -> (1, L, *S), DisplacementField -> (1, D, *S).
    Tensors are returned as-is (assumed batched already); raw arrays gain a
    leading batch axis.
    """
    if isinstance(x, torch.Tensor):
        t = x
    elif isinstance(x, Volume):
        t = torch.from_numpy(np.array(x.data))[None, None]
    elif isinstance(x, ProbMap):
        t = torch.from_numpy(np.array(x.probs))[None]
    elif hasattr(x, "u"):
        t = torch.from_numpy(np.array(x.u))[None]
    else:
        t = torch.from_numpy(np.array(x))[None]
    if dtype is not None:
        t = t.to(dtype)
    return t


def one_hot_tensor(labels: torch.Tensor, num_labels: int, dtype=torch.float32) -> torch.Tensor:
    """(B, *S) integer labels -> (B, L, *S) one-hot."""
    onehot = F.one_hot(labels.long(), num_classes=num_labels)
    return onehot.movedim(-1, 1).to(dtype)


def label_tensor(labels: LabelMap) -> torch.Tensor:
    return torch.from_numpy(np.array(labels.labels, dtype=np.int64))[None]
