"""
Supervised segmentation baseline f(I) -> ProbMap.

Same UNet backbone as the registration network with a 1-channel input and
an L-channel softmax head. Training and inference run on sliding-window
patches; overlapping patch predictions are averaged when stitched back.
"""

from typing import List, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from core.configs import SegNetConfig
from core.regnet import CONV_LAYERS, UNetBackbone
from core.volume import ProbMap, Volume, as_batch

Offset = Tuple[int, ...]


class SegNet(nn.Module):
    def __init__(self, cfg: SegNetConfig):
        super().__init__()
        self.cfg = cfg
        ndim = len(cfg.patch_size)
        self.unet = UNetBackbone(
            ndim, 1, cfg.enc_filters, cfg.dec_filters, cfg.levels, cfg.leaky_slope,
        )
        self.head = CONV_LAYERS[ndim](self.unet.out_channels, cfg.num_labels, kernel_size=3, padding=1)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        factor = 2 ** self.cfg.levels
        if image.shape[1] != 1 or any(n % factor for n in image.shape[2:]):
            raise ValueError(
                f"input shape {tuple(image.shape[1:])} needs 1 channel and extents divisible by {factor}"
            )
        return torch.softmax(self.head(self.unet(image)), dim=1)


def build_segnet(cfg: SegNetConfig, seed: int = 0) -> SegNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SegNet(cfg)


# ── Patch tiling ────────────────────────────────────────────────────
def patch_starts(n: int, patch: int, stride: int) -> List[int]:
    """Window starts along one axis; the last window is clamped to the edge."""
    if patch > n:
        raise ValueError(f"patch extent {patch} is larger than the volume extent {n}")
    starts = list(range(0, n - patch + 1, stride))
    if starts[-1] != n - patch:
        starts.append(n - patch)
    return starts


def patch_offsets(shape: Sequence[int], patch_size: Sequence[int], stride: Sequence[int]) -> List[Offset]:
    if len(shape) != len(patch_size):
        raise ValueError(f"patch_size {tuple(patch_size)} does not match volume rank {len(shape)}")
    axes = [patch_starts(n, p, s) for n, p, s in zip(shape, patch_size, stride)]
    grids = np.meshgrid(*axes, indexing="ij")
    return [tuple(int(g.flat[i]) for g in grids) for i in range(grids[0].size)]


def _window(offset: Offset, patch_size: Sequence[int]) -> tuple:
    return tuple(slice(o, o + p) for o, p in zip(offset, patch_size))


def extract_patches(v: Volume, cfg: SegNetConfig) -> List[Tuple[np.ndarray, Offset]]:
    offsets = patch_offsets(v.shape, cfg.patch_size, cfg.stride)
    return [(v.data[_window(o, cfg.patch_size)], o) for o in offsets]


def stitch_patches(
    patch_probs: Sequence[np.ndarray],
    offsets: Sequence[Offset],
    shape: Sequence[int],
) -> ProbMap:
    """
    Average overlapping (L, *patch) predictions back onto `shape`.
    Voxels covered once are copied as-is; overlaps are renormalized.
    """
    if not patch_probs or len(patch_probs) != len(offsets):
        raise ValueError(f"need one offset per patch, got {len(patch_probs)} patches and {len(offsets)} offsets")
    shape = tuple(int(n) for n in shape)
    num_labels = patch_probs[0].shape[0]
    total = np.zeros((num_labels,) + shape, dtype=np.float64)
    count = np.zeros(shape, dtype=np.int64)
    for probs, offset in zip(patch_probs, offsets):
        probs = np.asarray(probs)
        if probs.shape[0] != num_labels:
            raise ValueError(f"patch has {probs.shape[0]} channels, expected {num_labels}")
        win = _window(offset, probs.shape[1:])
        if any(s.stop > n for s, n in zip(win, shape)):
            raise ValueError(f"patch at offset {offset} extends past the volume shape {shape}")
        total[(slice(None),) + win] += probs
        count[win] += 1

    if np.any(count == 0):
        missing = tuple(int(i) for i in np.argwhere(count == 0)[0])
        raise ValueError(f"patches do not cover voxel {missing}")

    out = total / count
    overlap = count > 1
    if np.any(overlap):
        sums = out.sum(axis=0)
        out[:, overlap] /= sums[overlap]
    return ProbMap(out.astype(np.asarray(patch_probs[0]).dtype))


def seg_forward_full(params: SegNet, v: Volume, cfg: SegNetConfig = None) -> ProbMap:
    cfg = cfg or params.cfg
    dtype = next(params.parameters()).dtype
    outputs, offsets = [], []
    with torch.no_grad():
        for patch, offset in extract_patches(v, cfg):
            probs = params(torch.from_numpy(np.array(patch))[None, None].to(dtype))
            outputs.append(probs[0].numpy())
            offsets.append(offset)
    return stitch_patches(outputs, offsets, v.shape)


def seg_forward_tensor(params: SegNet, v: Volume) -> torch.Tensor:
    """Direct whole-volume forward, (1, L, *S); the volume must fit the network."""
    dtype = next(params.parameters()).dtype
    with torch.no_grad():
        return params(as_batch(v, dtype=dtype))
