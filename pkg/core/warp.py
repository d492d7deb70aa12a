"""
Differentiable spatial transformation with linear interpolation.

A deformation is stored as a displacement field u in voxel units,
phi(p) = p + u(p), component d displacing along array axis d. Sample
coordinates falling outside the grid are clamped to the edge.
"""

import itertools
from dataclasses import dataclass
from typing import Union

import numpy as np
import torch

from core.volume import ProbMap, Volume, as_batch

RENORM_EPS = 1e-7


@dataclass(frozen=True)
class DisplacementField:
    u: np.ndarray   # (D, *spatial)

    def __post_init__(self):
        u = np.asarray(self.u)
        if not np.issubdtype(u.dtype, np.floating):
            u = u.astype(np.float32)
        if u.ndim < 2 or u.shape[0] != u.ndim - 1:
            raise ValueError(f"displacement field must be shaped (D, *spatial) with D = spatial rank, got {u.shape}")
        if not np.all(np.isfinite(u)):
            raise ValueError("displacement field contains non-finite values")
        u = np.array(u, copy=True)
        u.flags.writeable = False
        object.__setattr__(self, "u", u)

    @property
    def shape(self) -> tuple:
        return self.u.shape[1:]

    @property
    def ndim(self) -> int:
        return self.u.shape[0]


def identity_field(shape, dtype=np.float32) -> DisplacementField:
    shape = tuple(int(n) for n in shape)
    return DisplacementField(np.zeros((len(shape),) + shape, dtype=dtype))


# ── Tensor kernels ──────────────────────────────────────────────────
def _check_same_grid(src: torch.Tensor, flow: torch.Tensor) -> None:
    spatial = tuple(src.shape[2:])
    if tuple(flow.shape[2:]) != spatial or flow.shape[1] != len(spatial):
        raise ValueError(
            f"shape mismatch: source spatial shape {spatial} vs field shape {tuple(flow.shape[1:])}"
        )
    if flow.shape[0] != src.shape[0]:
        raise ValueError(f"batch mismatch: {src.shape[0]} sources vs {flow.shape[0]} fields")


def warp_tensor(src: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """
    out(p) = src(p + flow(p)) by multilinear interpolation.

    src:  (B, C, *S)
    flow: (B, D, *S), D = len(S)

    Written with explicit corner gathers instead of grid_sample so that
    integer sample positions reproduce the source exactly.
    """
    _check_same_grid(src, flow)
    batch, channels = src.shape[:2]
    spatial = tuple(src.shape[2:])
    ndim = len(spatial)

    axes = torch.meshgrid(
        *[torch.arange(n, dtype=flow.dtype, device=flow.device) for n in spatial],
        indexing="ij",
    )

    lows, highs, fracs = [], [], []
    for d, n in enumerate(spatial):
        coord = (axes[d] + flow[:, d]).clamp(0, n - 1)
        low = coord.detach().floor().clamp(0, max(n - 2, 0))
        fracs.append(coord - low)
        low = low.long()
        lows.append(low)
        highs.append((low + 1).clamp(max=n - 1))

    flat = src.reshape(batch, channels, -1)
    out = None
    for corner in itertools.product((0, 1), repeat=ndim):
        index = None
        weight = None
        for d, n in enumerate(spatial):
            idx = highs[d] if corner[d] else lows[d]
            w = fracs[d] if corner[d] else 1 - fracs[d]
            index = idx if index is None else index * n + idx
            weight = w if weight is None else weight * w
        index = index.reshape(batch, 1, -1).expand(batch, channels, -1)
        sample = flat.gather(2, index).reshape(src.shape)
        term = weight.unsqueeze(1) * sample
        out = term if out is None else out + term
    return out


def renormalize(probs: torch.Tensor) -> torch.Tensor:
    """Rescale channels (dim 1) to sum to one; RENORM_EPS guards empty voxels."""
    return probs / probs.sum(dim=1, keepdim=True).clamp_min(RENORM_EPS)


def warp_probs_tensor(probs: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    return renormalize(warp_tensor(probs, flow))


def compose_tensor(flow1: torch.Tensor, flow2: torch.Tensor) -> torch.Tensor:
    """Displacement of phi1 ∘ phi2: u2(p) + u1(p + u2(p))."""
    if flow1.shape != flow2.shape:
        raise ValueError(f"shape mismatch: {tuple(flow1.shape)} vs {tuple(flow2.shape)}")
    return flow2 + warp_tensor(flow1, flow2)


# ── Domain-level operations ─────────────────────────────────────────
def _field_tensor(f: Union[DisplacementField, torch.Tensor], dtype) -> torch.Tensor:
    return as_batch(f, dtype=dtype)


def warp_scalar(v: Volume, f: DisplacementField) -> Volume:
    if v.shape != f.shape:
        raise ValueError(f"shape mismatch: volume {v.shape} vs field {f.shape}")
    src = as_batch(v)
    with torch.no_grad():
        out = warp_tensor(src, _field_tensor(f, src.dtype))
    return Volume(out[0, 0].numpy(), spacing=v.spacing)


def warp_probmap(s: ProbMap, f: DisplacementField) -> ProbMap:
    if s.shape != f.shape:
        raise ValueError(f"shape mismatch: probability map {s.shape} vs field {f.shape}")
    src = as_batch(s)
    with torch.no_grad():
        out = warp_probs_tensor(src, _field_tensor(f, src.dtype))
    return ProbMap(out[0].numpy())


def compose_fields(f1: DisplacementField, f2: DisplacementField) -> DisplacementField:
    if f1.shape != f2.shape:
        raise ValueError(f"shape mismatch: {f1.shape} vs {f2.shape}")
    t1 = as_batch(f1)
    with torch.no_grad():
        out = compose_tensor(t1, as_batch(f2, dtype=t1.dtype))
    return DisplacementField(out[0].numpy())
