"""
Differentiable objectives.

  ncc_loss                   windowed squared normalized cross correlation, negated
  smoothness_loss            mean squared forward difference of the displacement
  soft_dice_loss             negated mean soft Dice over all channels
  registration_loss_unsup    image term + lam * smoothness
  registration_loss_semisup  unsup + gamma * soft Dice of warped moving labels
  cross_entropy_loss         categorical cross entropy for the segmentation baseline

Every function accepts batched tensors (B, C, *S); domain objects
(Volume, ProbMap, DisplacementField, Atlas) are converted with as_batch.
"""

from typing import Dict, Optional

import torch
import torch.nn.functional as F

from core.configs import LossConfig
from core.volume import Atlas, as_batch, make_one_hot
from core.warp import warp_probs_tensor, warp_tensor

_CONV = {1: F.conv1d, 2: F.conv2d, 3: F.conv3d}


def _pair(a, b):
    ta = as_batch(a)
    if not ta.is_floating_point():
        ta = ta.float()
    tb = as_batch(b, dtype=ta.dtype)
    return ta, tb


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


# ── Image similarity ────────────────────────────────────────────────
def _local_sum(x: torch.Tensor, window: int) -> torch.Tensor:
    ndim = x.dim() - 2
    half = window // 2
    # replicate padding keeps a*v+b affine inside every border window
    padded = F.pad(x, (half, half) * ndim, mode="replicate") if half else x
    kernel = torch.ones((1, 1) + (window,) * ndim, dtype=x.dtype, device=x.device)
    return _CONV[ndim](padded, kernel)


def ncc_loss(fixed, moved, cfg: Optional[LossConfig] = None) -> torch.Tensor:
    cfg = cfg or LossConfig()
    I, J = _pair(fixed, moved)
    _check_same(I, J, "ncc_loss")
    if I.shape[1] != 1:
        raise ValueError(f"ncc_loss expects single-channel images, got {I.shape[1]} channels")
    spatial = I.shape[2:]
    if any(cfg.ncc_window > n for n in spatial):
        raise ValueError(f"NCC window {cfg.ncc_window} is larger than image shape {tuple(spatial)}")

    win = float(cfg.ncc_window ** len(spatial))
    I_sum = _local_sum(I, cfg.ncc_window)
    J_sum = _local_sum(J, cfg.ncc_window)
    I2_sum = _local_sum(I * I, cfg.ncc_window)
    J2_sum = _local_sum(J * J, cfg.ncc_window)
    IJ_sum = _local_sum(I * J, cfg.ncc_window)

    u_I = I_sum / win
    u_J = J_sum / win
    cross = IJ_sum - u_J * I_sum - u_I * J_sum + u_I * u_J * win
    I_var = (I2_sum - 2 * u_I * I_sum + u_I * u_I * win).clamp_min(0)
    J_var = (J2_sum - 2 * u_J * J_sum + u_J * u_J * win).clamp_min(0)

    # squared correlation is at most 1; roundoff can push it just over
    cc = (cross * cross / (I_var * J_var + cfg.ncc_eps)).clamp(max=1.0)
    return -torch.mean(cc)


# ── Regularization ──────────────────────────────────────────────────
def smoothness_loss(field) -> torch.Tensor:
    """Diffusion regularizer, averaged over axes, components and voxels."""
    u = as_batch(field)
    if not u.is_floating_point():
        u = u.float()
    terms = []
    for axis in range(2, u.dim()):
        if u.shape[axis] < 2:
            continue
        diff = u.narrow(axis, 1, u.shape[axis] - 1) - u.narrow(axis, 0, u.shape[axis] - 1)
        terms.append(torch.mean(diff * diff))
    if not terms:
        return u.sum() * 0
    return torch.stack(terms).mean()


# ── Label overlap ───────────────────────────────────────────────────
def soft_dice_loss(a, b, eps: float = 1e-5) -> torch.Tensor:
    A, B = _pair(a, b)
    _check_same(A, B, "soft_dice_loss")
    dims = tuple(range(2, A.dim()))
    inter = (A * B).sum(dim=dims)
    card = A.sum(dim=dims) + B.sum(dim=dims)
    dice = 2 * inter / (card + eps)
    return -dice.mean()


def cross_entropy_loss(pred, target, eps: float = 1e-7) -> torch.Tensor:
    """
    Mean over voxels of -sum_l target_l * log(p_l), with p the eps-smoothed
    prediction (pred + eps) / (1 + L*eps). The smoothed p is still a
    distribution, so the loss stays >= 0.
    """
    P, T = _pair(pred, target)
    _check_same(P, T, "cross_entropy_loss")
    num_labels = P.shape[1]
    smoothed = (P + eps) / (1 + num_labels * eps)
    per_voxel = -(T * torch.log(smoothed)).sum(dim=1)
    return per_voxel.mean()


# ── Composite registration objectives ───────────────────────────────
def unsup_terms(fixed, moving, field, cfg: LossConfig) -> Dict[str, torch.Tensor]:
    F_, M = _pair(fixed, moving)
    flow = as_batch(field, dtype=F_.dtype)
    moved = warp_tensor(M, flow)
    image = ncc_loss(F_, moved, cfg)
    smooth = smoothness_loss(flow)
    return {"image": image, "smooth": smooth, "total": image + cfg.lam * smooth}


def semisup_terms(
    fixed, moving, fixed_probs, moving_probs, field, cfg: LossConfig,
) -> Dict[str, torch.Tensor]:
    terms = unsup_terms(fixed, moving, field, cfg)
    dtype = terms["total"].dtype
    flow = as_batch(field, dtype=dtype)
    Sf = as_batch(fixed_probs, dtype=dtype)
    Sm = as_batch(moving_probs, dtype=dtype)
    _check_same(Sf, Sm, "semisup_terms")
    warped = warp_probs_tensor(Sm, flow)
    seg = soft_dice_loss(Sf, warped, cfg.dice_eps)
    terms["seg"] = seg
    terms["total"] = terms["total"] + cfg.gamma * seg
    return terms


def registration_loss_unsup(fixed, moving, field, cfg: Optional[LossConfig] = None) -> torch.Tensor:
    return unsup_terms(fixed, moving, field, cfg or LossConfig())["total"]


def registration_loss_semisup(
    fixed_atlas: Atlas, moving_atlas: Atlas, field, cfg: Optional[LossConfig] = None,
) -> torch.Tensor:
    if fixed_atlas.num_labels != moving_atlas.num_labels:
        raise ValueError(
            f"label count mismatch: fixed {fixed_atlas.num_labels} vs moving {moving_atlas.num_labels}"
        )
    return semisup_terms(
        fixed_atlas.image, moving_atlas.image,
        make_one_hot(fixed_atlas.labels), make_one_hot(moving_atlas.labels),
        field, cfg or LossConfig(),
    )["total"]
