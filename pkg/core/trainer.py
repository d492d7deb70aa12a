"""
Training loops for the registration network (unsupervised / semi-supervised)
and the segmentation baseline, plus a finite-difference gradient checker.

Every iteration draws from its own generator, default_rng([rng_seed, it]),
so a run is reproducible from the seed alone and samples for a later
iteration never depend on how earlier ones were consumed.
"""

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from config import TORCH_NUM_THREADS
from core.augment import augment_batch
from core.configs import RegNetConfig, SegNetConfig, TrainConfig
from core.losses import cross_entropy_loss, semisup_terms, unsup_terms
from core.metrics import mean_foreground_dice
from core.regnet import RegNet, build_regnet
from core.segnet import SegNet, build_segnet, seg_forward_full
from core.volume import Atlas, Volume, argmax_labels, as_batch, label_tensor, one_hot_tensor
from core.warp import warp_probs_tensor


# ─────────────────────────────────────────────────────────
# History
# ─────────────────────────────────────────────────────────

@dataclass
class TrainRecord:
    iteration:  int
    loss:       float
    components: Dict[str, float]
    supervised: bool


@dataclass
class ValidationRecord:
    iteration: int
    dice:      float


@dataclass
class TrainHistory:
    records:        List[TrainRecord] = field(default_factory=list)
    validation:     List[ValidationRecord] = field(default_factory=list)
    best_iteration: Optional[int] = None
    best_dice:      Optional[float] = None

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records], dtype=np.float64)

    @property
    def supervised_fraction(self) -> float:
        if not self.records:
            return 0.0
        return sum(r.supervised for r in self.records) / len(self.records)

    def smoothed_losses(self, window: int = 50) -> np.ndarray:
        losses = self.losses
        if len(losses) == 0:
            return losses
        window = max(1, min(window, len(losses)))
        kernel = np.ones(window) / window
        return np.convolve(losses, kernel, mode="valid")

    def to_dicts(self) -> List[dict]:
        rows = [{"type": "train", **asdict(r)} for r in self.records]
        rows += [{"type": "validation", **asdict(v)} for v in self.validation]
        return rows

    def summary(self) -> dict:
        return {
            "iterations": len(self.records),
            "final_loss": float(self.records[-1].loss) if self.records else None,
            "supervised_fraction": self.supervised_fraction,
            "best_iteration": self.best_iteration,
            "best_dice": self.best_dice,
        }


def supervision_schedule(iterations: int, p_supervised: float, seed: int) -> np.ndarray:
    """
    Boolean mask of supervised iterations: exactly round(p * iterations)
    positions chosen uniformly at random.
    """
    n_sup = int(round(p_supervised * iterations))
    mask = np.zeros(iterations, dtype=bool)
    if n_sup:
        rng = np.random.default_rng([seed, iterations])
        mask[rng.choice(iterations, size=n_sup, replace=False)] = True
    return mask


def _iteration_rng(seed: int, it: int) -> np.random.Generator:
    return np.random.default_rng([seed, it])


def _is_checkpoint(it: int, cfg: TrainConfig) -> bool:
    return (it + 1) % cfg.checkpoint_every == 0 or it + 1 == cfg.iterations


def _check_finite(loss: torch.Tensor, terms: Dict[str, torch.Tensor], it: int, supervised: bool) -> None:
    if not torch.isfinite(loss):
        parts = ", ".join(f"{k}={float(v):.6g}" for k, v in terms.items())
        raise RuntimeError(
            f"non-finite loss at iteration {it} (supervised={supervised}): {parts}"
        )


def _update_best(history: TrainHistory, net: torch.nn.Module, it: int, score: float, best_state):
    history.validation.append(ValidationRecord(iteration=it + 1, dice=float(score)))
    # strict '>' keeps the earliest checkpoint on ties
    if history.best_dice is None or score > history.best_dice:
        history.best_dice = float(score)
        history.best_iteration = it + 1
        return copy.deepcopy(net.state_dict())
    return best_state


# ─────────────────────────────────────────────────────────
# Registration
# ─────────────────────────────────────────────────────────

def registration_validation_dice(net: RegNet, atlases: Sequence[Atlas], validation: Sequence[Atlas]) -> float:
    """Mean foreground Dice of atlas labels warped onto each validation image."""
    dtype = next(net.parameters()).dtype
    scores = []
    with torch.no_grad():
        for target in validation:
            fixed = as_batch(target.image, dtype=dtype)
            for atlas in atlases:
                flow = net(as_batch(atlas.image, dtype=dtype), fixed)
                probs = one_hot_tensor(label_tensor(atlas.labels), atlas.num_labels, dtype=dtype)
                warped = warp_probs_tensor(probs, flow)
                pred = argmax_labels(warped[0].numpy(), spacing=target.labels.spacing)
                scores.append(mean_foreground_dice(pred, target.labels))
    return float(np.mean(scores)) if scores else 0.0


def _check_registration_inputs(cfg: TrainConfig, atlases, unlabeled, supervised_mask) -> None:
    if not atlases:
        raise ValueError("registration training needs at least 1 atlas")
    if cfg.p_supervised > 0 and len(atlases) < 2:
        raise ValueError(
            f"p_supervised={cfg.p_supervised} needs at least 2 atlases for atlas-to-atlas pairs, got {len(atlases)}"
        )
    if not supervised_mask.all() and not unlabeled:
        raise ValueError("registration training needs at least 1 unlabeled image")
    shapes = {a.image.shape for a in atlases} | {v.shape for v in unlabeled}
    if len(shapes) != 1:
        raise ValueError(f"all training images must share one shape, got {sorted(shapes)}")
    counts = {a.num_labels for a in atlases}
    if len(counts) != 1:
        raise ValueError(f"atlases disagree on the label count: {sorted(counts)}")


def train_registration(
    cfg: TrainConfig,
    atlases: Sequence[Atlas],
    unlabeled: Sequence[Volume],
    validation: Sequence[Atlas] = (),
    model_cfg: Optional[RegNetConfig] = None,
    verbose: bool = True,
) -> Tuple[RegNet, TrainHistory]:
    """
    Each iteration registers a (possibly augmented) random atlas to either an
    unlabeled image (image + smoothness objective) or, on supervised
    iterations, to a second augmented atlas (adds the soft Dice term).
    Returns the network restored to its best validation checkpoint.
    """
    torch.set_num_threads(TORCH_NUM_THREADS)
    supervised_mask = supervision_schedule(cfg.iterations, cfg.p_supervised, cfg.rng_seed)
    _check_registration_inputs(cfg, atlases, unlabeled, supervised_mask)

    model_cfg = model_cfg or RegNetConfig(inshape=atlases[0].image.shape)
    if tuple(model_cfg.inshape) != atlases[0].image.shape:
        raise ValueError(f"network inshape {model_cfg.inshape} does not match image shape {atlases[0].image.shape}")
    net = build_regnet(model_cfg, seed=cfg.rng_seed)
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999))

    num_labels = atlases[0].num_labels
    dtype = next(net.parameters()).dtype
    atlas_images = [as_batch(a.image, dtype=dtype) for a in atlases]
    atlas_labels = [label_tensor(a.labels) for a in atlases]
    unlabeled_images = [as_batch(v, dtype=dtype) for v in unlabeled]

    def draw_atlas(idx: int, rng: np.random.Generator):
        image, labels = atlas_images[idx], atlas_labels[idx]
        if cfg.use_augment:
            image, labels = augment_batch(image, labels, num_labels, cfg.augment, rng)
        return image, one_hot_tensor(labels, num_labels, dtype=image.dtype)

    history = TrainHistory()
    best_state = None
    if verbose:
        print(
            f"[train] registration: {len(atlases)} atlases, {len(unlabeled)} unlabeled, "
            f"{cfg.iterations} iterations, p_supervised={cfg.p_supervised}, augment={cfg.use_augment}"
        )

    for it in range(cfg.iterations):
        rng = _iteration_rng(cfg.rng_seed, it)
        supervised = bool(supervised_mask[it])
        i = int(rng.integers(len(atlases)))
        moving, moving_probs = draw_atlas(i, rng)

        if supervised:
            j = int(rng.integers(len(atlases) - 1))
            j = j + 1 if j >= i else j
            fixed, fixed_probs = draw_atlas(j, rng)
            flow = net(moving, fixed)
            terms = semisup_terms(fixed, moving, fixed_probs, moving_probs, flow, cfg.loss)
        else:
            fixed = unlabeled_images[int(rng.integers(len(unlabeled_images)))]
            flow = net(moving, fixed)
            terms = unsup_terms(fixed, moving, flow, cfg.loss)

        loss = terms["total"]
        _check_finite(loss, terms, it, supervised)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        history.records.append(TrainRecord(
            iteration=it,
            loss=float(loss.item()),
            components={k: float(v.item()) for k, v in terms.items() if k != "total"},
            supervised=supervised,
        ))
        if verbose and ((it + 1) % cfg.log_every == 0 or it == 0):
            parts = " ".join(f"{k}={v:.4f}" for k, v in history.records[-1].components.items())
            print(f"[train] it {it + 1}/{cfg.iterations} loss={loss.item():.4f} {parts}")

        if validation and _is_checkpoint(it, cfg):
            net.eval()
            score = registration_validation_dice(net, atlases, validation)
            net.train()
            best_state = _update_best(history, net, it, score, best_state)
            if verbose:
                print(f"[train] checkpoint it {it + 1}: validation dice={score:.4f} (best {history.best_dice:.4f})")

    if best_state is not None:
        net.load_state_dict(best_state)
    net.eval()
    return net, history


# ─────────────────────────────────────────────────────────
# Segmentation baseline
# ─────────────────────────────────────────────────────────

def segmentation_validation_dice(net: SegNet, validation: Sequence[Atlas]) -> float:
    scores = []
    for target in validation:
        probs = seg_forward_full(net, target.image)
        pred = argmax_labels(probs, spacing=target.labels.spacing)
        scores.append(mean_foreground_dice(pred, target.labels))
    return float(np.mean(scores)) if scores else 0.0


def random_patch_window(shape: Sequence[int], patch_size: Sequence[int], rng: np.random.Generator) -> tuple:
    if any(p > n for p, n in zip(patch_size, shape)):
        raise ValueError(f"patch_size {tuple(patch_size)} is larger than the image shape {tuple(shape)}")
    starts = [int(rng.integers(0, n - p + 1)) for n, p in zip(shape, patch_size)]
    return tuple(slice(s, s + p) for s, p in zip(starts, patch_size))


def train_segmentation(
    cfg: TrainConfig,
    atlases: Sequence[Atlas],
    validation: Sequence[Atlas] = (),
    use_augment: bool = False,
    model_cfg: Optional[SegNetConfig] = None,
    verbose: bool = True,
) -> Tuple[SegNet, TrainHistory]:
    """Patch-wise cross-entropy training; SegNet-DA when use_augment is set."""
    torch.set_num_threads(TORCH_NUM_THREADS)
    if not atlases:
        raise ValueError("segmentation training needs at least 1 atlas")
    num_labels = atlases[0].num_labels
    model_cfg = model_cfg or SegNetConfig(num_labels=num_labels)
    if model_cfg.num_labels != num_labels:
        raise ValueError(f"network has {model_cfg.num_labels} output labels, atlases have {num_labels}")

    net = build_segnet(model_cfg, seed=cfg.rng_seed)
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999))
    dtype = next(net.parameters()).dtype
    images = [as_batch(a.image, dtype=dtype) for a in atlases]
    labels = [label_tensor(a.labels) for a in atlases]

    history = TrainHistory()
    best_state = None
    if verbose:
        print(
            f"[train] segmentation: {len(atlases)} atlases, {cfg.iterations} iterations, "
            f"augment={use_augment}, patch={tuple(model_cfg.patch_size)}"
        )

    for it in range(cfg.iterations):
        rng = _iteration_rng(cfg.rng_seed, it)
        k = int(rng.integers(len(atlases)))
        image, lab = images[k], labels[k]
        if use_augment:
            image, lab = augment_batch(image, lab, num_labels, cfg.augment, rng)

        win = random_patch_window(image.shape[2:], model_cfg.patch_size, rng)
        patch = image[(slice(None), slice(None)) + win]
        target = one_hot_tensor(lab[(slice(None),) + win], num_labels, dtype=patch.dtype)

        pred = net(patch)
        loss = cross_entropy_loss(pred, target, cfg.loss.ce_eps)
        _check_finite(loss, {"ce": loss}, it, True)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        history.records.append(TrainRecord(
            iteration=it, loss=float(loss.item()), components={"ce": float(loss.item())}, supervised=True,
        ))
        if verbose and ((it + 1) % cfg.log_every == 0 or it == 0):
            print(f"[train] it {it + 1}/{cfg.iterations} ce={loss.item():.4f}")

        if validation and _is_checkpoint(it, cfg):
            net.eval()
            score = segmentation_validation_dice(net, validation)
            net.train()
            best_state = _update_best(history, net, it, score, best_state)
            if verbose:
                print(f"[train] checkpoint it {it + 1}: validation dice={score:.4f} (best {history.best_dice:.4f})")

    if best_state is not None:
        net.load_state_dict(best_state)
    net.eval()
    return net, history


# ─────────────────────────────────────────────────────────
# Finite-difference gradient check
# ─────────────────────────────────────────────────────────

@dataclass
class GradcheckReport:
    max_rel_error: float
    n_checked:     int
    worst:         Optional[Tuple[int, int]] = None   # (parameter index, flat element index)
    analytic:      List[float] = field(default_factory=list)
    numeric:       List[float] = field(default_factory=list)


def gradcheck(
    loss_evaluator: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    sample_fraction: float = 0.01,
    eps: float = 1e-6,
    seed: int = 0,
    abs_floor: float = 1e-8,
) -> GradcheckReport:
    """
    Compare autograd gradients of `loss_evaluator()` against central
    differences on a random subset of parameter entries.

    Relative error per entry: |a - n| / max(|a|, |n|, abs_floor).
    Parameters are perturbed in place and restored exactly.
    """
    params = list(params)
    if not params:
        raise ValueError("gradcheck needs at least one parameter tensor")
    if not 0 < sample_fraction <= 1:
        raise ValueError(f"sample_fraction must lie in (0, 1], got {sample_fraction}")

    loss = loss_evaluator()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    n_pick = max(1, int(math.ceil(sample_fraction * total)))
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(total, size=min(n_pick, total), replace=False))
    bounds = np.cumsum([0] + sizes)

    report = GradcheckReport(max_rel_error=0.0, n_checked=0)
    for flat in picks:
        pi = int(np.searchsorted(bounds, flat, side="right") - 1)
        ei = int(flat - bounds[pi])
        view = params[pi].data.view(-1)
        original = view[ei].item()
        with torch.no_grad():
            view[ei] = original + eps
            f_plus = float(loss_evaluator())
            view[ei] = original - eps
            f_minus = float(loss_evaluator())
            view[ei] = original
        numeric = (f_plus - f_minus) / (2 * eps)
        analytic = float(grads[pi].reshape(-1)[ei])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), abs_floor)
        report.analytic.append(analytic)
        report.numeric.append(numeric)
        report.n_checked += 1
        if err > report.max_rel_error:
            report.max_rel_error = err
            report.worst = (pi, ei)
    return report
