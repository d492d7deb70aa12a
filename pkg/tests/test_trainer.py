"""
Tests for the training loops, the supervision schedule and the gradient checker.
"""

import numpy as np
import pytest
import torch
import torch.nn as nn

from core.configs import RegNetConfig, SegNetConfig, TrainConfig
from core.losses import semisup_terms
from core.regnet import build_regnet
from core.trainer import (
    TrainHistory, TrainRecord, gradcheck, random_patch_window, supervision_schedule,
    train_registration, train_segmentation,
)
from core.volume import as_batch, make_one_hot


def test_supervision_schedule_exact_count():
    mask = supervision_schedule(1000, 0.1, seed=0)
    assert int(mask.sum()) == 100, f"Expected exactly 100 supervised iterations, got {int(mask.sum())}"
    assert not supervision_schedule(50, 0.0, seed=0).any(), "Expected no supervised iterations at p=0"
    assert supervision_schedule(50, 1.0, seed=0).all(), "Expected every iteration supervised at p=1"
    assert np.array_equal(supervision_schedule(200, 0.3, 4), supervision_schedule(200, 0.3, 4)), \
        "Expected a reproducible schedule"


def test_train_registration_history(tiny_dataset, tiny_regnet_cfg, tiny_train_cfg):
    net, history = train_registration(
        tiny_train_cfg, tiny_dataset.train[:2], tiny_dataset.unlabeled_volumes, tiny_dataset.val,
        model_cfg=tiny_regnet_cfg, verbose=False,
    )
    assert len(history.records) == 4, f"Expected 4 records, got {len(history.records)}"
    assert [v.iteration for v in history.validation] == [2, 4], \
        f"Expected checkpoints at 2 and 4, got {[v.iteration for v in history.validation]}"
    assert history.best_iteration in (2, 4), f"Expected a best checkpoint, got {history.best_iteration}"
    assert not net.training, "Expected the returned network in eval mode"
    assert all(np.isfinite(history.losses)), "Expected finite losses"


def test_train_registration_is_reproducible(tiny_dataset, tiny_regnet_cfg, tiny_train_cfg):
    runs = [
        train_registration(
            tiny_train_cfg, tiny_dataset.train[:2], tiny_dataset.unlabeled_volumes,
            model_cfg=tiny_regnet_cfg, verbose=False,
        )[1].losses
        for _ in range(2)
    ]
    assert np.array_equal(runs[0], runs[1]), f"Expected identical loss curves, got {runs[0]} vs {runs[1]}"


def test_semi_supervised_iterations(tiny_dataset, tiny_regnet_cfg, tiny_train_cfg):
    cfg = tiny_train_cfg.model_copy(update={"p_supervised": 0.5})
    _, history = train_registration(
        cfg, tiny_dataset.train[:2], tiny_dataset.unlabeled_volumes, model_cfg=tiny_regnet_cfg, verbose=False,
    )
    supervised = [r for r in history.records if r.supervised]
    assert len(supervised) == 2, f"Expected 2 supervised iterations, got {len(supervised)}"
    assert all("seg" in r.components for r in supervised), "Expected a seg term on supervised iterations"
    assert history.supervised_fraction == 0.5, f"Expected 0.5, got {history.supervised_fraction}"


def test_supervision_needs_two_atlases(tiny_dataset, tiny_regnet_cfg, tiny_train_cfg):
    cfg = tiny_train_cfg.model_copy(update={"p_supervised": 0.1})
    with pytest.raises(ValueError):
        train_registration(
            cfg, tiny_dataset.train[:1], tiny_dataset.unlabeled_volumes, model_cfg=tiny_regnet_cfg, verbose=False,
        )


def test_non_finite_loss_raises(monkeypatch, tiny_dataset, tiny_regnet_cfg, tiny_train_cfg):
    def broken(*args, **kwargs):
        nan = torch.tensor(float("nan"), requires_grad=True)
        return {"image": nan, "smooth": nan, "total": nan}

    monkeypatch.setattr("core.trainer.unsup_terms", broken)
    with pytest.raises(RuntimeError, match="iteration 0"):
        train_registration(
            tiny_train_cfg, tiny_dataset.train[:1], tiny_dataset.unlabeled_volumes,
            model_cfg=tiny_regnet_cfg, verbose=False,
        )


def test_train_segmentation(tiny_dataset, tiny_segnet_cfg, tiny_train_cfg):
    net, history = train_segmentation(
        tiny_train_cfg, tiny_dataset.train[:2], tiny_dataset.val, use_augment=True,
        model_cfg=tiny_segnet_cfg, verbose=False,
    )
    assert len(history.records) == 4, f"Expected 4 records, got {len(history.records)}"
    assert all(set(r.components) == {"ce"} for r in history.records), "Expected cross-entropy components"
    assert history.best_dice is not None, "Expected a validation score"
    assert not net.training, "Expected the returned network in eval mode"


def test_train_segmentation_label_mismatch(tiny_dataset, tiny_train_cfg):
    with pytest.raises(ValueError):
        train_segmentation(
            tiny_train_cfg, tiny_dataset.train[:1], model_cfg=SegNetConfig(num_labels=3, patch_size=(16, 16)),
            verbose=False,
        )


def test_random_patch_window_bounds():
    rng = np.random.default_rng(0)
    for _ in range(50):
        win = random_patch_window((20, 30), (16, 16), rng)
        assert all(0 <= s.start and s.stop <= n for s, n in zip(win, (20, 30))), f"Expected in-bounds, got {win}"
    with pytest.raises(ValueError):
        random_patch_window((8, 8), (16, 16), rng)


def test_history_summary():
    history = TrainHistory(records=[
        TrainRecord(iteration=i, loss=float(10 - i), components={}, supervised=i % 2 == 0) for i in range(10)
    ])
    summary = history.summary()
    assert summary["iterations"] == 10 and summary["final_loss"] == 1.0, f"Unexpected summary {summary}"
    assert history.supervised_fraction == 0.5, f"Expected 0.5, got {history.supervised_fraction}"
    assert len(history.smoothed_losses(4)) == 7, f"Expected 7 smoothed values, got {len(history.smoothed_losses(4))}"
    assert len(history.to_dicts()) == 10, "Expected one row per record"


# ─── Gradient checker ─────────────────────────────────────

def test_gradcheck_quadratic():
    g = torch.Generator().manual_seed(0)
    a = torch.randn(10, generator=g, dtype=torch.float64)
    p = torch.randn(10, generator=g, dtype=torch.float64).requires_grad_(True)
    report = gradcheck(lambda: 0.5 * (p * p).sum() + (a * p).sum(), [p], sample_fraction=1.0, eps=1e-4)
    assert report.n_checked == 10, f"Expected 10 entries, got {report.n_checked}"
    assert report.max_rel_error < 1e-8, f"Expected rel. error < 1e-8, got {report.max_rel_error:.2e}"


def test_gradcheck_restores_parameters():
    p = torch.arange(6, dtype=torch.float64).requires_grad_(True)
    before = p.detach().clone()
    gradcheck(lambda: (p ** 3).sum(), [p], sample_fraction=1.0)
    assert torch.equal(p.detach(), before), "Expected parameters restored exactly"


def test_semisup_gradient_wrt_parameters(tiny_dataset):
    """Semi-supervised objective gradient on a sampled 1% of weights, 16x16"""
    cfg = RegNetConfig(inshape=(16, 16), enc_filters=[4, 8], dec_filters=[8, 8, 4], levels=2)
    net = build_regnet(cfg, seed=0).double()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(0)
        nn.init.normal_(net.flow.weight, std=0.1)

    fixed_atlas, moving_atlas = tiny_dataset.train[0], tiny_dataset.train[1]
    crop = (slice(8, 24), slice(8, 24))
    fixed = as_batch(fixed_atlas.image.data[crop], dtype=torch.float64)[None]
    moving = as_batch(moving_atlas.image.data[crop], dtype=torch.float64)[None]
    fixed_probs = as_batch(make_one_hot(fixed_atlas.labels.labels[crop], 4).probs, dtype=torch.float64)
    moving_probs = as_batch(make_one_hot(moving_atlas.labels.labels[crop], 4).probs, dtype=torch.float64)
    loss_cfg = TrainConfig().loss

    report = gradcheck(
        lambda: semisup_terms(fixed, moving, fixed_probs, moving_probs, net(moving, fixed), loss_cfg)["total"],
        list(net.parameters()), sample_fraction=0.01, abs_floor=1e-6,
    )
    assert report.max_rel_error < 1e-3, f"Expected rel. error < 1e-3, got {report.max_rel_error:.2e}"
