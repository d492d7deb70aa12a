"""
Tests for the procedural phantom population.
"""

import numpy as np
import pytest

from core.configs import SyntheticPopConfig
from core.synthetic import (
    SMALL_LABEL, SPLITS, base_phantom, check_disjoint, label_fractions, make_subject, synth_population,
)
from core.volume import LabelMap


def test_population_is_deterministic(tiny_pop_cfg, tiny_dataset):
    again = synth_population(tiny_pop_cfg)
    for split in SPLITS:
        for a, b in zip(tiny_dataset.split(split), again.split(split)):
            assert a.id == b.id, f"Expected matching ids, got {a.id} vs {b.id}"
            assert np.array_equal(a.image.data, b.image.data), f"Expected identical image for {a.id}"
            assert np.array_equal(a.labels.labels, b.labels.labels), f"Expected identical labels for {a.id}"


def test_seed_changes_population(tiny_pop_cfg, tiny_dataset):
    other = synth_population(tiny_pop_cfg.model_copy(update={"rng_seed": 1}))
    assert not np.array_equal(other.train[0].image.data, tiny_dataset.train[0].image.data), \
        "Expected a different population for a different seed"


def test_split_sizes_and_ids(tiny_pop_cfg, tiny_dataset):
    ids = tiny_dataset.ids()
    assert [len(ids[s]) for s in SPLITS] == [3, 1, 2, 3], f"Unexpected split sizes {[len(ids[s]) for s in SPLITS]}"
    assert ids["train"][0] == "train_000", f"Expected 'train_000', got {ids['train'][0]}"
    check_disjoint(ids)
    with pytest.raises(ValueError):
        check_disjoint({"train": ["a"], "test": ["a"]})


def test_every_subject_has_every_label(tiny_dataset):
    for split in SPLITS:
        for a in tiny_dataset.split(split):
            present = sorted(np.unique(a.labels.labels).tolist())
            assert present == [0, 1, 2, 3], f"Expected all 4 labels in {a.id}, got {present}"


def test_small_structure_share():
    """At desk scale the small structure is under 2% of the foreground"""
    share = label_fractions(base_phantom(SyntheticPopConfig()).labels)[SMALL_LABEL]
    assert 0 < share < 0.02, f"Expected 0 < share < 0.02, got {share:.4f}"


def test_3d_phantom():
    cfg = SyntheticPopConfig(shape=(24, 24, 24), spacing=(1.0, 1.0, 1.0), small_radius=0.08)
    base = base_phantom(cfg)
    assert base.image.shape == (24, 24, 24), f"Expected (24, 24, 24), got {base.image.shape}"
    assert sorted(np.unique(base.labels.labels).tolist()) == [0, 1, 2, 3], "Expected 4 labels in 3D"


def test_retries_exhausted(monkeypatch, tiny_pop_cfg):
    base = base_phantom(tiny_pop_cfg)
    blank = LabelMap(np.zeros(tiny_pop_cfg.shape, dtype=np.int32), num_labels=4)
    monkeypatch.setattr("core.synthetic.argmax_labels", lambda probs, spacing=None: blank)
    with pytest.raises(RuntimeError, match="vanished"):
        make_subject(base, tiny_pop_cfg, np.random.default_rng(0), "s")


def test_config_validation():
    with pytest.raises(ValueError):
        SyntheticPopConfig(num_labels=5)
    with pytest.raises(ValueError):
        SyntheticPopConfig(shape=(32, 32), spacing=(1.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        SyntheticPopConfig(n_test=0)
