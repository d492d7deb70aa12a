"""
Tests for the experiment grid: atlas sampling, seeding, resumability and
the results table.
"""

import json
from pathlib import Path

import numpy as np
import pytest

from config import CELL_ROWS_NAME, MARKER_NAME, RESULTS_HEADER, RESULTS_NAME
from core.experiment import (
    SUMMARY_NAME, cell_dir, cell_seed, gallery_predictions, method_spec, planned_cells, run_experiment,
    sample_atlas_sets,
)
from ingest.metrics_csv import read_metrics_csv


def test_atlas_sets_are_uniform():
    """Per-id inclusion frequency over 10,000 draws of 2 from 18 is 2/18"""
    pool = [f"train_{i:03d}" for i in range(18)]
    sets = sample_atlas_sets(pool, 2, 10_000, np.random.default_rng(0))
    counts = {i: 0 for i in pool}
    for s in sets:
        assert len(set(s)) == 2, f"Expected distinct atlases within a set, got {s}"
        for i in s:
            counts[i] += 1
    for i, c in counts.items():
        assert abs(c / 10_000 - 2 / 18) < 0.01, f"Expected frequency 2/18 for {i}, got {c / 10_000:.4f}"


def test_atlas_set_errors():
    with pytest.raises(ValueError):
        sample_atlas_sets(["a", "b"], 3, 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_atlas_sets(["a", "b"], 0, 1, np.random.default_rng(0))


def test_cell_seeds(tiny_experiment_cfg):
    cfg = tiny_experiment_cfg()
    seeds = {cell_seed(cfg, m, n, r) for m in ("MAS", "SegNet") for n in (1, 2) for r in (0, 1)}
    assert len(seeds) == 8, f"Expected 8 distinct cell seeds, got {len(seeds)}"
    assert cell_seed(cfg, "MAS", 1, 0) == cell_seed(cfg, "MAS", 1, 0), "Expected stable seeds"


def test_method_specs(tiny_experiment_cfg):
    cfg = tiny_experiment_cfg(ss_fraction=0.1)
    assert method_spec("MAS-SS", cfg).p_supervised == 0.1, "Expected MAS-SS at ss_fraction"
    assert method_spec("MAS-SS50", cfg).p_supervised == 0.5, "Expected MAS-SS50 at 0.5"
    assert not method_spec("MAS", cfg).augment, "Expected plain MAS without augmentation"
    with pytest.raises(ValueError):
        method_spec("Nope", cfg)


def test_planned_cells(tiny_experiment_cfg, tiny_dataset):
    cfg = tiny_experiment_cfg(methods=["MAS", "SegNet", "SegNet-Full"], n_range=[1, 2], n_repeats=2)
    cells = planned_cells(cfg, tiny_dataset)
    assert len(cells) == 10, f"Expected 2*2 + 2*2 + 2 cells, got {len(cells)}"
    full = [c for c in cells if c[0] == "SegNet-Full"]
    assert all(c[1] == 6 and len(c[3]) == 6 for c in full), "Expected SegNet-Full on train + unlabeled"
    mas = {(c[1], c[2]): c[3] for c in cells if c[0] == "MAS"}
    seg = {(c[1], c[2]): c[3] for c in cells if c[0] == "SegNet"}
    assert mas == seg, "Expected every method to share the atlas sets of a given (N, repeat)"


def test_minimal_grid(tiny_experiment_cfg, tiny_dataset):
    """One method, N = 1, one repeat: one training run, rows for every test subject"""
    cfg = tiny_experiment_cfg()
    rows = run_experiment(cfg, tiny_dataset, verbose=False)
    out = Path(cfg.output_dir)

    assert len(rows) == 2 * 3, f"Expected 2 subjects x 3 labels, got {len(rows)}"
    assert {r["subject"] for r in rows} == {"test_000", "test_001"}, "Expected every test subject"
    table = (out / RESULTS_NAME).read_text().splitlines()
    assert table[0] == ",".join(RESULTS_HEADER), f"Unexpected header {table[0]}"
    assert (out / SUMMARY_NAME).exists() and (out / "config.json").exists(), "Expected summary and config"

    d = cell_dir(cfg, "MAS", 1, 0)
    for name in (MARKER_NAME, CELL_ROWS_NAME, "model.pt", "pred.nii.gz"):
        assert (d / name).exists(), f"Expected {name} in the cell directory"


def test_rerun_is_resumed_and_byte_identical(monkeypatch, tiny_experiment_cfg, tiny_dataset):
    cfg = tiny_experiment_cfg(methods=["MAS", "SegNet"])
    run_experiment(cfg, tiny_dataset, verbose=False)
    first = (Path(cfg.output_dir) / RESULTS_NAME).read_bytes()

    def must_not_run(*args, **kwargs):
        raise AssertionError("a completed cell was recomputed")

    monkeypatch.setattr("core.experiment.run_cell", must_not_run)
    run_experiment(cfg, tiny_dataset, verbose=False)
    assert (Path(cfg.output_dir) / RESULTS_NAME).read_bytes() == first, "Expected byte-identical results"


def test_interrupted_cell_is_recomputed(tiny_experiment_cfg, tiny_dataset):
    cfg = tiny_experiment_cfg(methods=["MAS", "SegNet"])
    run_experiment(cfg, tiny_dataset, verbose=False)
    first = (Path(cfg.output_dir) / RESULTS_NAME).read_bytes()

    # a cell killed before its marker was written
    (cell_dir(cfg, "SegNet", 1, 0) / MARKER_NAME).unlink()
    run_experiment(cfg, tiny_dataset, verbose=False)
    marker = json.loads((cell_dir(cfg, "SegNet", 1, 0) / MARKER_NAME).read_text())
    assert marker["status"] == "done", f"Expected the cell completed again, got {marker}"
    assert (Path(cfg.output_dir) / RESULTS_NAME).read_bytes() == first, "Expected byte-identical results"


def test_supervised_methods_skip_single_atlas(tiny_experiment_cfg, tiny_dataset):
    cfg = tiny_experiment_cfg(methods=["MAS-SS"], n_range=[1, 2])
    rows = run_experiment(cfg, tiny_dataset, verbose=False)
    assert {r["n_atlases"] for r in rows} == {2}, f"Expected rows for N=2 only, got {sorted({r['n_atlases'] for r in rows})}"
    marker = json.loads((cell_dir(cfg, "MAS-SS", 1, 0) / MARKER_NAME).read_text())
    assert marker["status"] == "skipped" and "2 atlases" in marker["reason"], f"Unexpected marker {marker}"


def test_dataset_must_match_config(tiny_experiment_cfg, tiny_dataset):
    cfg = tiny_experiment_cfg()
    bad = cfg.model_copy(update={"data": cfg.data.model_copy(update={"shape": (64, 64)})})
    with pytest.raises(ValueError):
        run_experiment(bad, tiny_dataset, verbose=False)


def test_results_file_matches_rows(tiny_experiment_cfg, tiny_dataset):
    cfg = tiny_experiment_cfg(methods=["SegNet-DA"])
    rows = run_experiment(cfg, tiny_dataset, verbose=False)
    assert read_metrics_csv(Path(cfg.output_dir) / RESULTS_NAME) == rows, "Expected the table to hold the rows"
    preds = gallery_predictions(cfg, tiny_dataset)
    assert list(preds) == ["SegNet-DA"], f"Expected one gallery prediction, got {list(preds)}"
