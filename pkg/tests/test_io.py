"""
Tests for on-disk formats: NIfTI volumes, checkpoints, manifests, the
results table, cell markers and atomic writes.
"""

import io
import json
import math
from pathlib import Path

import numpy as np
import pytest
import torch

from core.regnet import build_regnet, reg_forward
from core.trainer import TrainHistory, TrainRecord
from core.volume import LabelMap, Volume
from core.warp import DisplacementField
from ingest.atomic import atomic_path, atomic_write_text
from ingest.cell_store import DONE, SKIPPED, is_changed, load_cell_store, record_cell
from ingest.checkpoint_store import (
    load_regnet, load_segnet, read_checkpoint, read_history, write_checkpoint, write_history,
)
from ingest.manifest import load_atlases, load_dataset, load_unlabeled, read_manifest, write_dataset
from ingest.metrics_csv import append_metrics_csv, read_metrics_csv, rows_to_text, write_metrics_csv
from ingest.nifti_io import read_field, read_labelmap, read_volume, write_field, write_labelmap, write_volume


# ─── NIfTI ────────────────────────────────────────────────

@pytest.mark.parametrize("shape,spacing,dtype", [
    ((6, 5), (0.5, 2.0), np.float32),
    ((4, 5, 3), (1.0, 1.0, 1.5), np.float64),
    ((5, 4, 3), (0.7, 0.3, 1.1), np.float32),
])
def test_volume_round_trip(tmp_path, shape, spacing, dtype):
    v = Volume(np.random.default_rng(0).normal(size=shape).astype(dtype), spacing=spacing)
    write_volume(v, tmp_path / "v.nii.gz")
    back = read_volume(tmp_path / "v.nii.gz")
    assert back.data.dtype == dtype and np.array_equal(back.data, v.data), "Expected a bit-exact round trip"
    assert back.spacing == v.spacing, f"Expected spacing {v.spacing}, got {back.spacing}"


def test_inexact_spacing_round_trips(tmp_path):
    """0.7 mm has no exact float32 form; Volume keeps what the header stores"""
    v = Volume(np.zeros((4, 4), dtype=np.float32), spacing=(0.7, 0.3))
    expected = (float(np.float32(0.7)), float(np.float32(0.3)))
    assert v.spacing == expected, f"Expected {expected}, got {v.spacing}"
    write_volume(v, tmp_path / "v.nii.gz")
    back = read_volume(tmp_path / "v.nii.gz")
    assert back.spacing == v.spacing, f"Expected {v.spacing}, got {back.spacing}"

    labels = LabelMap(np.zeros((4, 4), dtype=np.int16), num_labels=2, spacing=(0.7, 0.3))
    write_labelmap(labels, tmp_path / "m.nii.gz")
    again = read_labelmap(tmp_path / "m.nii.gz")
    assert again.spacing == labels.spacing, f"Expected {labels.spacing}, got {again.spacing}"


def test_labelmap_keeps_label_count(tmp_path):
    m = LabelMap(np.array([[0, 1], [2, 0]], dtype=np.int16), num_labels=5, spacing=(1.0, 2.0))
    write_labelmap(m, tmp_path / "m.nii.gz")
    back = read_labelmap(tmp_path / "m.nii.gz")
    assert back.num_labels == 5, f"Expected 5 labels from the header, got {back.num_labels}"
    assert np.array_equal(back.labels, m.labels), "Expected identical labels"


def test_field_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    for shape in [(6, 7), (4, 5, 6)]:
        f = DisplacementField(rng.normal(size=(len(shape),) + shape).astype(np.float32))
        write_field(f, tmp_path / "f.nii.gz")
        back = read_field(tmp_path / "f.nii.gz")
        assert np.array_equal(back.u, f.u), f"Expected an exact field round trip for {shape}"


def test_nifti_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_volume(tmp_path / "missing.nii.gz")
    (tmp_path / "junk.nii.gz").write_bytes(b"not a nifti file")
    with pytest.raises(ValueError):
        read_volume(tmp_path / "junk.nii.gz")
    write_volume(Volume(np.zeros((4, 4), dtype=np.float32)), tmp_path / "float.nii.gz")
    with pytest.raises(ValueError):
        read_labelmap(tmp_path / "float.nii.gz")


# ─── Checkpoints / histories ──────────────────────────────

def test_checkpoint_round_trip(tmp_path, tiny_regnet_cfg):
    net = build_regnet(tiny_regnet_cfg, seed=4)
    history = TrainHistory(records=[TrainRecord(iteration=0, loss=1.0, components={}, supervised=False)])
    write_checkpoint(tmp_path / "reg.pt", net, history)

    loaded = load_regnet(tmp_path / "reg.pt", expected_cfg=tiny_regnet_cfg)
    rng = np.random.default_rng(0)
    v = Volume(rng.normal(size=tiny_regnet_cfg.inshape).astype(np.float32))
    w = Volume(rng.normal(size=tiny_regnet_cfg.inshape).astype(np.float32))
    assert np.array_equal(reg_forward(net, v, w).u, reg_forward(loaded, v, w).u), "Expected identical predictions"
    assert read_checkpoint(tmp_path / "reg.pt")["history"]["iterations"] == 1, "Expected the history summary"


def test_checkpoint_rejects_wrong_kind_and_version(tmp_path, tiny_regnet_cfg):
    write_checkpoint(tmp_path / "reg.pt", build_regnet(tiny_regnet_cfg))
    with pytest.raises(ValueError):
        load_segnet(tmp_path / "reg.pt")

    payload = read_checkpoint(tmp_path / "reg.pt")
    payload["format_version"] = 99
    buf = io.BytesIO()
    torch.save(payload, buf)
    (tmp_path / "old.pt").write_bytes(buf.getvalue())
    with pytest.raises(ValueError, match="99"):
        read_checkpoint(tmp_path / "old.pt")
    with pytest.raises(FileNotFoundError):
        read_checkpoint(tmp_path / "none.pt")


def test_history_jsonl(tmp_path):
    history = TrainHistory(records=[
        TrainRecord(iteration=i, loss=0.5, components={"image": 0.4}, supervised=False) for i in range(3)
    ])
    write_history(history, tmp_path / "h.jsonl")
    rows = read_history(tmp_path / "h.jsonl")
    assert len(rows) == 3 and rows[0]["type"] == "train", f"Unexpected history rows {rows}"


# ─── Manifests ────────────────────────────────────────────

def test_dataset_round_trip(tmp_path, tiny_dataset):
    path = write_dataset(tiny_dataset, tmp_path, verbose=False)
    back = load_dataset(tmp_path)
    assert back.ids() == tiny_dataset.ids(), "Expected identical split ids"
    assert np.array_equal(back.train[0].image.data, tiny_dataset.train[0].image.data), "Expected identical images"
    assert len(load_unlabeled(path)) == 3, "Expected 3 unlabeled volumes"

    raw = json.loads(path.read_text())
    assert "labels" not in raw["splits"]["unlabeled"][0], "Expected unlabeled entries to hide their labels"
    picked = load_atlases(tmp_path, ids=["train_002"])
    assert [a.id for a in picked] == ["train_002"], f"Expected train_002, got {[a.id for a in picked]}"
    with pytest.raises(KeyError):
        load_atlases(tmp_path, ids=["train_999"])


def test_manifest_errors(tmp_path, tiny_dataset):
    path = write_dataset(tiny_dataset, tmp_path, verbose=False)
    raw = json.loads(path.read_text())

    broken = dict(raw)
    del broken["spacing"]
    path.write_text(json.dumps(broken))
    with pytest.raises(KeyError):
        read_manifest(path)

    path.write_text(json.dumps({**raw, "splits": {**raw["splits"], "extra": []}}))
    with pytest.raises(ValueError):
        read_manifest(path)

    (tmp_path / raw["splits"]["test"][0]["image"]).unlink()
    path.write_text(json.dumps(raw))
    with pytest.raises(FileNotFoundError):
        read_manifest(path)


# ─── Results table ────────────────────────────────────────

def _row(method="MAS", n=1, repeat=0, subject="test_000", label=1, dice=0.5, mean_sd=1.0, max_sd=2.0):
    return dict(method=method, n_atlases=n, repeat=repeat, subject=subject, label=label,
                dice=dice, mean_sd=mean_sd, max_sd=max_sd)


def test_results_table_format(tmp_path):
    text = rows_to_text([_row(mean_sd=math.inf, max_sd=math.inf)])
    assert text.splitlines() == [
        "method,n_atlases,repeat,subject,label,dice,mean_sd,max_sd",
        "MAS,1,0,test_000,1,0.500000,inf,inf",
    ], f"Unexpected table text {text!r}"
    write_metrics_csv(tmp_path / "r.csv", [_row(mean_sd=math.inf)])
    assert math.isinf(read_metrics_csv(tmp_path / "r.csv")[0]["mean_sd"]), "Expected inf to survive a round trip"


def test_append_replaces_matching_keys(tmp_path):
    path = tmp_path / "r.csv"
    append_metrics_csv(path, [_row(dice=0.1), _row(label=2)])
    append_metrics_csv(path, [_row(dice=0.9)])
    rows = read_metrics_csv(path)
    assert len(rows) == 2, f"Expected 2 rows after merge, got {len(rows)}"
    assert [r["dice"] for r in rows if r["label"] == 1] == [0.9], "Expected the later row to win"


def test_wrong_header(tmp_path):
    (tmp_path / "r.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_metrics_csv(tmp_path / "r.csv")


# ─── Cell markers / atomic writes ─────────────────────────

def test_cell_markers(tmp_path):
    done, skipped = tmp_path / "done", tmp_path / "skipped"
    done.mkdir()
    skipped.mkdir()
    assert is_changed(done), "Expected a cell without marker to need work"

    write_metrics_csv(done / "rows.csv", [_row()])
    record_cell(done, "MAS/N1/r0", DONE)
    record_cell(skipped, "MAS-SS/N1/r0", SKIPPED, "too few atlases")
    assert not is_changed(done) and not is_changed(skipped), "Expected both cells complete"

    write_metrics_csv(done / "rows.csv", [_row(dice=0.7)])
    assert is_changed(done), "Expected edited rows to invalidate the marker"
    (skipped / "marker.json").write_text("{not json")
    assert is_changed(skipped), "Expected a corrupt marker to force recomputation"
    assert set(load_cell_store(tmp_path)) == {"MAS/N1/r0"}, "Expected only readable markers"


def test_atomic_write_leaves_nothing_on_failure(tmp_path):
    target = tmp_path / "out.txt"
    with pytest.raises(RuntimeError):
        with atomic_path(target) as tmp:
            Path(tmp).write_text("partial")
            raise RuntimeError("interrupted")
    assert list(tmp_path.iterdir()) == [], f"Expected no files, got {list(tmp_path.iterdir())}"
    atomic_write_text(target, "done\n")
    assert target.read_text() == "done\n", "Expected the final content"
