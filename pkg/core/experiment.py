"""
Comparative experiment grid: methods x N atlases x repeated atlas sets.

Every (method, N, repeat) cell is independent: it owns a directory under
<output_dir>/cells/, seeds itself from (rng_seed, method, N, repeat) and
finishes by writing rows.csv and then marker.json. Finished cells are
skipped on rerun. The final results.csv is rebuilt from the cell rows in
sorted order, so interrupted and uninterrupted runs give the same bytes.

Methods
  MAS          registration without supervision or augmentation
  MAS-DA       registration without supervision, with augmentation
  MAS-SS       10% supervised atlas-to-atlas iterations, with augmentation
  MAS-SS50     as MAS-SS with 50% supervised iterations
  SegNet       patch segmentation network trained on the N atlases
  SegNet-DA    as SegNet with augmentation
  SegNet-Full  SegNet-DA trained on every training subject's labels
               (train split plus the unlabeled pool's hidden labels)
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from config import CELL_ROWS_NAME, HISTORY_NAME, RESULTS_NAME
from core.configs import METHODS, ExperimentConfig
from core.eval_aggregator import aggregate_results
from core.fusion import mas_segment
from core.metrics import evaluate
from core.segnet import seg_forward_full
from core.synthetic import Dataset
from core.trainer import train_registration, train_segmentation
from core.volume import Atlas, LabelMap, argmax_labels
from ingest.atomic import atomic_write_text
from ingest.cell_store import DONE, SKIPPED, cell_key, is_changed, read_marker, record_cell
from ingest.checkpoint_store import write_checkpoint, write_history
from ingest.manifest import load_dataset
from ingest.metrics_csv import read_metrics_csv, report_rows, rows_to_text, sort_rows, write_metrics_csv
from ingest.nifti_io import read_labelmap, write_labelmap

SUMMARY_NAME = "summary.json"
PRED_NAME = "pred.nii.gz"
FULL_METHOD = "SegNet-Full"


@dataclass(frozen=True)
class MethodSpec:
    kind:         str     # "mas" | "segnet"
    p_supervised: float
    augment:      bool


def method_spec(method: str, cfg: ExperimentConfig) -> MethodSpec:
    if method not in METHODS:
        raise ValueError(f"unknown method '{method}'; choose from {METHODS}")
    return {
        "MAS":         MethodSpec("mas", 0.0, False),
        "MAS-DA":      MethodSpec("mas", 0.0, True),
        "MAS-SS":      MethodSpec("mas", cfg.ss_fraction, True),
        "MAS-SS50":    MethodSpec("mas", 0.5, True),
        "SegNet":      MethodSpec("segnet", 0.0, False),
        "SegNet-DA":   MethodSpec("segnet", 0.0, True),
        "SegNet-Full": MethodSpec("segnet", 0.0, True),
    }[method]


def sample_atlas_sets(
    pool_ids: Sequence[str],
    n_atlases: int,
    n_sets: int,
    rng: np.random.Generator,
) -> List[List[str]]:
    """n_sets uniformly drawn subsets of size n_atlases, no repeats within a set."""
    pool_ids = list(pool_ids)
    if n_atlases < 1:
        raise ValueError(f"need at least 1 atlas per set, got {n_atlases}")
    if n_atlases > len(pool_ids):
        raise ValueError(f"cannot draw {n_atlases} atlases from a pool of {len(pool_ids)}")
    return [
        [pool_ids[i] for i in rng.choice(len(pool_ids), size=n_atlases, replace=False)]
        for _ in range(n_sets)
    ]


def cell_seed(cfg: ExperimentConfig, method: str, n_atlases: int, repeat: int) -> int:
    ss = np.random.SeedSequence([cfg.rng_seed, METHODS.index(method), n_atlases, repeat])
    return int(ss.generate_state(1)[0])


def cell_dir(cfg: ExperimentConfig, method: str, n_atlases: int, repeat: int) -> Path:
    return Path(cfg.output_dir) / "cells" / method / f"N{n_atlases}" / f"r{repeat}"


def planned_cells(cfg: ExperimentConfig, dataset: Dataset) -> List[tuple]:
    """(method, N, repeat, atlas ids) for every cell of the grid, in run order."""
    train_ids = [a.id for a in dataset.train]
    sets = {
        n: sample_atlas_sets(train_ids, n, cfg.n_repeats, np.random.default_rng([cfg.rng_seed, n]))
        for n in cfg.n_range
    }
    cells = []
    for method in cfg.methods:
        if method == FULL_METHOD:
            full_ids = train_ids + [a.id for a in dataset.unlabeled]
            cells += [(method, len(full_ids), r, full_ids) for r in range(cfg.n_repeats)]
            continue
        for n in cfg.n_range:
            cells += [(method, n, r, sets[n][r]) for r in range(cfg.n_repeats)]
    return cells


# ─────────────────────────────────────────────────────────
# One cell
# ─────────────────────────────────────────────────────────

def _predict_mas(cfg, spec, seed, atlases, dataset, verbose):
    train_cfg = cfg.registration.model_copy(
        update={"p_supervised": spec.p_supervised, "use_augment": spec.augment, "rng_seed": seed}
    )
    net, history = train_registration(
        train_cfg, atlases, dataset.unlabeled_volumes, dataset.val, model_cfg=cfg.regnet, verbose=verbose,
    )
    fusion_cfg = cfg.fusion.model_copy(
        update={"rng_seed": seed, "n_augmented": cfg.fusion.n_augmented if spec.augment else 0}
    )

    def predict(target: Atlas) -> LabelMap:
        return mas_segment(net, atlases, target.image, fusion_cfg)

    return net, history, predict


def _predict_segnet(cfg, spec, seed, atlases, dataset, verbose):
    train_cfg = cfg.segmentation.model_copy(update={"use_augment": spec.augment, "rng_seed": seed})
    net, history = train_segmentation(
        train_cfg, atlases, dataset.val, use_augment=spec.augment, model_cfg=cfg.segnet, verbose=verbose,
    )

    def predict(target: Atlas) -> LabelMap:
        return argmax_labels(seg_forward_full(net, target.image), spacing=target.image.spacing)

    return net, history, predict


def run_cell(
    cfg: ExperimentConfig,
    dataset: Dataset,
    method: str,
    n_atlases: int,
    repeat: int,
    atlas_ids: Sequence[str],
    verbose: bool = True,
) -> List[dict]:
    """Train, segment the test split, write the cell's files and marker."""
    spec = method_spec(method, cfg)
    key = cell_key(method, n_atlases, repeat)
    out = cell_dir(cfg, method, n_atlases, repeat)
    out.mkdir(parents=True, exist_ok=True)

    if spec.kind == "mas" and spec.p_supervised > 0 and n_atlases < 2:
        reason = f"{method} needs at least 2 atlases for supervised pairs, got N={n_atlases}"
        record_cell(out, key, SKIPPED, reason)
        if verbose:
            print(f"[experiment] {key}: skipped ({reason})")
        return []

    by_id = {a.id: a for a in dataset.train + dataset.unlabeled}
    atlases = [by_id[i] for i in atlas_ids]
    seed = cell_seed(cfg, method, n_atlases, repeat)
    if verbose:
        print(f"[experiment] {key}: training on {len(atlases)} atlases (seed {seed})")

    runner = _predict_mas if spec.kind == "mas" else _predict_segnet
    net, history, predict = runner(cfg, spec, seed, atlases, dataset, verbose)

    rows: List[dict] = []
    labels = range(1, dataset.num_labels)
    for k, subject in enumerate(dataset.test):
        pred = predict(subject)
        if k == 0:
            write_labelmap(pred, out / PRED_NAME)
        report = evaluate(pred, subject.labels, spacing=subject.labels.spacing, included_labels=labels)
        rows += report_rows(report, method, n_atlases, repeat, subject.id)

    write_checkpoint(out / "model.pt", net, history)
    write_history(history, out / HISTORY_NAME)
    atomic_write_text(out / CELL_ROWS_NAME, rows_to_text(sort_rows(rows)))
    record_cell(out, key, DONE)
    if verbose:
        mean = float(np.mean([r["dice"] for r in rows])) if rows else float("nan")
        print(f"[experiment] {key}: done, mean foreground dice={mean:.4f}")
    return rows


# ─────────────────────────────────────────────────────────
# Grid
# ─────────────────────────────────────────────────────────

def _check_dataset(cfg: ExperimentConfig, dataset: Dataset) -> None:
    if not dataset.train or not dataset.test:
        raise ValueError("dataset needs non-empty train and test splits")
    shape = dataset.train[0].image.shape
    if tuple(shape) != tuple(cfg.data.shape):
        raise ValueError(f"dataset images are {shape}, config expects {tuple(cfg.data.shape)}")
    if dataset.num_labels != cfg.data.num_labels:
        raise ValueError(f"dataset has {dataset.num_labels} labels, config expects {cfg.data.num_labels}")
    if max(cfg.n_range) > len(dataset.train):
        raise ValueError(f"n_range reaches {max(cfg.n_range)} but the dataset has {len(dataset.train)} atlases")
    needs_unlabeled = any(method_spec(m, cfg).kind == "mas" for m in cfg.methods)
    if needs_unlabeled and not dataset.unlabeled:
        raise ValueError("registration methods need an unlabeled pool")


def collect_rows(cfg: ExperimentConfig, dataset: Dataset) -> List[dict]:
    rows: List[dict] = []
    for method, n, r, _ in planned_cells(cfg, dataset):
        d = cell_dir(cfg, method, n, r)
        marker = read_marker(d)
        if marker is not None and marker.get("status") == DONE:
            rows += read_metrics_csv(d / CELL_ROWS_NAME)
    return sort_rows(rows)


def run_experiment(
    cfg: ExperimentConfig,
    dataset: Optional[Dataset] = None,
    verbose: bool = True,
) -> List[dict]:
    """Run (or resume) the grid and return the rows of the final results table."""
    unknown = [m for m in cfg.methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown method(s) {unknown}; choose from {METHODS}")
    if dataset is None:
        dataset = load_dataset(cfg.data_dir)
    _check_dataset(cfg, dataset)

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "config.json", cfg.model_dump_json(indent=2, by_alias=True) + "\n")

    cells = planned_cells(cfg, dataset)
    counts: Dict[str, int] = {"run": 0, "resumed": 0, "skipped": 0}
    for method, n, r, ids in cells:
        d = cell_dir(cfg, method, n, r)
        if not is_changed(d):
            counts["resumed"] += 1
            if verbose:
                print(f"[experiment] {cell_key(method, n, r)}: already complete")
            continue
        rows = run_cell(cfg, dataset, method, n, r, ids, verbose=verbose)
        counts["run" if rows else "skipped"] += 1

    rows = collect_rows(cfg, dataset)
    write_metrics_csv(out / RESULTS_NAME, rows)
    atomic_write_text(out / SUMMARY_NAME, json.dumps(aggregate_results(rows), indent=2, sort_keys=True) + "\n")
    if verbose:
        print(
            f"[experiment] {len(cells)} cells: {counts['run']} run, {counts['resumed']} resumed, "
            f"{counts['skipped']} skipped; {len(rows)} rows -> {out / RESULTS_NAME}"
        )
    return rows


def gallery_predictions(cfg: ExperimentConfig, dataset: Dataset, repeat: int = 0) -> Dict[str, LabelMap]:
    """Stored first-test-subject prediction per method at the largest N."""
    preds: Dict[str, LabelMap] = {}
    n_max = max(cfg.n_range)
    full_n = len(dataset.train) + len(dataset.unlabeled)
    for method in cfg.methods:
        n = full_n if method == FULL_METHOD else n_max
        path = cell_dir(cfg, method, n, repeat) / PRED_NAME
        if path.exists():
            preds[method] = read_labelmap(path, num_labels=dataset.num_labels)
    return preds
