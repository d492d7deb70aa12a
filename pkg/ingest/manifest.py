"""
Dataset manifests: a JSON file listing every subject per split.

{
  "root": ".",                      # relative to the manifest's directory
  "num_labels": 4,
  "spacing": [1.0, 1.0],
  "splits": {
    "train":     [{"id": "train_000", "image": "train/train_000_img.nii.gz",
                   "labels": "train/train_000_seg.nii.gz"}, ...],
    "unlabeled": [{"id": "unlabeled_000", "image": "...",
                   "hidden_labels": "..."}, ...]
  }
}

`hidden_labels` holds ground truth that training must not see except for
the fully supervised reference model.
"""

import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from pydantic import BaseModel, ValidationError

from config import MANIFEST_NAME
from core.synthetic import SPLITS, Dataset, check_disjoint
from core.volume import Atlas, Volume
from ingest.atomic import atomic_write_text
from ingest.nifti_io import read_labelmap, read_volume, write_labelmap, write_volume

PathLike = Union[str, Path]
LABELED_SPLITS = ("train", "val", "test")


# ─── Schema ───────────────────────────────────────────────

class ManifestEntry(BaseModel):
    id: str
    image: str
    labels: Optional[str] = None
    hidden_labels: Optional[str] = None


class DatasetManifest(BaseModel):
    root: str = "."
    num_labels: int
    spacing: List[float]
    splits: Dict[str, List[ManifestEntry]]

    def entries(self, split: str) -> List[ManifestEntry]:
        return self.splits.get(split, [])


# ─── Read / write ─────────────────────────────────────────

def _root(manifest: DatasetManifest, manifest_path: Path) -> Path:
    root = Path(manifest.root)
    return root if root.is_absolute() else manifest_path.parent / root


def _check_files(manifest: DatasetManifest, root: Path) -> None:
    for split, entries in manifest.splits.items():
        for e in entries:
            for rel in (e.image, e.labels, e.hidden_labels):
                if rel is not None and not (root / rel).exists():
                    raise FileNotFoundError(f"manifest entry '{e.id}' ({split}) references missing file {root / rel}")


def read_manifest(path: PathLike) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"invalid JSON in manifest {path}: {e.msg} (line {e.lineno})")
    for key in ("num_labels", "spacing", "splits"):
        if key not in raw:
            raise KeyError(f"manifest {path} is missing required field '{key}'")
    try:
        manifest = DatasetManifest.model_validate(raw)
    except ValidationError as e:
        raise ValueError(f"manifest {path} is malformed: {e}") from e
    unknown = set(manifest.splits) - set(SPLITS)
    if unknown:
        raise ValueError(f"manifest {path} has unknown split(s) {sorted(unknown)}")
    check_disjoint({s: [e.id for e in es] for s, es in manifest.splits.items()})
    _check_files(manifest, _root(manifest, path))
    return manifest


def write_manifest(manifest: DatasetManifest, path: PathLike) -> None:
    atomic_write_text(path, json.dumps(manifest.model_dump(exclude_none=True), indent=2) + "\n")


# ─── Dataset <-> disk ─────────────────────────────────────

def write_dataset(ds: Dataset, out_dir: PathLike, verbose: bool = True) -> Path:
    out_dir = Path(out_dir)
    splits: Dict[str, List[ManifestEntry]] = {}
    for split in SPLITS:
        entries = []
        for a in ds.split(split):
            image = f"{split}/{a.id}_img.nii.gz"
            seg = f"{split}/{a.id}_seg.nii.gz"
            write_volume(a.image, out_dir / image)
            write_labelmap(a.labels, out_dir / seg)
            if split in LABELED_SPLITS:
                entries.append(ManifestEntry(id=a.id, image=image, labels=seg))
            else:
                entries.append(ManifestEntry(id=a.id, image=image, hidden_labels=seg))
        splits[split] = entries
    manifest = DatasetManifest(
        root=".", num_labels=ds.num_labels, spacing=list(ds.spacing), splits=splits,
    )
    path = out_dir / MANIFEST_NAME
    write_manifest(manifest, path)
    if verbose:
        counts = ", ".join(f"{s}={len(e)}" for s, e in splits.items())
        print(f"[synth] wrote {counts} to {out_dir}")
    return path


def _atlas(entry: ManifestEntry, root: Path, num_labels: int, labels_field: str) -> Atlas:
    rel = getattr(entry, labels_field)
    if rel is None:
        raise KeyError(f"manifest entry '{entry.id}' has no '{labels_field}' path")
    return Atlas(
        image=read_volume(root / entry.image),
        labels=read_labelmap(root / rel, num_labels=num_labels),
        id=entry.id,
    )


def load_atlases(path: PathLike, split: str = "train", ids: Optional[Sequence[str]] = None) -> List[Atlas]:
    path = Path(path)
    manifest = read_manifest(path)
    root = _root(manifest, path if path.is_file() else path / MANIFEST_NAME)
    entries = manifest.entries(split)
    if ids is not None:
        by_id = {e.id: e for e in entries}
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise KeyError(f"ids {missing} not found in split '{split}' of {path}")
        entries = [by_id[i] for i in ids]
    return [_atlas(e, root, manifest.num_labels, "labels") for e in entries]


def load_dataset(path: PathLike) -> Dataset:
    path = Path(path)
    manifest_path = path if path.is_file() else path / MANIFEST_NAME
    manifest = read_manifest(manifest_path)
    root = _root(manifest, manifest_path)
    splits = {}
    for split in SPLITS:
        field = "labels" if split in LABELED_SPLITS else "hidden_labels"
        splits[split] = [_atlas(e, root, manifest.num_labels, field) for e in manifest.entries(split)]
    return Dataset(num_labels=manifest.num_labels, spacing=tuple(manifest.spacing), **splits)


def load_unlabeled(path: PathLike) -> List[Volume]:
    path = Path(path)
    manifest_path = path if path.is_file() else path / MANIFEST_NAME
    manifest = read_manifest(manifest_path)
    root = _root(manifest, manifest_path)
    return [read_volume(root / e.image) for e in manifest.entries("unlabeled")]

