"""
NIfTI-1 reader/writer for volumes, label maps and displacement fields.

Conventions
  * 2D grids are stored as (X, Y, 1) and restored to 2D on read.
  * Spacing lives in the header voxel sizes (pixdim, float32 on disk).
  * Label maps carry their label count in the header description as
    "num_labels=L".
  * Displacement fields are 5D (X, Y, Z, 1, D) with the vector intent;
    component d displaces along axis d in voxels.
"""

from pathlib import Path
from typing import Optional, Sequence, Union

import nibabel as nib
import numpy as np

from core.volume import LabelMap, Volume
from core.warp import DisplacementField
from ingest.atomic import atomic_path

PathLike = Union[str, Path]
NUM_LABELS_TAG = "num_labels="


def _affine(spacing: Sequence[float]) -> np.ndarray:
    diag = list(spacing) + [1.0] * (3 - len(spacing)) + [1.0]
    return np.diag(np.asarray(diag, dtype=np.float64))


def _load(path: PathLike):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"NIfTI file not found: {path}")
    try:
        img = nib.load(str(path))
        if not isinstance(img, nib.Nifti1Image):
            raise ValueError(f"not a NIfTI-1 image ({type(img).__name__})")
        data = np.asanyarray(img.dataobj)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise ValueError(f"cannot read NIfTI file {path}: {e}") from e
    if not (np.issubdtype(data.dtype, np.integer) or np.issubdtype(data.dtype, np.floating)):
        raise ValueError(f"unsupported NIfTI datatype {data.dtype} in {path}")
    return img, np.asarray(data)


def _spatial(data: np.ndarray, path: PathLike) -> np.ndarray:
    if data.ndim == 3 and data.shape[2] == 1:
        return data[:, :, 0]
    if data.ndim in (2, 3):
        return data
    raise ValueError(f"expected a 2D or 3D grid in {path}, got shape {data.shape}")


def _spacing(img, ndim: int) -> tuple:
    return tuple(float(z) for z in img.header.get_zooms()[:ndim])


def _save(img, path: PathLike) -> None:
    with atomic_path(path) as tmp:
        nib.save(img, str(tmp))


def _as_stored(arr: np.ndarray) -> np.ndarray:
    return arr[..., None] if arr.ndim == 2 else arr


# ── Volumes ─────────────────────────────────────────────────────────
def read_volume(path: PathLike) -> Volume:
    img, data = _load(path)
    data = _spatial(data, path)
    if not np.issubdtype(data.dtype, np.floating):
        data = data.astype(np.float32)
    return Volume(data, spacing=_spacing(img, data.ndim))


def write_volume(v: Volume, path: PathLike) -> None:
    img = nib.Nifti1Image(_as_stored(np.array(v.data)), _affine(v.spacing))
    img.header.set_data_dtype(v.data.dtype)
    _save(img, path)


# ── Label maps ──────────────────────────────────────────────────────
def read_labelmap(path: PathLike, num_labels: Optional[int] = None) -> LabelMap:
    img, data = _load(path)
    data = _spatial(data, path)
    if not np.issubdtype(data.dtype, np.integer):
        raise ValueError(f"label map {path} has non-integer datatype {data.dtype}")
    if num_labels is None:
        descrip = img.header["descrip"].item().decode("ascii", "ignore").strip()
        if descrip.startswith(NUM_LABELS_TAG):
            num_labels = int(descrip[len(NUM_LABELS_TAG):])
        else:
            num_labels = int(data.max()) + 1 if data.size else 1
    return LabelMap(data, num_labels=num_labels, spacing=_spacing(img, data.ndim))


def write_labelmap(m: LabelMap, path: PathLike) -> None:
    img = nib.Nifti1Image(_as_stored(np.array(m.labels)), _affine(m.spacing))
    img.header.set_data_dtype(m.labels.dtype)
    img.header.set_intent("label")
    img.header["descrip"] = f"{NUM_LABELS_TAG}{m.num_labels}".encode("ascii")
    _save(img, path)


# ── Displacement fields ─────────────────────────────────────────────
def read_field(path: PathLike) -> DisplacementField:
    img, data = _load(path)
    if data.ndim != 5 or data.shape[3] != 1:
        raise ValueError(f"displacement field {path} must be stored as (X, Y, Z, 1, D), got {data.shape}")
    vectors = data[:, :, :, 0, :]
    ndim = vectors.shape[-1]
    if ndim == 2:
        if vectors.shape[2] != 1:
            raise ValueError(f"2-component field {path} needs Z = 1, got shape {data.shape}")
        vectors = vectors[:, :, 0, :]
    elif ndim != 3:
        raise ValueError(f"displacement field {path} has {ndim} components, expected 2 or 3")
    if not np.issubdtype(vectors.dtype, np.floating):
        vectors = vectors.astype(np.float32)
    return DisplacementField(np.moveaxis(vectors, -1, 0))


def write_field(f: DisplacementField, path: PathLike, spacing: Optional[Sequence[float]] = None) -> None:
    vectors = np.moveaxis(np.array(f.u), 0, -1)          # (*S, D)
    if f.ndim == 2:
        vectors = vectors[:, :, None, :]                 # (X, Y, 1, D)
    vectors = vectors[:, :, :, None, :]                  # (X, Y, Z, 1, D)
    img = nib.Nifti1Image(vectors, _affine(spacing or (1.0,) * f.ndim))
    img.header.set_data_dtype(f.u.dtype)
    img.header.set_intent("vector")
    _save(img, path)
