"""
Completion markers for experiment cells.

Each cell directory holds a marker.json written after its rows file:
{
    "key":      "MAS-SS/N2/r0",
    "status":   "done" | "skipped",
    "rows_sha": "a3f5c8...",        # SHA256 of rows.csv (done cells)
    "reason":   "..."               # why the cell was skipped
}
A cell counts as complete when its marker exists and, for done cells,
rows.csv still hashes to rows_sha. Markers live per cell so concurrent
cell processes never write the same file.
"""

import hashlib
import json
from pathlib import Path
from typing import Optional, Union

from config import CELL_ROWS_NAME, MARKER_NAME
from ingest.atomic import atomic_write_text

PathLike = Union[str, Path]
DONE = "done"
SKIPPED = "skipped"


def cell_key(method: str, n_atlases: int, repeat: int) -> str:
    return f"{method}/N{n_atlases}/r{repeat}"


def file_sha(path: PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_marker(cell_dir: PathLike) -> Optional[dict]:
    path = Path(cell_dir) / MARKER_NAME
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError:
        # unreadable marker: recompute the cell
        return None


def record_cell(cell_dir: PathLike, key: str, status: str, reason: Optional[str] = None) -> dict:
    """Write the marker; done cells hash their rows file."""
    cell_dir = Path(cell_dir)
    entry = {"key": key, "status": status}
    if status == DONE:
        entry["rows_sha"] = file_sha(cell_dir / CELL_ROWS_NAME)
    elif status == SKIPPED:
        entry["reason"] = reason or ""
    else:
        raise ValueError(f"unknown cell status '{status}'")
    atomic_write_text(cell_dir / MARKER_NAME, json.dumps(entry, indent=2) + "\n")
    return entry


def is_changed(cell_dir: PathLike) -> bool:
    """True if the cell must be (re)computed."""
    cell_dir = Path(cell_dir)
    entry = read_marker(cell_dir)
    if entry is None:
        return True
    if entry.get("status") == SKIPPED:
        return False
    rows = cell_dir / CELL_ROWS_NAME
    if not rows.exists():
        return True
    return entry.get("rows_sha") != file_sha(rows)


def load_cell_store(run_dir: PathLike) -> dict:
    """All markers under a run directory, keyed by cell key."""
    store = {}
    for marker in sorted(Path(run_dir).rglob(MARKER_NAME)):
        entry = read_marker(marker.parent)
        if entry is not None and "key" in entry:
            store[entry["key"]] = {**entry, "dir": str(marker.parent)}
    return store
