"""
Process-wide settings.

Values come from the environment (optionally a .env file in the working
directory) and fall back to the defaults below. Structured experiment
parameters live in core/configs.py; this module only holds paths and knobs
that are not part of an experiment's identity.
"""

import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    return int(raw) if raw not in (None, "") else default


# ── Paths ───────────────────────────────────────────────────────────
DATA_DIR = Path(os.getenv("DATA_DIR", "data/synthetic"))
RUNS_DIR = Path(os.getenv("RUNS_DIR", "runs"))
MANIFEST_NAME = os.getenv("MANIFEST_NAME", "manifest.json")

# ── Reproducibility / runtime ───────────────────────────────────────
DEFAULT_SEED = _env_int("DEFAULT_SEED", 0)
TORCH_NUM_THREADS = _env_int("TORCH_NUM_THREADS", 1)
LOG_EVERY = _env_int("LOG_EVERY", 100)

# ── On-disk formats ─────────────────────────────────────────────────
CHECKPOINT_FORMAT_VERSION = 1
RESULTS_HEADER = [
    "method", "n_atlases", "repeat", "subject", "label",
    "dice", "mean_sd", "max_sd",
]
MARKER_NAME = "marker.json"
RESULTS_NAME = "results.csv"
CELL_ROWS_NAME = "rows.csv"
HISTORY_NAME = "history.jsonl"
