"""
Pydantic models for every structured configuration.

Config files are JSON objects; `load_config` reads one, applies dotted
`key=value` overrides and validates. Two presets are available: `desk`
(2D 64x64, minutes of CPU) and `full` (3D, the published scale).
"""

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from config import DEFAULT_SEED, LOG_EVERY, RUNS_DIR, DATA_DIR


# ─────────────────────────────────────────────────────────
# Losses / augmentation
# ─────────────────────────────────────────────────────────

class LossConfig(BaseModel):
    model_config = ConfigDict(populate_by_name=True, frozen=True)

    ncc_window: int = 9
    ncc_eps:    float = 1e-5
    lam:        float = Field(1.5, alias="lambda")
    gamma:      float = 1.0
    dice_eps:   float = 1e-5
    ce_eps:     float = 1e-7

    @field_validator("ncc_window")
    @classmethod
    def _odd_window(cls, v: int) -> int:
        if v < 1 or v % 2 == 0:
            raise ValueError(f"ncc_window must be odd and >= 1, got {v}")
        return v

    @field_validator("ncc_eps", "dice_eps", "ce_eps")
    @classmethod
    def _positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError(f"epsilon must be > 0, got {v}")
        return v

    @field_validator("lam", "gamma")
    @classmethod
    def _non_negative(cls, v: float) -> float:
        if v < 0:
            raise ValueError(f"loss weights must be >= 0, got {v}")
        return v


class AugmentConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    control_spacing: int = 16
    max_amplitude:   float = 4.0
    rng_seed:        int = DEFAULT_SEED

    @field_validator("control_spacing")
    @classmethod
    def _spacing(cls, v: int) -> int:
        if v < 2:
            raise ValueError(f"control_spacing must be >= 2, got {v}")
        return v

    @field_validator("max_amplitude")
    @classmethod
    def _amplitude(cls, v: float) -> float:
        if v < 0:
            raise ValueError(f"max_amplitude must be >= 0, got {v}")
        return v


# ─────────────────────────────────────────────────────────
# Networks
# ─────────────────────────────────────────────────────────

class RegNetConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    inshape:     Tuple[int, ...] = (64, 64)
    enc_filters: List[int] = [16, 32, 32, 32]
    dec_filters: List[int] = [32, 32, 32, 32, 16, 16]
    levels:      int = 4
    leaky_slope: float = 0.2

    @model_validator(mode="after")
    def _check_structure(self):
        _check_unet(self.inshape, self.enc_filters, self.dec_filters, self.levels, "inshape")
        return self


class SegNetConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    num_labels:   int = 4
    enc_filters:  List[int] = [16, 32, 32, 32]
    dec_filters:  List[int] = [32, 32, 32, 32, 16, 16]
    levels:       int = 4
    leaky_slope:  float = 0.2
    patch_size:   Tuple[int, ...] = (32, 32)
    patch_stride: Optional[Tuple[int, ...]] = None   # None -> patch_size // 2

    @model_validator(mode="after")
    def _check_structure(self):
        _check_unet(self.patch_size, self.enc_filters, self.dec_filters, self.levels, "patch_size")
        if self.num_labels < 2:
            raise ValueError(f"num_labels must be >= 2, got {self.num_labels}")
        stride = self.stride
        if len(stride) != len(self.patch_size):
            raise ValueError(f"patch_stride {stride} and patch_size {self.patch_size} differ in rank")
        if any(s <= 0 or s > p for s, p in zip(stride, self.patch_size)):
            raise ValueError(f"patch_stride must satisfy 0 < stride <= patch_size, got {stride}")
        return self

    @property
    def stride(self) -> Tuple[int, ...]:
        if self.patch_stride is None:
            return tuple(max(p // 2, 1) for p in self.patch_size)
        return tuple(self.patch_stride)


def _check_unet(shape: Sequence[int], enc: List[int], dec: List[int], levels: int, what: str) -> None:
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    if len(shape) not in (2, 3):
        raise ValueError(f"{what} must be 2D or 3D, got {tuple(shape)}")
    if len(enc) != levels:
        raise ValueError(f"enc_filters needs one entry per level ({levels}), got {len(enc)}")
    if len(dec) < levels:
        raise ValueError(f"dec_filters needs at least {levels} entries, got {len(dec)}")
    if any(f < 1 for f in list(enc) + list(dec)):
        raise ValueError("all filter counts must be >= 1")
    factor = 2 ** levels
    if any(n % factor for n in shape):
        raise ValueError(f"every extent of {what} {tuple(shape)} must be divisible by 2^levels = {factor}")


# ─────────────────────────────────────────────────────────
# Training / fusion
# ─────────────────────────────────────────────────────────

class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    iterations:       int = 2000
    learning_rate:    float = 1e-4
    p_supervised:     float = 0.0
    use_augment:      bool = True
    loss:             LossConfig = LossConfig()
    augment:          AugmentConfig = AugmentConfig()
    checkpoint_every: int = 250
    log_every:        int = LOG_EVERY
    rng_seed:         int = DEFAULT_SEED

    @field_validator("iterations", "checkpoint_every", "log_every")
    @classmethod
    def _at_least_one(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"must be >= 1, got {v}")
        return v

    @field_validator("learning_rate")
    @classmethod
    def _lr(cls, v: float) -> float:
        if v <= 0:
            raise ValueError(f"learning_rate must be > 0, got {v}")
        return v

    @field_validator("p_supervised")
    @classmethod
    def _fraction(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"p_supervised must lie in [0, 1], got {v}")
        return v


class FusionConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_augmented: int = 0
    augment:     AugmentConfig = AugmentConfig()
    rng_seed:    int = DEFAULT_SEED

    @field_validator("n_augmented")
    @classmethod
    def _count(cls, v: int) -> int:
        if v < 0:
            raise ValueError(f"n_augmented must be >= 0, got {v}")
        return v


# ─────────────────────────────────────────────────────────
# Synthetic data / experiment grid
# ─────────────────────────────────────────────────────────

class SyntheticPopConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    shape:           Tuple[int, ...] = (64, 64)
    num_labels:      int = 4
    n_train:         int = 18
    n_val:           int = 10
    n_test:          int = 10
    n_unlabeled:     int = 40
    outer_radius:    float = 0.40   # fraction of the grid extent
    ring_width:      float = 0.10
    small_radius:    float = 0.05
    deform_amplitude: float = 5.0
    deform_spacing:  int = 16
    noise_std:       float = 0.03
    spacing:         Tuple[float, ...] = (1.0, 1.0)
    max_retries:     int = 10
    rng_seed:        int = DEFAULT_SEED

    @model_validator(mode="after")
    def _check(self):
        if len(self.shape) not in (2, 3):
            raise ValueError(f"shape must be 2D or 3D, got {self.shape}")
        if len(self.spacing) != len(self.shape):
            raise ValueError(f"spacing {self.spacing} does not match shape {self.shape}")
        if self.num_labels != 4:
            raise ValueError("the procedural phantom defines exactly 4 labels")
        for name in ("n_train", "n_val", "n_test", "n_unlabeled", "max_retries"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.deform_amplitude < 0 or self.noise_std < 0:
            raise ValueError("deform_amplitude and noise_std must be >= 0")
        if self.deform_spacing < 2:
            raise ValueError("deform_spacing must be >= 2")
        return self


METHODS = ["MAS", "MAS-DA", "MAS-SS", "MAS-SS50", "SegNet", "SegNet-DA", "SegNet-Full"]


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_range:      List[int] = [1, 2, 3, 4, 5, 6, 7]
    n_repeats:    int = 3
    methods:      List[str] = ["MAS", "MAS-DA", "MAS-SS", "SegNet", "SegNet-DA"]
    ss_fraction:  float = 0.1
    registration: TrainConfig = TrainConfig(p_supervised=0.0)
    segmentation: TrainConfig = TrainConfig()
    regnet:       RegNetConfig = RegNetConfig()
    segnet:       SegNetConfig = SegNetConfig()
    fusion:       FusionConfig = FusionConfig()
    data:         SyntheticPopConfig = SyntheticPopConfig()
    data_dir:     str = str(DATA_DIR)
    output_dir:   str = str(RUNS_DIR / "experiment")
    rng_seed:     int = DEFAULT_SEED

    @model_validator(mode="after")
    def _check(self):
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown method(s) {unknown}; choose from {METHODS}")
        if self.n_repeats < 1:
            raise ValueError(f"n_repeats must be >= 1, got {self.n_repeats}")
        if not self.n_range or min(self.n_range) < 1:
            raise ValueError(f"n_range must be non-empty with entries >= 1, got {self.n_range}")
        if max(self.n_range) > self.data.n_train:
            raise ValueError(
                f"n_range reaches {max(self.n_range)} but the atlas pool has {self.data.n_train} images"
            )
        if not 0.0 <= self.ss_fraction <= 1.0:
            raise ValueError(f"ss_fraction must lie in [0, 1], got {self.ss_fraction}")
        if tuple(self.regnet.inshape) != tuple(self.data.shape):
            raise ValueError(f"regnet.inshape {self.regnet.inshape} must equal data.shape {self.data.shape}")
        if self.segnet.num_labels != self.data.num_labels:
            raise ValueError(
                f"segnet.num_labels {self.segnet.num_labels} must equal data.num_labels {self.data.num_labels}"
            )
        if len(self.segnet.patch_size) != len(self.data.shape) or any(
            p > n for p, n in zip(self.segnet.patch_size, self.data.shape)
        ):
            raise ValueError(f"segnet.patch_size {self.segnet.patch_size} does not fit data.shape {self.data.shape}")
        return self


# ─────────────────────────────────────────────────────────
# Presets and file loading
# ─────────────────────────────────────────────────────────

PRESETS: Dict[str, Dict[str, Any]] = {
    # 2D desk scale; the short schedule uses a larger step than the 3D default
    "desk": {
        "n_range": [1, 2, 3, 4, 5],
        "n_repeats": 3,
        "registration": {
            "iterations": 2000, "learning_rate": 1e-3, "checkpoint_every": 250,
            "augment": {"control_spacing": 16, "max_amplitude": 3.0},
        },
        "segmentation": {
            "iterations": 2000, "learning_rate": 1e-3, "checkpoint_every": 250,
            "augment": {"control_spacing": 16, "max_amplitude": 3.0},
        },
        "regnet": {"inshape": [64, 64]},
        "segnet": {"patch_size": [32, 32], "levels": 4},
        "fusion": {"augment": {"control_spacing": 16, "max_amplitude": 3.0}},
        "data": {"shape": [64, 64], "spacing": [1.0, 1.0]},
    },
    "full": {
        "n_range": [1, 2, 3, 4, 5, 6, 7],
        "registration": {"iterations": 100000, "learning_rate": 1e-4, "checkpoint_every": 5000},
        "segmentation": {"iterations": 100000, "learning_rate": 1e-4, "checkpoint_every": 5000},
        "regnet": {"inshape": [160, 192, 224]},
        "segnet": {"patch_size": [64, 64, 64], "levels": 4},
        "data": {
            "shape": [160, 192, 224], "spacing": [1.0, 1.0, 1.0],
            "deform_amplitude": 8.0, "deform_spacing": 32,
        },
    },
}


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    """Apply `a.b.c=value` overrides; values are parsed as JSON when possible."""
    out = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override '{item}' is not of the form key=value")
        key, value = item.split("=", 1)
        node = out
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValueError(f"override '{item}' descends into a non-mapping")
        node[parts[-1]] = _parse_value(value.strip())
    return out


def _apply_seed(raw: dict, seed: int) -> dict:
    """Set every rng_seed in the tree, offset per section so streams differ."""
    out = copy.deepcopy(raw)
    out["rng_seed"] = seed
    for offset, section in enumerate(("registration", "segmentation", "fusion", "data"), start=1):
        node = out.setdefault(section, {})
        node["rng_seed"] = seed + offset
        if section in ("registration", "segmentation", "fusion"):
            node.setdefault("augment", {})["rng_seed"] = seed + 10 * offset
    return out


def load_raw_config(
    path: Optional[str] = None,
    preset: Optional[str] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
) -> dict:
    raw: dict = {}
    if preset:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset '{preset}'; choose from {sorted(PRESETS)}")
        raw = copy.deepcopy(PRESETS[preset])
    if path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            raw = _deep_merge(raw, json.loads(p.read_text()))
        except json.JSONDecodeError as e:
            raise ValueError(f"invalid JSON in config {p.name}: {e.msg} (line {e.lineno})")
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw = _apply_seed(raw, seed)
    return raw


def load_config(
    path: Optional[str] = None,
    preset: Optional[str] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
) -> ExperimentConfig:
    return ExperimentConfig.model_validate(load_raw_config(path, preset, overrides, seed))


def config_hash(model: BaseModel) -> str:
    canonical = json.dumps(model.model_dump(mode="json", by_alias=True), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
