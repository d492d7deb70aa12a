"""
Model checkpoints and training histories.

A checkpoint is a torch.save dictionary:
    format_version  int, must equal CHECKPOINT_FORMAT_VERSION
    kind            "regnet" | "segnet"
    config          model config dump (json mode)
    config_hash     sha256 of the canonical config JSON
    num_labels      label count the model was trained for (0 for regnet)
    state_dict      named parameter tensors
    history         optional TrainHistory summary
Loading uses weights_only=True, so only tensors and plain containers are
accepted.
"""

import io
import json
from pathlib import Path
from typing import Optional, Tuple, Union

import torch

from config import CHECKPOINT_FORMAT_VERSION
from core.configs import RegNetConfig, SegNetConfig, config_hash
from core.regnet import RegNet, build_regnet
from core.segnet import SegNet, build_segnet
from core.trainer import TrainHistory
from ingest.atomic import atomic_write_bytes, atomic_write_text

PathLike = Union[str, Path]
KINDS = {"regnet": (RegNetConfig, build_regnet), "segnet": (SegNetConfig, build_segnet)}


def write_checkpoint(
    path: PathLike,
    model: Union[RegNet, SegNet],
    history: Optional[TrainHistory] = None,
) -> None:
    kind = "regnet" if isinstance(model, RegNet) else "segnet"
    cfg = model.cfg
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": kind,
        "config": cfg.model_dump(mode="json"),
        "config_hash": config_hash(cfg),
        "num_labels": getattr(cfg, "num_labels", 0),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "history": history.summary() if history is not None else {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    atomic_write_bytes(path, buf.getvalue())


def read_checkpoint(path: PathLike) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(str(path), map_location="cpu", weights_only=True)
    except Exception as e:
        raise ValueError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict):
        raise ValueError(f"checkpoint {path} is not a dictionary container")
    for key in ("format_version", "kind", "config", "config_hash", "state_dict"):
        if key not in payload:
            raise KeyError(f"checkpoint {path} is missing '{key}'")
    version = payload["format_version"]
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"checkpoint {path} has format version {version}, this build reads version {CHECKPOINT_FORMAT_VERSION}"
        )
    if payload["kind"] not in KINDS:
        raise ValueError(f"checkpoint {path} has unknown kind '{payload['kind']}'")
    return payload


def load_model(path: PathLike, expected_kind: Optional[str] = None) -> Tuple[Union[RegNet, SegNet], dict]:
    """Rebuild the network from its stored config and load the parameters."""
    payload = read_checkpoint(path)
    kind = payload["kind"]
    if expected_kind is not None and kind != expected_kind:
        raise ValueError(f"checkpoint {path} holds a {kind}, expected a {expected_kind}")
    cfg_cls, build = KINDS[kind]
    cfg = cfg_cls.model_validate(payload["config"])
    if config_hash(cfg) != payload["config_hash"]:
        raise ValueError(f"checkpoint {path}: stored config does not match its config_hash")
    model = build(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


def load_regnet(path: PathLike, expected_cfg: Optional[RegNetConfig] = None) -> RegNet:
    model, payload = load_model(path, "regnet")
    if expected_cfg is not None and config_hash(expected_cfg) != payload["config_hash"]:
        raise ValueError(f"checkpoint {path} was trained with a different registration architecture")
    return model


def load_segnet(path: PathLike, expected_cfg: Optional[SegNetConfig] = None) -> SegNet:
    model, payload = load_model(path, "segnet")
    if expected_cfg is not None and config_hash(expected_cfg) != payload["config_hash"]:
        raise ValueError(f"checkpoint {path} was trained with a different segmentation architecture")
    return model


def write_history(history: TrainHistory, path: PathLike) -> None:
    lines = [json.dumps(row, sort_keys=True) for row in history.to_dicts()]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_history(path: PathLike) -> list:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError:
            continue
    return rows
