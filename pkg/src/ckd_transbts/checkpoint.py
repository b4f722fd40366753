"""Single-file checkpoints: magic, JSON header, raw tensor payload."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import torch

from .config import ModelConfig, TrainConfig, model_config_from_dict, train_config_from_dict
from .errors import ConfigError, FormatError, IoError

MAGIC = b"CKDTCKPT"
VERSION = 1


@dataclass
class Checkpoint:
    model_state: Dict[str, torch.Tensor]
    optimizer_state: Optional[dict]
    epoch: int
    step: int
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    rng_state: Dict[str, Any] = field(default_factory=dict)
    metrics: Dict[str, Any] = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return self.model_cfg.fingerprint()


def _flatten(obj, tensors: list):
    """Replace tensors in a nested structure by payload references."""
    if isinstance(obj, torch.Tensor):
        tensors.append(obj.detach().cpu().contiguous())
        return {"__tensor__": len(tensors) - 1}
    if isinstance(obj, dict):
        return {"__dict__": [[_flatten(k, tensors), _flatten(v, tensors)] for k, v in obj.items()]}
    if isinstance(obj, (list, tuple)):
        return {"__list__": [_flatten(v, tensors) for v in obj], "tuple": isinstance(obj, tuple)}
    return obj


def _unflatten(obj, tensors: list):
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            return tensors[obj["__tensor__"]]
        if "__dict__" in obj:
            return {_unflatten(k, tensors): _unflatten(v, tensors) for k, v in obj["__dict__"]}
        if "__list__" in obj:
            items = [_unflatten(v, tensors) for v in obj["__list__"]]
            return tuple(items) if obj.get("tuple") else items
    return obj


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    tensors: list = []
    body = {
        "version": VERSION,
        "fingerprint": ckpt.fingerprint,
        "model_cfg": ckpt.model_cfg.to_dict(),
        "train_cfg": ckpt.train_cfg.to_dict(),
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "metrics": ckpt.metrics,
        "model_state": _flatten(dict(ckpt.model_state), tensors),
        "optimizer_state": _flatten(ckpt.optimizer_state, tensors),
        "rng_state": _flatten(ckpt.rng_state, tensors),
    }
    index, offset = [], 0
    for t in tensors:
        raw = t.numpy().tobytes()
        index.append({"dtype": str(t.dtype).replace("torch.", ""), "shape": list(t.shape),
                      "offset": offset, "nbytes": len(raw)})
        offset += len(raw)
    body["tensors"] = index
    header = json.dumps(body).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", VERSION, len(header)))
            fh.write(header)
            for t in tensors:
                fh.write(t.numpy().tobytes())
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path, expected: Optional[ModelConfig] = None) -> Checkpoint:
    """Read a checkpoint; ``expected`` must match the stored architecture."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    head = len(MAGIC) + 12
    if len(data) < head or not data.startswith(MAGIC):
        raise FormatError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[len(MAGIC):head])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(data) < head + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        body = json.loads(data[head:head + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    payload = memoryview(data)[head + hlen:]
    tensors = []
    for entry in body["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise FormatError(f"{path}: truncated payload")
        dtype = getattr(torch, entry["dtype"])
        buf = bytes(payload[entry["offset"]:end])
        t = torch.frombuffer(bytearray(buf), dtype=dtype) if buf else torch.empty(0, dtype=dtype)
        tensors.append(t.reshape(entry["shape"]).clone())
    if head + hlen + sum(e["nbytes"] for e in body["tensors"]) != len(data):
        raise FormatError(f"{path}: payload size mismatch")

    model_cfg = model_config_from_dict(body["model_cfg"])
    if model_cfg.fingerprint() != body["fingerprint"]:
        raise FormatError(f"{path}: header fingerprint does not match its config")
    if expected is not None and expected.fingerprint() != model_cfg.fingerprint():
        raise ConfigError(
            f"checkpoint architecture {model_cfg.to_dict()} does not match requested {expected.to_dict()}"
        )
    return Checkpoint(
        model_state=_unflatten(body["model_state"], tensors),
        optimizer_state=_unflatten(body["optimizer_state"], tensors),
        epoch=body["epoch"],
        step=body["step"],
        model_cfg=model_cfg,
        train_cfg=train_config_from_dict(body["train_cfg"]),
        rng_state=_unflatten(body["rng_state"], tensors),
        metrics=body["metrics"],
    )
