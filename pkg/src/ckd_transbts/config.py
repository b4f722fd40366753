"""Model/training configuration dataclasses and the ablation presets."""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from .data import GroupingScheme
from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    base_embed: int = 32
    window: int = 4
    heads: Tuple[int, int, int, int] = (2, 4, 8, 16)
    crop_size: int = 128
    fusion: bool = True
    hybrid: bool = True
    calibration: bool = True
    grouping: GroupingScheme = GroupingScheme.CLINICAL
    expansion: int = 4
    se_ratio: float = 0.25
    seed: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, "grouping", GroupingScheme(self.grouping))
        except ValueError as exc:
            raise ConfigError(f"unknown grouping scheme {self.grouping!r}") from exc
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        if self.base_embed < 2 or self.base_embed % 2:
            raise ConfigError(f"base_embed must be an even integer >= 2, got {self.base_embed}")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if len(self.heads) != 4 or min(self.heads) < 1:
            raise ConfigError(f"heads needs 4 positive entries (3 stages + bottleneck), got {self.heads}")
        for dim, h in zip(self.widths, self.heads):
            if dim % h:
                raise ConfigError(f"width {dim} not divisible by {h} heads")
        if self.crop_size <= 0 or self.crop_size % 32:
            raise ConfigError(f"crop_size must be a positive multiple of 32, got {self.crop_size}")
        if self.fusion and self.grouping in (GroupingScheme.INPUT_CONCAT, GroupingScheme.PER_MODALITY):
            raise ConfigError(f"cross-modal fusion needs paired branches; {self.grouping.value} has none")

    @property
    def widths(self) -> Tuple[int, int, int, int]:
        c = self.base_embed
        return (c, 2 * c, 4 * c, 16 * c)

    @property
    def branches(self):
        if self.grouping is GroupingScheme.INPUT_CONCAT:
            return ((0,),)
        if self.grouping is GroupingScheme.PER_MODALITY:
            return ((0,), (1,), (2,), (3,))
        return ((0, 1), (2, 3))

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["grouping"] = self.grouping.value
        d["heads"] = list(self.heads)
        return d

    def fingerprint(self) -> str:
        """Hash of the architecture-defining fields (seed and crop excluded)."""
        d = self.to_dict()
        d.pop("seed")
        d.pop("crop_size")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-4
    min_lr: float = 0.0
    epochs: int = 500
    batch_size: int = 1
    crop_size: int = 128
    dice_eps: float = 1e-5
    seed: int = 0
    augment: bool = True
    val_every: int = 1
    overlap: float = 0.6
    blend: str = "gaussian"
    max_steps: Optional[int] = None

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1 or self.val_every < 1:
            raise ConfigError("batch_size and val_every must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if not 0 <= self.min_lr <= self.base_lr:
            raise ConfigError(f"min_lr must lie in [0, base_lr], got {self.min_lr}")
        if self.crop_size <= 0 or self.dice_eps <= 0:
            raise ConfigError("crop_size and dice_eps must be positive")
        if not 0 <= self.overlap < 1:
            raise ConfigError(f"overlap must be in [0, 1), got {self.overlap}")
        if self.blend not in ("gaussian", "constant"):
            raise ConfigError(f"blend must be 'gaussian' or 'constant', got {self.blend!r}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _coerce(cls, values: Mapping[str, Any]):
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def model_config_from_dict(d: Mapping[str, Any]) -> ModelConfig:
    return _coerce(ModelConfig, dict(d))


def train_config_from_dict(d: Mapping[str, Any]) -> TrainConfig:
    return _coerce(TrainConfig, dict(d))


MODEL_KEYS = {f.name for f in fields(ModelConfig)}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def split_flat_config(flat: Mapping[str, Any]) -> Tuple[ModelConfig, TrainConfig]:
    """Build both configs from one flat key-value mapping.

    Shared keys (``crop_size``) feed both; ``seed`` seeds model init and data.
    """
    unknown = set(flat) - MODEL_KEYS - TRAIN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    model = model_config_from_dict({k: v for k, v in flat.items() if k in MODEL_KEYS})
    train = train_config_from_dict({k: v for k, v in flat.items() if k in TRAIN_KEYS})
    return model, train


def load_flat_config(path: Optional[Path], overrides: Optional[Mapping[str, Any]] = None):
    flat: Dict[str, Any] = {}
    if path is not None:
        try:
            flat = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(flat, dict):
            raise ConfigError(f"config {path} must be a JSON object")
    flat.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return split_flat_config(flat)


class Preset(str, enum.Enum):
    TABLE2_ROW1 = "table2_row1"
    TABLE2_ROW2 = "table2_row2"
    TABLE2_ROW3 = "table2_row3"
    TABLE2_ROW4 = "table2_row4"
    TABLE2_ROW5 = "table2_row5"
    TABLE2_ROW6 = "table2_row6"
    TABLE2_ROW7 = "table2_row7"
    TABLE2_ROW8 = "table2_row8"
    TABLE3_ROW1 = "table3_row1"
    TABLE3_ROW2 = "table3_row2"
    TABLE3_ROW3 = "table3_row3"
    TABLE3_ROW4 = "table3_row4"
    TABLE3_ROW5 = "table3_row5"


# (fusion, calibration, hybrid, grouping)
_PRESETS = {
    Preset.TABLE2_ROW1: (False, False, False, GroupingScheme.CLINICAL),
    Preset.TABLE2_ROW2: (True, False, False, GroupingScheme.CLINICAL),
    Preset.TABLE2_ROW3: (False, True, False, GroupingScheme.CLINICAL),
    Preset.TABLE2_ROW4: (False, False, True, GroupingScheme.CLINICAL),
    Preset.TABLE2_ROW5: (True, False, True, GroupingScheme.CLINICAL),
    Preset.TABLE2_ROW6: (True, True, False, GroupingScheme.CLINICAL),
    Preset.TABLE2_ROW7: (False, True, True, GroupingScheme.CLINICAL),
    Preset.TABLE2_ROW8: (True, True, True, GroupingScheme.CLINICAL),
    Preset.TABLE3_ROW1: (False, True, True, GroupingScheme.PER_MODALITY),
    Preset.TABLE3_ROW2: (False, True, True, GroupingScheme.INPUT_CONCAT),
    Preset.TABLE3_ROW3: (True, True, True, GroupingScheme.SWAP_1),
    Preset.TABLE3_ROW4: (True, True, True, GroupingScheme.SWAP_2),
    Preset.TABLE3_ROW5: (True, True, True, GroupingScheme.CLINICAL),
}

SUITES = {
    "TABLE2": [p for p in Preset if p.name.startswith("TABLE2")],
    "TABLE3": [p for p in Preset if p.name.startswith("TABLE3")],
}


def variant(preset, base: Optional[ModelConfig] = None) -> ModelConfig:
    """Config for one ablation row, other fields taken from ``base``."""
    if not isinstance(preset, Preset):
        key = str(preset).upper()
        if key not in Preset.__members__:
            raise ConfigError(f"unknown preset {preset!r}")
        preset = Preset[key]
    fusion, calibration, hybrid, grouping = _PRESETS[preset]
    return replace(base or ModelConfig(), fusion=fusion, calibration=calibration, hybrid=hybrid,
                   grouping=grouping)
