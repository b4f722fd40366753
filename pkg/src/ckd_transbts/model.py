"""Full network assembly, initialisation and parameter accounting."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
import torch
import torch.nn as nn

from .attention import RelativePositionBias
from .config import ModelConfig
from .data import GroupedInput, GroupingScheme
from .decoder import CalibrationDecoder
from .encoder import DualBranchEncoder, EncoderTaps
from .errors import ShapeError


class CKDTransBTS(nn.Module):
    """Dual-branch hybrid encoder + feature-calibration decoder.

    Input is (B, 4, X, Y, Z) with channels ordered as the grouped pairs
    (group_a then group_b); output is (B, 3, X, Y, Z) ET/TC/WT logits.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        concat = cfg.grouping is GroupingScheme.INPUT_CONCAT
        self.encoder = DualBranchEncoder(
            cfg.branches,
            in_channels=4 if concat else 1,
            width=cfg.base_embed,
            heads=cfg.heads,
            window=cfg.window,
            hybrid=cfg.hybrid,
            fusion=cfg.fusion,
            expansion=cfg.expansion,
            se_ratio=cfg.se_ratio,
        )
        self.decoder = CalibrationDecoder(cfg.base_embed, self.encoder.n_streams, cfg.calibration)

    def encode(self, x: torch.Tensor, record: Optional[dict] = None) -> EncoderTaps:
        return self.encoder(x, record)

    def forward(self, x, record: Optional[dict] = None) -> torch.Tensor:
        if isinstance(x, GroupedInput):
            x = torch.as_tensor(x.tensor)[None]
        if x.dim() != 5 or x.shape[1] != 4:
            raise ShapeError(f"expected (B, 4, X, Y, Z) input, got {tuple(x.shape)}")
        dims = tuple(x.shape[2:])
        if any(d % 32 for d in dims) or len(set(dims)) != 1:
            raise ShapeError(f"input must be a cube with side divisible by 32, got {dims}")
        taps = self.encode(x, record)
        return self.decoder(taps, record)


# foreground prior for the segmentation head bias: logit(0.05)
HEAD_PRIOR = 0.05


def init_weights(model: nn.Module) -> None:
    for m in model.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04)
            nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.Conv1d, nn.Conv3d, nn.ConvTranspose3d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.LayerNorm, nn.InstanceNorm3d)) and m.weight is not None:
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, RelativePositionBias):
            nn.init.zeros_(m.table)
    if isinstance(model, CKDTransBTS):
        nn.init.constant_(model.decoder.head.bias, math.log(HEAD_PRIOR / (1 - HEAD_PRIOR)))


def build(cfg: ModelConfig, dtype: torch.dtype = torch.float32) -> CKDTransBTS:
    """Construct and deterministically initialise a model from ``cfg.seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = CKDTransBTS(cfg)
        init_weights(model)
    return model.to(dtype)


def forward(model: CKDTransBTS, grouped) -> torch.Tensor:
    return model(grouped)


@dataclass(frozen=True)
class ParamReport:
    parts: Dict[str, int]
    total: int

    def __getitem__(self, key: str) -> int:
        return self.parts[key]


def count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def param_count(model: CKDTransBTS) -> ParamReport:
    enc, dec = model.encoder, model.decoder
    parts = {
        "encoder.stems": count(enc.stems),
        "encoder.stages": count(enc.stages),
        "encoder.downs": count(enc.downs),
        "encoder.bottleneck": count(enc.bottleneck),
        "decoder.tcfc_stages": count(dec.tcfc_stages),
        "decoder.fuse_half": count(dec.up_half) + count(dec.fuse_half),
        "decoder.fuse_full": count(dec.up_full) + count(dec.fuse_full),
        "decoder.head": count(dec.head),
    }
    return ParamReport(parts, sum(parts.values()))


def parameters_fingerprint(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.detach().cpu().numpy()).tobytes())
    return h.hexdigest()
