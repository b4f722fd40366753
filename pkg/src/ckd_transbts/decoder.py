"""Feature-calibration decoder: TCFC blocks, upsampling, conv fusion, seg head."""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import torch
import torch.nn as nn

from .encoder import ConvNormAct, EncoderTaps
from .errors import ShapeError

Profiles = Tuple[torch.Tensor, torch.Tensor, torch.Tensor]


def tri_directional_pool(f: torch.Tensor) -> Profiles:
    """Per-axis means of a cubic (B, C, X, Y, Z) volume, each (B, C, L)."""
    dims = f.shape[2:]
    if len(dims) != 3 or len(set(dims)) != 1:
        raise ShapeError(f"tri-directional pooling needs a cube, got {tuple(dims)}")
    return f.mean(dim=(3, 4)), f.mean(dim=(2, 4)), f.mean(dim=(2, 3))


def fuse_compress(profiles: Profiles, conv: nn.Conv1d) -> Profiles:
    """Concatenate the three profiles along length, mix channels once, split back."""
    lengths = [p.shape[-1] for p in profiles]
    if len(set(lengths)) != 1 or len({p.shape[:2] for p in profiles}) != 1:
        raise ShapeError(f"profile shapes differ: {[tuple(p.shape) for p in profiles]}")
    return tuple(conv(torch.cat(profiles, dim=-1)).split(lengths, dim=-1))


def direction_gate(hat_trans: torch.Tensor, hat_main: torch.Tensor, conv: nn.Conv1d) -> torch.Tensor:
    if hat_trans.shape != hat_main.shape:
        raise ShapeError(f"gate inputs differ: {tuple(hat_trans.shape)} vs {tuple(hat_main.shape)}")
    return torch.sigmoid(conv((hat_trans + hat_main) / 2))


def calibration_tensor(bx: torch.Tensor, by: torch.Tensor, bz: torch.Tensor) -> torch.Tensor:
    """Per-channel outer product a[c,x,y,z] = bx[c,x] by[c,y] bz[c,z]."""
    if not (bx.shape[:2] == by.shape[:2] == bz.shape[:2]):
        raise ShapeError("gated profiles need equal batch/channel counts")
    return torch.einsum("bcx,bcy,bcz->bcxyz", bx, by, bz)


class TCFC(nn.Module):
    """Calibrate transformer skips with a separable attention tensor, then concat.

    With ``calibrate=False`` the block is a plain skip concatenation.
    """

    def __init__(self, trans_channels: int, main_channels: int, calibrate: bool = True):
        super().__init__()
        self.trans_channels, self.main_channels = trans_channels, main_channels
        self.calibrate = calibrate
        if calibrate:
            self.compress_main = nn.Conv1d(main_channels, main_channels, 1)
            self.compress_trans = nn.Conv1d(trans_channels, main_channels, 1)
            self.gates = nn.ModuleList(nn.Conv1d(main_channels, trans_channels, 1) for _ in range(3))

    def attention(self, f_trans: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
        hat_main = fuse_compress(tri_directional_pool(f), self.compress_main)
        hat_trans = fuse_compress(tri_directional_pool(f_trans), self.compress_trans)
        gated = [direction_gate(t, m, g) for t, m, g in zip(hat_trans, hat_main, self.gates)]
        return calibration_tensor(*gated)

    def forward(self, f_trans, f: torch.Tensor) -> torch.Tensor:
        if not isinstance(f_trans, torch.Tensor):
            shapes = {t.shape[2:] for t in f_trans}
            if len(shapes) != 1:
                raise ShapeError("branch taps must share one scale")
            f_trans = torch.cat(list(f_trans), dim=1)
        if f_trans.shape[2:] != f.shape[2:]:
            raise ShapeError(f"scale mismatch: {tuple(f_trans.shape[2:])} vs {tuple(f.shape[2:])}")
        if f_trans.shape[1] != self.trans_channels or f.shape[1] != self.main_channels:
            raise ShapeError("TCFC channel mismatch")
        if self.calibrate:
            f_trans = self.attention(f_trans, f) * f_trans
        return torch.cat([f_trans, f], dim=1)


def tcfc(f_trans_b1, f_trans_b2, f, block: TCFC) -> torch.Tensor:
    return block([f_trans_b1, f_trans_b2], f)


class Upsample(nn.ConvTranspose3d):
    """Stride-2 transposed convolution: doubles spatial dims, halves channels."""

    def __init__(self, channels: int):
        super().__init__(channels, channels // 2, 2, stride=2)


class SegHead(nn.Conv3d):
    """1^3 convolution to ET, TC, WT logits."""

    def __init__(self, channels: int, n_regions: int = 3):
        super().__init__(channels, n_regions, 1)

    def forward(self, f: torch.Tensor, input_dims: Optional[Sequence[int]] = None) -> torch.Tensor:
        if input_dims is not None and tuple(f.shape[2:]) != tuple(input_dims):
            raise ShapeError(f"seg head expects full resolution {tuple(input_dims)}, got {tuple(f.shape[2:])}")
        return super().forward(f)


class TCFCStage(nn.Module):
    """upsample -> TCFC -> 1^3 width harmonisation -> 3^3 conv block."""

    def __init__(self, in_channels: int, trans_channels: int, calibrate: bool):
        super().__init__()
        main = in_channels // 2
        self.up = Upsample(in_channels)
        self.tcfc = TCFC(trans_channels, main, calibrate)
        self.harmonize = nn.Conv3d(trans_channels + main, main, 1)
        self.conv = ConvNormAct(main, main)

    def forward(self, f: torch.Tensor, taps: Sequence[torch.Tensor]) -> torch.Tensor:
        return self.conv(self.harmonize(self.tcfc(list(taps), self.up(f))))


class CalibrationDecoder(nn.Module):
    def __init__(self, width: int, n_streams: int, calibrate: bool = True, n_regions: int = 3):
        super().__init__()
        c = width
        self.tcfc_stages = nn.ModuleList([
            TCFCStage(16 * c, n_streams * 4 * c, calibrate),
            TCFCStage(8 * c, n_streams * 2 * c, calibrate),
            TCFCStage(4 * c, n_streams * c, calibrate),
        ])
        self.up_half = Upsample(2 * c)
        self.fuse_half = nn.Sequential(ConvNormAct(c + n_streams * (c // 2), c), ConvNormAct(c, c))
        self.up_full = Upsample(c)
        self.fuse_full = ConvNormAct(c // 2, c // 2)
        self.head = SegHead(c // 2, n_regions)

    def forward(self, taps: EncoderTaps, record: Optional[dict] = None) -> torch.Tensor:
        f = taps.bottleneck
        for i, (stage, stage_taps) in enumerate(zip(self.tcfc_stages, reversed(taps.stages))):
            f = stage(f, stage_taps)
            if record is not None:
                record[f"decoder.tcfc{i}"] = f
        f = self.up_half(f)
        f = self.fuse_half(torch.cat([f] + list(taps.skips), dim=1))
        f = self.fuse_full(self.up_full(f))
        dims = [2 * d for d in taps.skips[0].shape[2:]]
        return self.head(f, dims)
