"""Dual-branch hybrid encoder: convolutional stems, MCCA stages, bottleneck."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from .attention import MLP, CrossModalAttention, MBConv, WindowAttention, windowed
from .errors import ShapeError


class ChannelLayerNorm(nn.LayerNorm):
    """LayerNorm over the channel axis of a channels-first volume."""

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return super().forward(f.permute(0, 2, 3, 4, 1)).permute(0, 4, 1, 2, 3)


def feed_forward(channels: int, hybrid: bool, expansion: int = 4, se_ratio: float = 0.25) -> nn.Module:
    return MBConv(channels, expansion, se_ratio) if hybrid else MLP(channels, expansion)


class ConvNormAct(nn.Sequential):
    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1):
        super().__init__(
            nn.Conv3d(cin, cout, kernel, stride=stride, padding=kernel // 2),
            nn.InstanceNorm3d(cout, affine=True),
            nn.GELU(),
        )


class ConvStem(nn.Module):
    """Two stride-2 stages producing 1/2-scale skip and 1/4-scale features."""

    def __init__(self, in_channels: int, width: int):
        super().__init__()
        half = width // 2
        self.to_half = nn.Sequential(ConvNormAct(in_channels, half, stride=2), ConvNormAct(half, half))
        self.to_quarter = nn.Sequential(ConvNormAct(half, width, stride=2), ConvNormAct(width, width))

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if any(d % 4 for d in x.shape[2:]):
            raise ShapeError(f"stem input dims {tuple(x.shape[2:])} must be divisible by 4")
        c_half = self.to_half(x)
        return c_half, self.to_quarter(c_half)


class Downsample(nn.Conv3d):
    """Stride-2 3^3 convolution: halves each spatial dim, doubles channels."""

    def __init__(self, channels: int):
        super().__init__(channels, 2 * channels, 3, stride=2, padding=1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if any(d % 2 for d in f.shape[2:]):
            raise ShapeError(f"downsample needs even dims, got {tuple(f.shape[2:])}")
        return super().forward(f)


class SelfModalBlock(nn.Module):
    """Windowed MSA then feed-forward, both pre-norm residual."""

    def __init__(self, dim, num_heads, window, hybrid=True, shift=0, expansion=4, se_ratio=0.25):
        super().__init__()
        self.window, self.shift = window, shift
        self.norm1 = ChannelLayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window)
        self.norm2 = ChannelLayerNorm(dim)
        self.ffn = feed_forward(dim, hybrid, expansion, se_ratio)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        f = f + windowed(self.attn, [self.norm1(f)], self.window, self.shift)[0]
        return f + self.ffn(self.norm2(f))


class CrossModalBlock(nn.Module):
    """Shifted-window block over one or two streams with optional cross-modal messages.

    For each stream: f + MSA(LN f) + M, then the feed-forward residual. M comes from cross-attention between the two streams and is
    absent when ``fusion`` is off or the block has a single stream.
    """

    def __init__(self, dim, num_heads, window, shift, n_streams=2, hybrid=True, fusion=True,
                 expansion=4, se_ratio=0.25):
        super().__init__()
        self.window, self.shift = window, shift
        self.streams = nn.ModuleList(
            SelfModalBlock(dim, num_heads, window, hybrid, shift, expansion, se_ratio) for _ in range(n_streams)
        )
        self.cross = CrossModalAttention(dim, num_heads, window) if fusion and n_streams == 2 else None

    def forward(self, *fs: torch.Tensor) -> Tuple[torch.Tensor, ...]:
        if len(fs) != len(self.streams):
            raise ShapeError(f"block expects {len(self.streams)} streams, got {len(fs)}")
        if any(f.shape != fs[0].shape for f in fs):
            raise ShapeError("paired streams must share one shape")
        hs = [s.norm1(f) for s, f in zip(self.streams, fs)]
        outs = [f + windowed(s.attn, [h], self.window, self.shift)[0] for s, f, h in zip(self.streams, fs, hs)]
        if self.cross is not None:
            msgs = windowed(self.cross, hs, self.window, self.shift)
            outs = [o + m for o, m in zip(outs, msgs)]
        return tuple(o + s.ffn(s.norm2(o)) for s, o in zip(self.streams, outs))


def self_modal_block(f: torch.Tensor, block: SelfModalBlock) -> torch.Tensor:
    return block(f)


def cross_modal_block(f_a: torch.Tensor, f_b: torch.Tensor, block: CrossModalBlock):
    return block(f_a, f_b)


class MCCAStage(nn.Module):
    """Self-modal block per stream followed by one (cross-modal) shifted block."""

    def __init__(self, dim, num_heads, window, n_streams=2, hybrid=True, fusion=True,
                 expansion=4, se_ratio=0.25):
        super().__init__()
        self.self_blocks = nn.ModuleList(
            SelfModalBlock(dim, num_heads, window, hybrid, 0, expansion, se_ratio) for _ in range(n_streams)
        )
        self.cross_block = CrossModalBlock(dim, num_heads, window, window // 2, n_streams, hybrid, fusion,
                                           expansion, se_ratio)

    def forward(self, *fs: torch.Tensor, record: Optional[dict] = None, prefix: str = ""):
        fs = tuple(b(f) for b, f in zip(self.self_blocks, fs))
        if record is not None:
            for i, f in enumerate(fs):
                record[f"{prefix}self.{i}"] = f
        fs = self.cross_block(*fs)
        if record is not None:
            for i, f in enumerate(fs):
                record[f"{prefix}cross.{i}"] = f
        return fs


def mcca_stage(pair: Sequence[torch.Tensor], stage: MCCAStage):
    return stage(*pair)


class Bottleneck(nn.Module):
    """Channel concat of all streams, optional 1^3 compression, one self-modal block."""

    def __init__(self, in_channels: int, n_inputs: int, num_heads: int, window: int,
                 out_channels: Optional[int] = None, hybrid=True, expansion=4, se_ratio=0.25):
        super().__init__()
        self.in_channels, self.n_inputs = in_channels, n_inputs
        cat = in_channels * n_inputs
        self.compress = nn.Conv3d(cat, out_channels, 1) if out_channels else nn.Identity()
        self.out_channels = out_channels or cat
        self.block = SelfModalBlock(self.out_channels, num_heads, window, hybrid, 0, expansion, se_ratio)

    def forward(self, fs: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(fs) != self.n_inputs or any(f.shape != fs[0].shape for f in fs):
            raise ShapeError(f"bottleneck needs {self.n_inputs} equal-shaped inputs")
        if fs[0].shape[1] != self.in_channels:
            raise ShapeError(f"bottleneck inputs need {self.in_channels} channels, got {fs[0].shape[1]}")
        return self.block(self.compress(torch.cat(list(fs), dim=1)))


@dataclass
class EncoderTaps:
    """Skip tensors consumed by the decoder, one entry per stream at each scale."""

    skips: List[torch.Tensor]
    stages: List[List[torch.Tensor]]
    bottleneck: torch.Tensor
    stream_branch: Tuple[int, ...]
    scales: Dict[str, Fraction] = field(default_factory=lambda: {
        "skips": Fraction(1, 2),
        "stage1": Fraction(1, 4),
        "stage2": Fraction(1, 8),
        "stage3": Fraction(1, 16),
        "bottleneck": Fraction(1, 32),
    })


class DualBranchEncoder(nn.Module):
    """Stems, three MCCA stages with downsampling, and the bottleneck.

    ``branches`` lists stream indices per branch, e.g. ``((0, 1), (2, 3))`` for
    two paired branches or ``((0,), (1,), (2,), (3,))`` for independent streams.
    Each stream receives ``in_channels`` input channels.
    """

    def __init__(self, branches, in_channels: int = 1, width: int = 32, heads=(2, 4, 8, 16), window: int = 4,
                 hybrid: bool = True, fusion: bool = True, expansion: int = 4, se_ratio: float = 0.25):
        super().__init__()
        self.branches = tuple(tuple(b) for b in branches)
        self.n_streams = sum(len(b) for b in self.branches)
        self.in_channels = in_channels
        self.width = width
        self.stems = nn.ModuleList(ConvStem(in_channels, width) for _ in range(self.n_streams))
        self.stages = nn.ModuleList()
        self.downs = nn.ModuleList()
        for level in range(3):
            dim = width * 2 ** level
            self.stages.append(nn.ModuleList(
                MCCAStage(dim, heads[level], window, len(b), hybrid, fusion, expansion, se_ratio)
                for b in self.branches
            ))
            self.downs.append(nn.ModuleList(Downsample(dim) for _ in range(self.n_streams)))
        self.bottleneck = Bottleneck(8 * width, self.n_streams, heads[3], window, 16 * width, hybrid,
                                     expansion, se_ratio)

    def forward(self, x: torch.Tensor, record: Optional[dict] = None) -> EncoderTaps:
        expected = self.n_streams * self.in_channels
        if x.dim() != 5 or x.shape[1] != expected:
            raise ShapeError(f"encoder expects (B, {expected}, X, Y, Z), got {tuple(x.shape)}")
        inputs = x.split(self.in_channels, dim=1)
        skips, feats = [], []
        for i, (stem, xi) in enumerate(zip(self.stems, inputs)):
            half, quarter = stem(xi)
            skips.append(half)
            feats.append(quarter)
            if record is not None:
                record[f"stem.{i}"] = quarter
        stage_taps = []
        for level, (stage, downs) in enumerate(zip(self.stages, self.downs)):
            new = list(feats)
            for b, (branch, block) in enumerate(zip(self.branches, stage)):
                outs = block(*[feats[i] for i in branch], record=record, prefix=f"stage{level + 1}.branch{b}.")
                for i, o in zip(branch, outs):
                    new[i] = o
                if record is not None:
                    for i, o in zip(branch, outs):
                        record[f"stage{level + 1}.stream{i}"] = o
            stage_taps.append(new)
            feats = [d(f) for d, f in zip(downs, new)]
        bnl = self.bottleneck(feats)
        if record is not None:
            record["bottleneck"] = bnl
        stream_branch = tuple(b for b, branch in enumerate(self.branches) for _ in branch)
        order = [i for branch in self.branches for i in branch]
        if order != list(range(self.n_streams)):
            raise ShapeError(f"branches must enumerate streams in order, got {self.branches}")
        return EncoderTaps(skips, stage_taps, bnl, stream_branch)
