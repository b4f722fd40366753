"""3D window machinery, windowed (cross-)attention and MBConv.

Feature volumes are ``(batch, channels, X, Y, Z)`` tensors. Window token sets
are ``(batch * num_windows, tokens_per_window, channels)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError, WindowSizeError

Triple = Tuple[int, int, int]


def to_triple(v: Union[int, Sequence[int]]) -> Triple:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ShapeError(f"expected 3 values, got {v}")
    return v


@dataclass
class WindowSet:
    tokens: torch.Tensor
    window: Triple
    origin_dims: Triple
    shift: Triple = (0, 0, 0)

    @property
    def num_windows(self) -> int:
        return math.prod(d // w for d, w in zip(self.origin_dims, self.window))


def window_partition(f: torch.Tensor, window, shift=(0, 0, 0)) -> WindowSet:
    """Tile ``f`` (B, C, X, Y, Z) into non-overlapping windows."""
    window = to_triple(window)
    if f.dim() != 5:
        raise ShapeError(f"expected (B, C, X, Y, Z), got {tuple(f.shape)}")
    b, c, *dims = f.shape
    if any(d % w for d, w in zip(dims, window)):
        raise WindowSizeError(f"spatial dims {tuple(dims)} not divisible by window {window}")
    (nx, ny, nz), (wx, wy, wz) = [d // w for d, w in zip(dims, window)], window
    x = f.permute(0, 2, 3, 4, 1).reshape(b, nx, wx, ny, wy, nz, wz, c)
    tokens = x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(-1, wx * wy * wz, c)
    return WindowSet(tokens, window, tuple(dims), to_triple(shift))


def window_reverse(ws: WindowSet) -> torch.Tensor:
    """Inverse of :func:`window_partition`."""
    (wx, wy, wz), dims = ws.window, ws.origin_dims
    if any(d <= 0 or d % w for d, w in zip(dims, ws.window)):
        raise ShapeError(f"origin dims {dims} incompatible with window {ws.window}")
    nx, ny, nz = (d // w for d, w in zip(dims, ws.window))
    n_tok, c = ws.tokens.shape[1], ws.tokens.shape[2]
    per_batch = nx * ny * nz
    if n_tok != wx * wy * wz or ws.tokens.shape[0] % per_batch:
        raise ShapeError(
            f"{tuple(ws.tokens.shape)} tokens do not tile {dims} with window {ws.window}"
        )
    b = ws.tokens.shape[0] // per_batch
    x = ws.tokens.reshape(b, nx, ny, nz, wx, wy, wz, c)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(b, nx * wx, ny * wy, nz * wz, c)
    return x.permute(0, 4, 1, 2, 3)


def cyclic_shift(f: torch.Tensor, shift) -> torch.Tensor:
    """Roll the spatial axes by ``shift`` voxels with wraparound."""
    shift = to_triple(shift)
    if not any(shift):
        return f
    return torch.roll(f, shifts=shift, dims=(2, 3, 4))


def pad_to_window(f: torch.Tensor, window) -> Tuple[torch.Tensor, Triple]:
    """Zero-pad spatial dims of ``f`` up to multiples of ``window`` (at the far end)."""
    window = to_triple(window)
    pads = tuple((-d) % w for d, w in zip(f.shape[2:], window))
    if any(pads):
        f = F.pad(f, (0, pads[2], 0, pads[1], 0, pads[0]))
    return f, pads


def resolve_window(dims: Sequence[int], window: int, shift: int) -> Tuple[Triple, Triple]:
    """Clip the window to small volumes; no shift on axes a single window covers."""
    win = tuple(min(window, d) for d in dims)
    sh = tuple(0 if d <= window else shift for d in dims)
    return win, sh


# ---------------------------------------------------------------------------
# relative position bias


def relative_position_index(window, table_window: Optional[int] = None) -> torch.Tensor:
    """Index (N, N) into a ((2T-1)^3)-entry table for token pairs of a window.

    ``table_window`` T defaults to the window itself; a smaller window reuses
    the central part of a larger table.
    """
    window = to_triple(window)
    t = max(window) if table_window is None else table_window
    if any(w > t for w in window):
        raise ShapeError(f"window {window} larger than table window {t}")
    coords = torch.stack(torch.meshgrid(*[torch.arange(w) for w in window], indexing="ij")).flatten(1)
    rel = coords[:, :, None] - coords[:, None, :] + (t - 1)
    return rel[0] * (2 * t - 1) ** 2 + rel[1] * (2 * t - 1) + rel[2]


def relative_position_bias(table: torch.Tensor, window, table_window: Optional[int] = None) -> torch.Tensor:
    """Bias (heads, N, N) gathered from ``table`` of shape ((2T-1)^3, heads)."""
    window = to_triple(window)
    t = max(window) if table_window is None else table_window
    if table.dim() != 2 or table.shape[0] != (2 * t - 1) ** 3:
        raise ShapeError(f"bias table {tuple(table.shape)} needs {(2 * t - 1) ** 3} rows for window {t}")
    idx = relative_position_index(window, t).to(table.device)
    n = idx.shape[0]
    return table[idx.reshape(-1)].reshape(n, n, -1).permute(2, 0, 1)


class RelativePositionBias(nn.Module):
    def __init__(self, window: int, num_heads: int):
        super().__init__()
        self.window = window
        self.table = nn.Parameter(torch.zeros((2 * window - 1) ** 3, num_heads))

    def forward(self, window=None) -> torch.Tensor:
        return relative_position_bias(self.table, self.window if window is None else window, self.window)


def shift_mask(dims, window, shift, device=None) -> Optional[torch.Tensor]:
    """Additive (num_windows, N, N) mask: -inf between tokens from different regions."""
    window, shift = to_triple(window), to_triple(shift)
    if not any(shift):
        return None
    region = torch.zeros((1, 1) + tuple(dims), device=device)
    cnt = 0
    slices = [
        (slice(0, d - w), slice(d - w, d - s), slice(d - s, d)) if s else (slice(0, d),)
        for d, w, s in zip(dims, window, shift)
    ]
    for sx in slices[0]:
        for sy in slices[1]:
            for sz in slices[2]:
                region[:, :, sx, sy, sz] = cnt
                cnt += 1
    ids = window_partition(region, window).tokens.squeeze(-1)
    diff = ids[:, None, :] - ids[:, :, None]
    return torch.zeros_like(diff).masked_fill(diff != 0, float("-inf"))


# ---------------------------------------------------------------------------
# attention


def attention(q, k, v, bias=None, mask=None, return_weights: bool = False):
    """softmax(q k^T / sqrt(d) + bias + mask) v for (Bw, heads, N, d) inputs."""
    d = q.shape[-1]
    logits = (q @ k.transpose(-2, -1)) / math.sqrt(d)
    if bias is not None:
        logits = logits + bias.unsqueeze(0)
    if mask is not None:
        nw = mask.shape[0]
        bw, h, n, m = logits.shape
        logits = (logits.view(bw // nw, nw, h, n, m) + mask[None, :, None]).view(bw, h, n, m)
    weights = logits.softmax(dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


class Projections(nn.Module):
    """Q, K, V and output projections for one token stream."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ShapeError(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def heads(self, x: torch.Tensor) -> torch.Tensor:
        bw, n, c = x.shape
        return x.reshape(bw, n, self.num_heads, c // self.num_heads).transpose(1, 2)

    def merge(self, x: torch.Tensor) -> torch.Tensor:
        bw, h, n, d = x.shape
        return self.proj(x.transpose(1, 2).reshape(bw, n, h * d))


class WindowAttention(nn.Module):
    """Windowed multi-head self-attention with relative position bias."""

    def __init__(self, dim: int, num_heads: int, window: int):
        super().__init__()
        self.dim = dim
        self.p = Projections(dim, num_heads)
        self.bias = RelativePositionBias(window, num_heads)

    def forward(self, tokens, mask=None, window=None, return_weights=False):
        if tokens.shape[-1] != self.dim:
            raise ShapeError(f"token dim {tokens.shape[-1]} != attention dim {self.dim}")
        p = self.p
        win = self.bias.window if window is None else window
        res = attention(p.heads(p.q(tokens)), p.heads(p.k(tokens)), p.heads(p.v(tokens)),
                        self.bias(win), mask, return_weights)
        if return_weights:
            return p.merge(res[0]), res[1]
        return p.merge(res)


class CrossModalAttention(nn.Module):
    """Paired cross-attention: each stream queries the other stream's keys/values.

    One relative-position-bias table is shared by both directions.
    """

    def __init__(self, dim: int, num_heads: int, window: int):
        super().__init__()
        self.dim = dim
        self.p_a = Projections(dim, num_heads)
        self.p_b = Projections(dim, num_heads)
        self.bias = RelativePositionBias(window, num_heads)

    @staticmethod
    def one_way(p_q: Projections, p_kv: Projections, x_q, x_kv, bias, mask, return_weights):
        res = attention(p_q.heads(p_q.q(x_q)), p_kv.heads(p_kv.k(x_kv)), p_kv.heads(p_kv.v(x_kv)),
                        bias, mask, return_weights)
        if return_weights:
            return p_q.merge(res[0]), res[1]
        return p_q.merge(res)

    def forward(self, tokens_a, tokens_b, mask=None, window=None, return_weights=False):
        if tokens_a.shape != tokens_b.shape:
            raise ShapeError(f"stream shapes differ: {tuple(tokens_a.shape)} vs {tuple(tokens_b.shape)}")
        if tokens_a.shape[-1] != self.dim:
            raise ShapeError(f"token dim {tokens_a.shape[-1]} != attention dim {self.dim}")
        bias = self.bias(self.bias.window if window is None else window)
        m_a = self.one_way(self.p_a, self.p_b, tokens_a, tokens_b, bias, mask, return_weights)
        m_b = self.one_way(self.p_b, self.p_a, tokens_b, tokens_a, bias, mask, return_weights)
        return m_a, m_b


def _check_geometry(a: WindowSet, b: WindowSet):
    if (a.window, a.origin_dims, a.shift) != (b.window, b.origin_dims, b.shift) or a.tokens.shape != b.tokens.shape:
        raise ShapeError("window sets differ in geometry")


def msa(ws: WindowSet, attn: WindowAttention, mask=None) -> WindowSet:
    return WindowSet(attn(ws.tokens, mask, ws.window), ws.window, ws.origin_dims, ws.shift)


def cm_msa(ws_a: WindowSet, ws_b: WindowSet, attn: CrossModalAttention, mask=None):
    _check_geometry(ws_a, ws_b)
    m_a, m_b = attn(ws_a.tokens, ws_b.tokens, mask, ws_a.window)
    return (WindowSet(m_a, ws_a.window, ws_a.origin_dims, ws_a.shift),
            WindowSet(m_b, ws_b.window, ws_b.origin_dims, ws_b.shift))


def windowed(fn, volumes: Sequence[torch.Tensor], window: int, shift: int):
    """Run token function ``fn(*token_sets, mask, window)`` over (shifted) windows.

    Inputs are channels-first volumes of one shape; outputs come back as
    volumes of the same shape. Padding is added after any normalisation and
    cropped afterwards.
    """
    dims = tuple(volumes[0].shape[2:])
    win, sh = resolve_window(dims, window, shift)
    padded = [pad_to_window(v, win)[0] for v in volumes]
    pdims = tuple(padded[0].shape[2:])
    mask = shift_mask(pdims, win, sh, device=volumes[0].device)
    if mask is not None:
        mask = mask.to(volumes[0].dtype)
    neg = tuple(-s for s in sh)
    sets = [window_partition(cyclic_shift(v, neg), win, sh) for v in padded]
    outs = fn(*[s.tokens for s in sets], mask=mask, window=win)
    if isinstance(outs, torch.Tensor):
        outs = (outs,)
    result = []
    for o in outs:
        vol = cyclic_shift(window_reverse(WindowSet(o, win, pdims, sh)), sh)
        result.append(vol[:, :, : dims[0], : dims[1], : dims[2]])
    return result


# ---------------------------------------------------------------------------
# feed-forward layers


class MBConv(nn.Module):
    """Inverted residual: 1^3 expand, depthwise 3^3, squeeze-excitation, 1^3 project.

    Operates on channels-first volumes; the residual lives in the caller.
    """

    def __init__(self, channels: int, expansion: int = 4, se_ratio: float = 0.25):
        super().__init__()
        hidden = channels * expansion
        squeeze = max(1, int(channels * se_ratio))
        self.channels = channels
        self.expand = nn.Conv3d(channels, hidden, 1)
        self.depthwise = nn.Conv3d(hidden, hidden, 3, padding=1, groups=hidden)
        self.se_reduce = nn.Conv3d(hidden, squeeze, 1)
        self.se_expand = nn.Conv3d(squeeze, hidden, 1)
        self.project = nn.Conv3d(hidden, channels, 1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if f.shape[1] != self.channels:
            raise ShapeError(f"MBConv expects {self.channels} channels, got {f.shape[1]}")
        h = F.silu(self.expand(f))
        h = F.silu(self.depthwise(h))
        s = F.adaptive_avg_pool3d(h, 1)
        s = torch.sigmoid(self.se_expand(F.silu(self.se_reduce(s))))
        return self.project(h * s)


class MLP(nn.Module):
    """Two-layer token MLP on channels-first volumes (the non-hybrid feed-forward)."""

    def __init__(self, channels: int, expansion: int = 4):
        super().__init__()
        self.channels = channels
        self.fc1 = nn.Linear(channels, channels * expansion)
        self.fc2 = nn.Linear(channels * expansion, channels)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if f.shape[1] != self.channels:
            raise ShapeError(f"MLP expects {self.channels} channels, got {f.shape[1]}")
        x = f.permute(0, 2, 3, 4, 1)
        return self.fc2(F.gelu(self.fc1(x))).permute(0, 4, 1, 2, 3)


def mbconv(f: torch.Tensor, block: MBConv) -> torch.Tensor:
    return block(f)
