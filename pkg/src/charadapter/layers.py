"""Shared transformer building blocks.

All blocks are dropout-free and deterministic; parameter initialization
always goes through an explicit torch.Generator so module construction
never touches global RNG state.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn


def trunc_normal_(tensor: torch.Tensor, std: float, generator: torch.Generator) -> torch.Tensor:
    """Truncated normal on [-2 std, 2 std] via inverse-CDF sampling."""
    with torch.no_grad():
        lo = math.erf(-2.0 / math.sqrt(2.0))
        hi = math.erf(2.0 / math.sqrt(2.0))
        u = torch.empty_like(tensor).uniform_(lo, hi, generator=generator)
        tensor.copy_(torch.erfinv(u) * math.sqrt(2.0) * std)
    return tensor


def xavier_uniform_(tensor: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    fan_in, fan_out = tensor.shape[1], tensor.shape[0]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=generator)
    return tensor


class MultiheadAttention(nn.Module):
    """Plain scaled dot-product attention; queries and keys/values may
    come from different streams (cross-attention) and widths."""

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"attention dim {dim} not divisible by heads {heads}")
        kv_dim = kv_dim if kv_dim is not None else dim
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5
        self.q_proj = nn.Linear(dim, dim)
        # a key bias shifts all scores of a query equally and cancels in
        # softmax; it would be an exactly-null parameter, so leave it out
        self.k_proj = nn.Linear(kv_dim, dim, bias=False)
        self.v_proj = nn.Linear(kv_dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, query: Tensor, kv: Tensor) -> Tensor:
        b, n, _ = query.shape
        m = kv.shape[1]
        q = self.q_proj(query).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(kv).view(b, m, self.heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(kv).view(b, m, self.heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, self.heads * self.head_dim)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * ratio)
        self.fc2 = nn.Linear(dim * ratio, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, dim: int, heads: int, ffn_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiheadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_ratio)

    def forward(self, x: Tensor) -> Tensor:
        y = self.norm1(x)
        x = x + self.attn(y, y)
        return x + self.ffn(self.norm2(x))


_POSITION_CACHE: dict[tuple[int, int, torch.dtype], Tensor] = {}
_FREQ_CACHE: dict[tuple[int, torch.dtype], Tensor] = {}


def position_features(grid: int, width: int, dtype: torch.dtype = torch.float32) -> Tensor:
    """Fixed 2D sinusoidal features over normalized patch-center coordinates.

    Using coordinates in (0, 1) rather than integer indices makes the
    features consistent across token-grid sizes, so the same encoder can
    run at several resolutions. Tables are cached; callers must not
    mutate them.
    """
    if width % 4 != 0:
        raise ValueError(f"position feature width must be divisible by 4, got {width}")
    key = (grid, width, dtype)
    if key not in _POSITION_CACHE:
        k = width // 4
        freqs = torch.exp(
            torch.linspace(math.log(2.0 * math.pi), math.log(2.0 * math.pi * 24.0), k, dtype=dtype)
        )
        centers = (torch.arange(grid, dtype=dtype) + 0.5) / grid
        angles = centers[:, None] * freqs[None, :]  # (grid, k)
        ax = angles[None, :, :].expand(grid, grid, k)  # varies along x
        ay = angles[:, None, :].expand(grid, grid, k)  # varies along y
        table = torch.cat([torch.sin(ax), torch.cos(ax), torch.sin(ay), torch.cos(ay)], dim=-1)
        _POSITION_CACHE[key] = table.reshape(grid * grid, width)
    return _POSITION_CACHE[key]


def timestep_features(t: Tensor, dim: int, dtype: torch.dtype = torch.float32) -> Tensor:
    """Sinusoidal features of timesteps in [0, 1], shape (B, dim)."""
    half = dim // 2
    key = (dim, dtype)
    if key not in _FREQ_CACHE:
        _FREQ_CACHE[key] = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=dtype) / max(half - 1, 1)
        )
    angles = t.to(dtype)[:, None] * 1000.0 * _FREQ_CACHE[key][None, :]
    feats = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if dim % 2 == 1:
        feats = torch.cat([feats, torch.zeros_like(feats[:, :1])], dim=-1)
    return feats


class TimestepEmbedder(nn.Module):
    """Sinusoidal timestep features refined by a two-layer MLP."""

    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, out_dim)
        self.fc2 = nn.Linear(out_dim, out_dim)

    def forward(self, t: Tensor) -> Tensor:
        dtype = self.fc1.weight.dtype
        return self.fc2(torch.nn.functional.silu(self.fc1(timestep_features(t, self.dim, dtype))))


def init_transformer_weights(module: nn.Module, generator: torch.Generator, std: float = 0.02) -> None:
    """Truncated-normal weights, zero biases; iterates parameters in sorted
    name order so initialization is independent of construction details."""
    params = dict(module.named_parameters())
    for name in sorted(params):
        p = params[name]
        if p.ndim >= 2:
            trunc_normal_(p, std, generator)
        else:
            with torch.no_grad():
                if name.endswith("weight"):  # LayerNorm scales
                    p.fill_(1.0)
                else:
                    p.zero_()
