"""The denoising transformer and its flow-matching construction.

A small transformer over pixel patches predicts the velocity of the
straight path between data and noise: with t=0 at data and t=1 at noise,
states interpolate as x_t = (1-t) x0 + t eps and the regression target
is the constant velocity eps - x0. Sampling integrates the learned field
from t=1 to t=0 with plain Euler steps.

Each block runs self-attention over image tokens, cross-attention to
caption token embeddings, an optional cross-attention to adapter context
tokens, and a feed-forward, every sublayer modulated from the timestep
embedding through adaptive layer norm. The adapter cross-attention's
output projection is initialized to exactly zero, so a freshly wired-in
adapter cannot perturb the backbone; its contribution enters additively
as hidden += scale * attn(hidden, context) and a scale of zero skips the
branch entirely.

Captions enter as a bag of token embeddings from the fixed vocabulary:
no positional encoding, no pretrained text tower.

Image-token positions are fixed sinusoidal features over normalized
coordinates, so one backbone serves both the low and high resolution.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import Tensor, nn

from .config import BackboneConfig
from .layers import (
    FeedForward,
    MultiheadAttention,
    TimestepEmbedder,
    position_features,
    timestep_features,
    xavier_uniform_,
)


def interpolate(x0: Tensor, eps: Tensor, t: Tensor) -> tuple[Tensor, Tensor]:
    """Linear path state and velocity target.

    x0, eps: (B, ...) with identical shapes; t: (B,) in [0, 1].
    Returns (x_t, v_target) with x_t = (1-t) x0 + t eps, v_target = eps - x0.
    """
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    if t.ndim != 1 or t.shape[0] != x0.shape[0]:
        raise ValueError("t must be one timestep per batch element")
    if not torch.isfinite(t).all() or (t < 0).any() or (t > 1).any():
        raise ValueError("timesteps must lie in [0, 1]")
    t_wide = t.view(-1, *([1] * (x0.ndim - 1))).to(x0.dtype)
    return (1.0 - t_wide) * x0 + t_wide * eps, eps - x0


class _Modulation(nn.Module):
    """Timestep-conditioned layer norm: shift/scale (+ optional gate)."""

    def __init__(self, dim: int, time_dim: int, gated: bool):
        super().__init__()
        self.gated = gated
        self.norm = nn.LayerNorm(dim, elementwise_affine=False)
        self.proj = nn.Linear(time_dim, dim * (3 if gated else 2))

    def forward(self, x: Tensor, t_emb: Tensor) -> tuple[Tensor, Tensor | None]:
        parts = self.proj(torch.nn.functional.silu(t_emb)).chunk(3 if self.gated else 2, dim=-1)
        shift, scale = parts[0].unsqueeze(1), parts[1].unsqueeze(1)
        gate = parts[2].unsqueeze(1) if self.gated else None
        return self.norm(x) * (1.0 + scale) + shift, gate


class AdapterCrossAttention(nn.Module):
    """The learnable injection branch consuming adapter context tokens."""

    def __init__(self, dim: int, heads: int, context_dim: int, time_dim: int):
        super().__init__()
        self.mod = _Modulation(dim, time_dim, gated=False)
        self.attn = MultiheadAttention(dim, heads, kv_dim=context_dim)

    def forward(self, x: Tensor, context: Tensor, t_emb: Tensor) -> Tensor:
        y, _ = self.mod(x, t_emb)
        return self.attn(y, context)


class DiTBlock(nn.Module):
    def __init__(self, cfg: BackboneConfig, context_dim: int):
        super().__init__()
        dim, heads, td = cfg.width, cfg.heads, cfg.time_dim
        self.mod_sa = _Modulation(dim, td, gated=True)
        self.self_attn = MultiheadAttention(dim, heads)
        self.mod_text = _Modulation(dim, td, gated=True)
        self.text_attn = MultiheadAttention(dim, heads)
        self.adapter_attn = AdapterCrossAttention(dim, heads, context_dim, td)
        self.mod_ffn = _Modulation(dim, td, gated=True)
        self.ffn = FeedForward(dim, cfg.ffn_ratio)

    def forward(
        self,
        x: Tensor,
        t_emb: Tensor,
        text: Tensor,
        context: Tensor | None,
        scale: float,
        context_gate: Tensor | None,
    ) -> Tensor:
        y, gate = self.mod_sa(x, t_emb)
        x = x + gate * self.self_attn(y, y)
        y, gate = self.mod_text(x, t_emb)
        x = x + gate * self.text_attn(y, text)
        if context is not None and scale != 0.0:
            branch = self.adapter_attn(x, context, t_emb)
            if context_gate is not None:
                branch = branch * context_gate.view(-1, 1, 1)
            x = x + scale * branch
        y, gate = self.mod_ffn(x, t_emb)
        return x + gate * self.ffn(y)


class ToyDiT(nn.Module):
    """Patch-space rectified-flow transformer with an adapter seam."""

    def __init__(self, cfg: BackboneConfig, context_dim: int):
        super().__init__()
        self.cfg = cfg
        self.patch_size = cfg.patch_size
        self.width = cfg.width
        self.patch_embed = nn.Conv2d(3, cfg.width, cfg.patch_size, stride=cfg.patch_size)
        self.text_embed = nn.Embedding(cfg.vocab_size, cfg.width)
        self.time_embed = TimestepEmbedder(cfg.time_dim, cfg.time_dim)
        self.blocks = nn.ModuleList(DiTBlock(cfg, context_dim) for _ in range(cfg.depth))
        self.final_mod = _Modulation(cfg.width, cfg.time_dim, gated=False)
        self.head = nn.Linear(cfg.width, cfg.patch_size * cfg.patch_size * 3)

    def reset_parameters(self, generator: torch.Generator) -> None:
        """Seeded init: xavier linear weights, zero biases, zero-init
        modulation projections and output head, and an exactly zero
        adapter output projection in every block."""
        params = dict(self.named_parameters())
        for name in sorted(params):
            p = params[name]
            with torch.no_grad():
                if ".mod" in name or "final_mod" in name or name.startswith("head."):
                    p.zero_()
                elif name == "text_embed.weight":
                    p.normal_(0.0, 0.02, generator=generator)
                elif name.endswith("adapter_attn.attn.out_proj.weight"):
                    p.zero_()
                elif p.ndim >= 2:
                    xavier_uniform_(p.view(p.shape[0], -1), generator)
                else:
                    p.zero_()

    def patchify(self, x: Tensor) -> Tensor:
        return self.patch_embed(x).flatten(2).transpose(1, 2)

    def unpatchify(self, tokens: Tensor, resolution: int) -> Tensor:
        b = tokens.shape[0]
        p = self.patch_size
        g = resolution // p
        x = tokens.view(b, g, g, p, p, 3)
        return x.permute(0, 5, 1, 3, 2, 4).reshape(b, 3, resolution, resolution)

    def forward(
        self,
        x_t: Tensor,
        t: Tensor,
        text_tokens: Tensor,
        context: Tensor | None = None,
        scale: float = 1.0,
        context_gate: Tensor | None = None,
    ) -> Tensor:
        """Predict the velocity field.

        x_t: (B, 3, H, W); t: (B,); text_tokens: (B, L) int64 ids;
        context: (B, num_queries, context_dim) or None; scale gates the
        adapter branch globally, context_gate per sample.
        """
        if x_t.shape[-1] % self.patch_size or x_t.shape[-2] % self.patch_size:
            raise ValueError(f"image sides must be divisible by patch size {self.patch_size}")
        if not np.isfinite(scale):
            raise ValueError("adapter scale must be finite")
        if text_tokens.min() < 0 or text_tokens.max() >= self.cfg.vocab_size:
            raise ValueError(
                f"unknown token id in {text_tokens.min().item()}..{text_tokens.max().item()} "
                f"(vocabulary size {self.cfg.vocab_size})"
            )
        resolution = x_t.shape[-1]
        grid = resolution // self.patch_size
        x = self.patchify(x_t)
        x = x + position_features(grid, self.width, dtype=x.dtype)
        t_emb = self.time_embed(t)
        text = self.text_embed(text_tokens)
        for block in self.blocks:
            x = block(x, t_emb, text, context, scale, context_gate)
        x, _ = self.final_mod(x, t_emb)
        return self.unpatchify(self.head(x), resolution)

    def partition_parameters(self) -> tuple[set[str], set[str]]:
        """Disjoint, exhaustive split of parameter names into the frozen
        base and the trainable injected cross-attention layers."""
        frozen, trainable = set(), set()
        for name, _ in self.named_parameters():
            (trainable if ".adapter_attn." in name else frozen).add(name)
        return frozen, trainable


def sample(
    model: ToyDiT,
    text_tokens: Tensor,
    context: Tensor | None,
    steps: int,
    scale: float,
    rng: torch.Generator,
    resolution: int,
) -> np.ndarray:
    """Euler-integrate the velocity field from seeded noise at t=1 down to
    t=0; returns an H x W x 3 image clamped to [0, 1]."""
    if steps < 1:
        raise ValueError("sampling needs at least one step")
    if text_tokens.ndim == 1:
        text_tokens = text_tokens.unsqueeze(0)
    if context is not None and context.ndim == 2:
        context = context.unsqueeze(0)
    dt = 1.0 / steps
    with torch.no_grad():
        x = torch.randn(1, 3, resolution, resolution, generator=rng)
        for i in range(steps):
            t = torch.full((1,), 1.0 - i * dt)
            v = model(x, t, text_tokens, context, scale)
            x = x - dt * v
        out = x.clamp_(0.0, 1.0)[0]
    return out.permute(1, 2, 0).numpy().astype(np.float32)


# re-exported for gradient-check configuration
__all__ = [
    "AdapterCrossAttention",
    "DiTBlock",
    "ToyDiT",
    "interpolate",
    "sample",
    "timestep_features",
]
