"""The trainable reference adapter.

Two intermediate transformer encoders refine the low-level (shallow-tap)
and region-level feature pathways, each jointly with the high-level
stream: pathway and high-level tokens are concatenated along the token
dimension, projected to the adapter width, and self-attended. The two
refined streams are then concatenated along the token dimension and
compressed by a timestep-aware query head: a fixed set of learnable query
tokens cross-attends to the fused stream (as keys/values, with no
positional encoding, so the head is invariant to key order) and is
conditioned on the denoising timestep through an additive embedding.

The output is always num_queries x context_dim, independent of reference
resolution or region count.

Position handling is deliberately asymmetric: the intermediate encoders
add learned position embeddings (zero-initialized) after their input
projection, so region order is representable upstream, while the query
head sees none, which gives it a clean permutation-invariance property.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .config import AdapterConfig
from .encoders import TokenSequence
from .layers import (
    EncoderBlock,
    FeedForward,
    MultiheadAttention,
    TimestepEmbedder,
    init_transformer_weights,
)


@dataclass(frozen=True)
class ContextTokens:
    """Fixed-size conditioning tokens handed to the backbone."""

    tokens: Tensor  # (num_queries, context_dim)

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ValueError(f"context tokens must be N x D, got {tuple(self.tokens.shape)}")
        if not torch.isfinite(self.tokens).all():
            raise ValueError("context tokens contain non-finite values")


class IntermediateEncoder(nn.Module):
    """Refines one pathway against the high-level stream."""

    def __init__(self, cfg: AdapterConfig, input_dim: int):
        super().__init__()
        self.width = cfg.width
        self.input_dim = input_dim
        self.max_tokens = cfg.max_tokens
        self.input_proj = nn.Linear(input_dim, cfg.width)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.max_tokens, cfg.width))
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.width, cfg.heads, cfg.ffn_ratio)
            for _ in range(cfg.intermediate_depth)
        )

    def forward(self, pathway: Tensor, highlevel: Tensor) -> Tensor:
        """(B, Tp, Din) + (B, Th, Din) -> (B, Tp + Th, width); pathway
        positions come first in the output."""
        if pathway.shape[-1] != highlevel.shape[-1]:
            raise ValueError(
                f"pathway width {pathway.shape[-1]} != highlevel width {highlevel.shape[-1]}"
            )
        if pathway.shape[-1] != self.input_dim:
            raise ValueError(f"expected input width {self.input_dim}, got {pathway.shape[-1]}")
        x = torch.cat([pathway, highlevel], dim=1)
        if x.shape[1] > self.max_tokens:
            raise ValueError(f"{x.shape[1]} tokens exceed position table ({self.max_tokens})")
        x = self.input_proj(x)
        if self.blocks:
            x = x + self.pos_embed[: x.shape[1]]
            for block in self.blocks:
                x = block(x)
        return x


class QFormerBlock(nn.Module):
    """Cross-attention from queries to the fused stream, then a
    feed-forward, both pre-norm residual. Keys/values are used raw."""

    def __init__(self, dim: int, heads: int, ffn_ratio: int):
        super().__init__()
        self.norm_attn = nn.LayerNorm(dim)
        self.cross_attn = MultiheadAttention(dim, heads)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_ratio)

    def forward(self, queries: Tensor, kv: Tensor) -> Tensor:
        queries = queries + self.cross_attn(self.norm_attn(queries), kv)
        return queries + self.ffn(self.norm_ffn(queries))


class QFormerHead(nn.Module):
    """Timestep-aware learnable-query projection head."""

    def __init__(self, cfg: AdapterConfig):
        super().__init__()
        self.width = cfg.width
        self.num_queries = cfg.num_queries
        self.context_dim = cfg.context_dim
        self.queries = nn.Parameter(torch.zeros(cfg.num_queries, cfg.width))
        self.time_embed = TimestepEmbedder(cfg.width, cfg.width)
        self.blocks = nn.ModuleList(
            QFormerBlock(cfg.width, cfg.heads, cfg.ffn_ratio) for _ in range(cfg.qformer_depth)
        )
        self.out_proj = nn.Linear(cfg.width, cfg.context_dim)

    def forward(self, fused: Tensor, t: Tensor) -> Tensor:
        """(B, T, width) + (B,) timesteps -> (B, num_queries, context_dim)."""
        if fused.shape[-1] != self.width:
            raise ValueError(f"fused width {fused.shape[-1]} != head width {self.width}")
        _check_timesteps(t)
        q = self.queries.unsqueeze(0) + self.time_embed(t).unsqueeze(1)
        for block in self.blocks:
            q = block(q, fused)
        return self.out_proj(q)


def _check_timesteps(t: Tensor) -> None:
    if not torch.isfinite(t).all() or (t < 0).any() or (t > 1).any():
        raise ValueError("timesteps must lie in [0, 1]")


class CharacterAdapter(nn.Module):
    """Bundles the two intermediate encoders and the query head."""

    def __init__(self, cfg: AdapterConfig, input_dim: int):
        super().__init__()
        self.cfg = cfg
        self.intermediate_low = IntermediateEncoder(cfg, input_dim)
        self.intermediate_region = IntermediateEncoder(cfg, input_dim)
        self.qformer = QFormerHead(cfg)

    def reset_parameters(self, generator: torch.Generator) -> None:
        init_transformer_weights(self, generator)
        with torch.no_grad():
            # queries are plain normal, position tables start at zero
            self.qformer.queries.normal_(0.0, 0.02, generator=generator)
            self.intermediate_low.pos_embed.zero_()
            self.intermediate_region.pos_embed.zero_()

    def forward(self, low: Tensor, region: Tensor, high: Tensor, t: Tensor) -> Tensor:
        """Full batched pipeline from fused encoder streams to context
        tokens: refine both pathways, fuse along tokens, project."""
        low_refined = self.intermediate_low(low, high)
        region_refined = self.intermediate_region(region, high)
        fused = torch.cat([low_refined, region_refined], dim=1)
        return self.qformer(fused, t)


# -- single-sequence operations ----------------------------------------------


def refine_pathway(
    enc: IntermediateEncoder, pathway: TokenSequence, highlevel: TokenSequence
) -> TokenSequence:
    """Refine one pathway jointly with the high-level stream; returns all
    refined tokens, pathway positions first."""
    out = enc(pathway.tokens.unsqueeze(0), highlevel.tokens.unsqueeze(0))
    return TokenSequence(out[0], "fused_token")


def fuse_pathways(low_refined: TokenSequence, region_refined: TokenSequence) -> TokenSequence:
    """Concatenate the two refined streams along the token dimension,
    low stream first, both unchanged."""
    if low_refined.width != region_refined.width:
        raise ValueError(
            f"stream widths differ: {low_refined.width} vs {region_refined.width}"
        )
    return TokenSequence(
        torch.cat([low_refined.tokens, region_refined.tokens], dim=0), "fused_token"
    )


def project(head: QFormerHead, fused: TokenSequence, t: float) -> ContextTokens:
    """Compress a fused stream into fixed-size context tokens at one
    denoising timestep."""
    t_tensor = torch.as_tensor([float(t)], dtype=fused.tokens.dtype)
    out = head(fused.tokens.unsqueeze(0), t_tensor)
    return ContextTokens(out[0])
