"""Frozen vision encoders and their multi-level feature taps.

Two small vision transformers look at every reference image. The
"semantic" encoder is briefly trained on a 10-way character-identity
classification task before freezing, so its features separate who a
character is from how it is posed; the "structural" encoder keeps its
random initialization and acts as a fixed texture-sensitive projection.
Both expose a deep tap (final layer) and a shallow tap (middle layer),
and both can encode the full image or a grid of non-overlapping regions.
Feature streams from the two encoders are fused channel-wise.

Both encoders are strictly frozen: their parameters never receive
gradients and are checkpointed under the base partition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .config import EncoderConfig, RunConfig
from .images import resize_bilinear, to_chw
from .layers import EncoderBlock, init_transformer_weights, position_features
from .rng import seeded_rng, seeded_torch_generator

STREAM_TAGS = ("deep", "shallow", "region", "fused_channel", "fused_token", "context")


@dataclass(frozen=True)
class TokenSequence:
    """A T x D feature stream with a tag naming where it came from."""

    tokens: Tensor
    stream_tag: str

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1 or self.tokens.shape[1] < 1:
            raise ValueError(f"token sequence must be T x D with T,D >= 1, got {tuple(self.tokens.shape)}")
        if self.stream_tag not in STREAM_TAGS:
            raise ValueError(f"unknown stream tag {self.stream_tag!r}")
        if not torch.isfinite(self.tokens).all():
            raise ValueError("token sequence contains non-finite values")

    @property
    def count(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class EncoderTaps:
    """Deep and shallow token streams from one encoder pass."""

    deep: TokenSequence
    shallow: TokenSequence
    grid: int

    def __post_init__(self):
        if self.deep.tokens.shape != self.shallow.tokens.shape:
            raise ValueError("deep and shallow taps must share one shape")


class ToyEncoder(nn.Module):
    """A small ViT with frozen, seeded weights and a mid-depth tap.

    Patch embeddings get fixed 2D sinusoidal position features over
    normalized coordinates, so one encoder serves several resolutions and
    each region of a region grid is encoded exactly like a full image.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.width = cfg.width
        self.depth = cfg.depth
        self.shallow_layer = cfg.resolved_shallow_layer()
        self.patch_embed = nn.Conv2d(3, cfg.width, cfg.patch_size, stride=cfg.patch_size)
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.width, cfg.heads, cfg.ffn_ratio) for _ in range(cfg.depth)
        )
        self.final_norm = nn.LayerNorm(cfg.width)

    def reset_parameters(self, generator: torch.Generator) -> None:
        init_transformer_weights(self, generator)

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)

    def tokens(self, images: Tensor) -> tuple[Tensor, Tensor]:
        """Encode (B, 3, R, R) images; returns (deep, shallow) of shape
        (B, (R/patch)^2, width)."""
        resolution = images.shape[-1]
        if resolution % self.patch_size != 0:
            raise ValueError(
                f"resolution {resolution} not divisible by patch size {self.patch_size}"
            )
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        grid = resolution // self.patch_size
        x = x + position_features(grid, self.width, dtype=x.dtype)
        shallow = None
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            if i == self.shallow_layer:
                shallow = x
        return self.final_norm(x), shallow


def _prepare(image: np.ndarray, resolution: int, dtype: torch.dtype) -> Tensor:
    return resize_bilinear(to_chw(image, dtype), resolution, resolution).unsqueeze(0)


def encode_full(encoder: ToyEncoder, image: np.ndarray, resolution: int) -> EncoderTaps:
    """Resize the image to resolution x resolution and run the encoder."""
    dtype = next(encoder.parameters()).dtype
    with torch.no_grad():
        deep, shallow = encoder.tokens(_prepare(image, resolution, dtype))
    grid = resolution // encoder.patch_size
    return EncoderTaps(
        deep=TokenSequence(deep[0], "deep"),
        shallow=TokenSequence(shallow[0], "shallow"),
        grid=grid,
    )


def encode_regions(
    encoder: ToyEncoder, image: np.ndarray, grid: int, resolution: int
) -> TokenSequence:
    """Encode k x k non-overlapping regions and concatenate their deep
    tokens in row-major region order. With grid=1 this is exactly the
    deep tap of encode_full."""
    if grid < 1:
        raise ValueError("region grid must be >= 1")
    h, w = image.shape[0], image.shape[1]
    if h % grid != 0 or w % grid != 0:
        raise ValueError(f"image sides {h}x{w} not divisible by region grid {grid}")
    rh, rw = h // grid, w // grid
    pieces = []
    for i in range(grid):
        for j in range(grid):
            region = image[i * rh : (i + 1) * rh, j * rw : (j + 1) * rw]
            pieces.append(encode_full(encoder, region, resolution).deep.tokens)
    return TokenSequence(torch.cat(pieces, dim=0), "region")


def fuse_channelwise(semantic: TokenSequence, structural: TokenSequence) -> TokenSequence:
    """Concatenate two equal-length streams along the channel dimension;
    semantic channels come first and both inputs pass through unchanged."""
    if semantic.count != structural.count:
        raise ValueError(
            f"token counts differ: semantic {semantic.count} vs structural {structural.count}"
        )
    return TokenSequence(torch.cat([semantic.tokens, structural.tokens], dim=1), "fused_channel")


# -- encoder construction ----------------------------------------------------


def build_structural_encoder(cfg: EncoderConfig, seed: int) -> ToyEncoder:
    encoder = ToyEncoder(cfg)
    encoder.reset_parameters(seeded_torch_generator(seed, "encoder/structural/init"))
    encoder.freeze()
    encoder.eval()
    return encoder


def build_semantic_encoder(
    cfg: EncoderConfig,
    seed: int,
    resolution: int,
    identities: int = 10,
    views_per_identity: int = 60,
    learning_rate: float = 1e-3,
) -> ToyEncoder:
    """Seeded encoder, warmed up for one epoch of identity classification.

    A linear head over mean-pooled deep tokens classifies which of
    `identities` synthetic characters an image shows; one pass over the
    sprites pushes the deep features toward view-invariant identity
    information. The head is discarded and the encoder frozen.
    """
    from . import dataset as ds  # local import: dataset does not need encoders

    encoder = ToyEncoder(cfg)
    encoder.reset_parameters(seeded_torch_generator(seed, "encoder/semantic/init"))

    data_rng = seeded_rng(seed, "encoder/semantic/pretrain-data")
    identity_indices = data_rng.choice(ds.IDENTITY_SPACE, size=identities, replace=False)
    images, labels = [], []
    for label, identity_idx in enumerate(identity_indices):
        identity = ds.identity_from_index(int(identity_idx))
        view_indices = data_rng.choice(ds.VIEW_SPACE, size=views_per_identity, replace=False)
        for view_idx in view_indices:
            spec = ds.CharacterSpec(identity, ds.view_from_index(int(view_idx)))
            images.append(_prepare(ds.render(spec, 64), resolution, torch.float32)[0])
            labels.append(label)
    images_t = torch.stack(images)
    labels_t = torch.tensor(labels, dtype=torch.long)

    torch_gen = seeded_torch_generator(seed, "encoder/semantic/pretrain")
    head = nn.Linear(cfg.width, identities)
    init_transformer_weights(head, torch_gen)
    params = list(encoder.parameters()) + list(head.parameters())
    optimizer = torch.optim.AdamW(params, lr=learning_rate, weight_decay=0.01)

    order = torch.randperm(len(images_t), generator=torch_gen)
    batch = identities
    encoder.train()
    for start in range(0, len(order), batch):
        idx = order[start : start + batch]
        deep, _ = encoder.tokens(images_t[idx])
        logits = head(deep.mean(dim=1))
        loss = torch.nn.functional.cross_entropy(logits, labels_t[idx])
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

    encoder.freeze()
    encoder.eval()
    return encoder


def build_encoders(config: RunConfig) -> tuple[ToyEncoder, ToyEncoder]:
    semantic = build_semantic_encoder(
        config.semantic_encoder, config.seed, config.encoder_resolution
    )
    structural = build_structural_encoder(config.structural_encoder, config.seed)
    return semantic, structural
