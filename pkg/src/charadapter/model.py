"""Assembly of the full pipeline: encoders -> adapter -> backbone.

Also owns the canonical checkpoint naming scheme and the parameter
partition. Frozen pieces (both vision encoders and the backbone base)
live under ``encoder/*`` and ``dit/base/*``; trainable pieces (the
adapter and the injected cross-attention layers) under ``adapter/*`` and
``dit/adapter_xattn/*``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .adapter import CharacterAdapter, ContextTokens
from .backbone import ToyDiT
from .checkpoint import PARTITION_FROZEN, PARTITION_TRAINABLE, CheckpointArchive
from .config import RunConfig, config_to_text, parse_config_text
from .encoders import ToyEncoder, encode_full, encode_regions, fuse_channelwise
from .errors import DataError
from .rng import seeded_torch_generator

CONFIG_EXTRA_KEY = "config"


@dataclass(frozen=True)
class ReferenceStreams:
    """Channel-fused encoder taps for one reference image."""

    low: Tensor      # shallow taps, (T_full, D_sem + D_str)
    region: Tensor   # region-grid deep taps, (k^2 * T_full, D_sem + D_str)
    high: Tensor     # deep taps, (T_full, D_sem + D_str)


class CharacterGenerator(nn.Module):
    """Frozen backbone plus the trainable character adapter."""

    def __init__(self, config: RunConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.semantic_encoder = ToyEncoder(config.semantic_encoder)
        self.structural_encoder = ToyEncoder(config.structural_encoder)
        fused_dim = config.semantic_encoder.width + config.structural_encoder.width
        self.adapter = CharacterAdapter(config.adapter, fused_dim)
        self.backbone = ToyDiT(config.backbone, config.adapter.context_dim)

    # -- reference encoding ---------------------------------------------

    def encode_reference(self, image: np.ndarray) -> ReferenceStreams:
        """Run both frozen encoders over one reference image and fuse the
        matching taps channel-wise."""
        res = self.config.encoder_resolution
        grid = self.config.adapter.region_grid
        sem = encode_full(self.semantic_encoder, image, res)
        strc = encode_full(self.structural_encoder, image, res)
        sem_regions = encode_regions(self.semantic_encoder, image, grid, res)
        str_regions = encode_regions(self.structural_encoder, image, grid, res)
        return ReferenceStreams(
            low=fuse_channelwise(sem.shallow, strc.shallow).tokens,
            region=fuse_channelwise(sem_regions, str_regions).tokens,
            high=fuse_channelwise(sem.deep, strc.deep).tokens,
        )

    def context_tokens(self, image: np.ndarray, t: float) -> ContextTokens:
        """Full single-image conditioning pipeline at one timestep."""
        streams = self.encode_reference(image)
        out = self.adapter(
            streams.low.unsqueeze(0),
            streams.region.unsqueeze(0),
            streams.high.unsqueeze(0),
            torch.as_tensor([float(t)], dtype=streams.low.dtype),
        )
        return ContextTokens(out[0])

    # -- parameter bookkeeping --------------------------------------------

    def named_checkpoint_parameters(self) -> dict[str, nn.Parameter]:
        out: dict[str, nn.Parameter] = {}
        for prefix, module in (
            ("encoder/semantic", self.semantic_encoder),
            ("encoder/structural", self.structural_encoder),
            ("adapter", self.adapter),
            ("dit", self.backbone),
        ):
            for name, param in module.named_parameters():
                out[_checkpoint_name(prefix, name)] = param
        return out

    def partition_names(self) -> tuple[set[str], set[str]]:
        """(frozen, trainable) checkpoint names; disjoint and exhaustive."""
        frozen, trainable = set(), set()
        for name in self.named_checkpoint_parameters():
            if name.startswith(("adapter/", "dit/adapter_xattn/")):
                trainable.add(name)
            else:
                frozen.add(name)
        return frozen, trainable

    def trainable_parameters(self) -> dict[str, nn.Parameter]:
        params = self.named_checkpoint_parameters()
        _, trainable = self.partition_names()
        return {name: params[name] for name in sorted(trainable)}

    def freeze_base(self) -> None:
        """Freeze both encoders and the backbone base partition."""
        frozen, _ = self.partition_names()
        params = self.named_checkpoint_parameters()
        for name in frozen:
            params[name].requires_grad_(False)

    def initialize(self) -> None:
        """Seeded init of adapter and backbone. Encoder weights must be
        installed separately (built or loaded); see build_model."""
        self.adapter.reset_parameters(seeded_torch_generator(self.config.seed, "adapter/init"))
        self.backbone.reset_parameters(seeded_torch_generator(self.config.seed, "backbone/init"))

    # -- archive round-trip ------------------------------------------------

    def to_archive(self) -> CheckpointArchive:
        archive = CheckpointArchive()
        params = self.named_checkpoint_parameters()
        frozen, _ = self.partition_names()
        for name in sorted(params):
            tag = PARTITION_FROZEN if name in frozen else PARTITION_TRAINABLE
            archive.add(name, params[name].detach().numpy().copy(), tag)
        archive.extras[CONFIG_EXTRA_KEY] = config_to_text(self.config)
        return archive

    def load_from_archive(self, archive: CheckpointArchive) -> None:
        params = self.named_checkpoint_parameters()
        missing = sorted(set(params) - set(archive.entries))
        if missing:
            raise DataError(f"checkpoint is missing {len(missing)} tensors, e.g. {missing[0]}")
        with torch.no_grad():
            for name, param in params.items():
                value = archive.entries[name]
                if tuple(value.shape) != tuple(param.shape):
                    raise DataError(
                        f"checkpoint tensor {name} has shape {value.shape}, "
                        f"model expects {tuple(param.shape)}"
                    )
                param.copy_(torch.from_numpy(np.ascontiguousarray(value)))


def _checkpoint_name(prefix: str, torch_name: str) -> str:
    parts = torch_name.split(".")
    if prefix == "dit":
        if parts[0] == "blocks":
            block = f"block{parts[1]}"
            if parts[2] == "adapter_attn":
                return "/".join(["dit/adapter_xattn", block] + parts[3:])
            return "/".join(["dit/base", block] + parts[2:])
        return "/".join(["dit/base"] + parts)
    return "/".join([prefix] + parts)


def build_model(config: RunConfig, initialize: bool = True) -> CharacterGenerator:
    """Construct the full pipeline.

    With ``initialize=True`` the encoders are built (including the
    semantic encoder's identity-classification warm-up) and the adapter
    and backbone get their seeded init. With ``initialize=False`` the
    caller is expected to install weights from a checkpoint.
    """
    model = CharacterGenerator(config)
    if initialize:
        from .encoders import build_encoders  # deferred: triggers sprite rendering

        semantic, structural = build_encoders(config)
        model.semantic_encoder.load_state_dict(semantic.state_dict())
        model.structural_encoder.load_state_dict(structural.state_dict())
        model.initialize()
    for encoder in (model.semantic_encoder, model.structural_encoder):
        for p in encoder.parameters():
            p.requires_grad_(False)
        encoder.eval()
    return model


def model_from_archive(archive: CheckpointArchive) -> CharacterGenerator:
    """Rebuild a model from a checkpoint's embedded config and tensors."""
    text = archive.extras.get(CONFIG_EXTRA_KEY)
    if text is None:
        raise DataError("checkpoint carries no embedded run config")
    config = parse_config_text(text, source="<checkpoint config>")
    model = build_model(config, initialize=False)
    model.load_from_archive(archive)
    model.freeze_base()
    return model
