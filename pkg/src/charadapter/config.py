"""Run configuration schema and the strict key-value config file format.

Config files are flat text with dotted hierarchical keys::

    # comment
    seed = 7
    encoder_resolution = 32
    stage1.steps = 1000
    adapter.num_queries = 16

Unknown keys are a hard error: a silent typo in a stage config is the most
likely way to corrupt an experiment, so nothing is ignored.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError


@dataclass
class EncoderConfig:
    """Shape of one frozen vision transformer."""

    patch_size: int = 8
    depth: int = 4
    width: int = 48
    heads: int = 4
    ffn_ratio: int = 4
    shallow_layer: int = 0  # 0 means "use depth // 2, at least 1"

    def resolved_shallow_layer(self) -> int:
        if self.shallow_layer > 0:
            return self.shallow_layer
        return max(1, self.depth // 2)

    def validate(self, name: str) -> None:
        if self.width % self.heads != 0:
            raise DataError(f"{name}: width {self.width} not divisible by heads {self.heads}")
        if not (1 <= self.resolved_shallow_layer() < self.depth):
            raise DataError(f"{name}: shallow_layer must lie in [1, depth)")


@dataclass
class AdapterConfig:
    """Shape of the trainable reference adapter."""

    width: int = 96           # working width of the intermediate encoders
    heads: int = 4
    intermediate_depth: int = 2
    ffn_ratio: int = 4
    max_tokens: int = 1280    # capacity of the learned position table
    num_queries: int = 16
    qformer_depth: int = 2
    context_dim: int = 64
    region_grid: int = 2      # k: reference image is split into k x k regions

    def validate(self) -> None:
        if self.width % self.heads != 0:
            raise DataError(f"adapter: width {self.width} not divisible by heads {self.heads}")
        if self.num_queries < 1:
            raise DataError("adapter: num_queries must be >= 1")
        if self.region_grid < 1:
            raise DataError("adapter: region_grid must be >= 1")


@dataclass
class BackboneConfig:
    """Shape of the denoising transformer."""

    patch_size: int = 4
    width: int = 128
    depth: int = 4
    heads: int = 4
    ffn_ratio: int = 4
    time_dim: int = 128
    vocab_size: int = 64

    def validate(self) -> None:
        if self.width % self.heads != 0:
            raise DataError(f"backbone: width {self.width} not divisible by heads {self.heads}")


@dataclass
class PretrainConfig:
    """Text-to-image pretraining of the backbone, before it is frozen."""

    steps: int = 3000
    batch_size: int = 16
    learning_rate: float = 3e-4
    high_res_fraction: float = 0.25
    drop_text_prob: float = 0.1


@dataclass
class StageConfig:
    """One stage of the progressive adapter curriculum."""

    stage_id: int
    resolution: int
    paired_weight: float
    unpaired_weight: float
    steps: int
    batch_size: int = 8
    learning_rate: float = 1e-4
    drop_character_prob: float = 0.1
    drop_text_prob: float = 0.1

    def validate(self, low_res: int, high_res: int) -> None:
        if self.stage_id not in (1, 2, 3):
            raise DataError(f"stage_id must be 1, 2 or 3, got {self.stage_id}")
        if self.stage_id == 1 and not (self.unpaired_weight == 1.0 and self.paired_weight == 0.0):
            raise DataError("stage 1 must use unpaired data only (unpaired_weight 1.0)")
        if self.stage_id == 2 and not (self.paired_weight == 1.0 and self.unpaired_weight == 0.0):
            raise DataError("stage 2 must use paired data only (paired_weight 1.0)")
        if self.stage_id == 3 and not (self.paired_weight > 0.0 and self.unpaired_weight > 0.0):
            raise DataError("stage 3 must mix both subsets (both weights > 0)")
        expected = high_res if self.stage_id == 3 else low_res
        if self.resolution != expected:
            raise DataError(
                f"stage {self.stage_id} resolution must be {expected}, got {self.resolution}"
            )
        if self.steps < 0 or self.batch_size < 1:
            raise DataError(f"stage {self.stage_id}: bad steps/batch_size")
        for p in (self.drop_character_prob, self.drop_text_prob):
            if not 0.0 <= p <= 1.0:
                raise DataError(f"stage {self.stage_id}: dropout probs must lie in [0,1]")


def _default_stages() -> list[StageConfig]:
    return [
        StageConfig(stage_id=1, resolution=32, paired_weight=0.0, unpaired_weight=1.0, steps=1000),
        StageConfig(stage_id=2, resolution=32, paired_weight=1.0, unpaired_weight=0.0, steps=1000),
        StageConfig(stage_id=3, resolution=64, paired_weight=0.5, unpaired_weight=0.5, steps=300),
    ]


@dataclass
class RunConfig:
    """Everything a run needs; one seed makes the whole run reproducible."""

    seed: int = 7
    encoder_resolution: int = 384
    toy_low_resolution: int = 32
    toy_high_resolution: int = 64
    sample_steps: int = 16
    num_threads: int = 1
    semantic_encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(width=48))
    structural_encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(width=32))
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    stages: list[StageConfig] = field(default_factory=_default_stages)

    @classmethod
    def desk_default(cls) -> "RunConfig":
        """The desk-scale preset used by the CLI and the test suite.

        Reference images are encoded at 32 px here; the schema default of
        384 matches full-size vision encoders but is far too slow for the
        toy curriculum's runtime budget on a laptop CPU.
        """
        return cls(encoder_resolution=32)

    def validate(self) -> None:
        if self.seed < 0:
            raise DataError("seed must be non-negative")
        if self.encoder_resolution <= 0:
            raise DataError("encoder_resolution must be positive")
        if self.toy_high_resolution != 2 * self.toy_low_resolution:
            raise DataError("toy_high_resolution must equal 2 * toy_low_resolution")
        if self.sample_steps < 1:
            raise DataError("sample_steps must be >= 1")
        self.semantic_encoder.validate("semantic_encoder")
        self.structural_encoder.validate("structural_encoder")
        self.adapter.validate()
        self.backbone.validate()
        if [s.stage_id for s in self.stages] != [1, 2, 3]:
            raise DataError("stages must be configured in order 1, 2, 3")
        for stage in self.stages:
            stage.validate(self.toy_low_resolution, self.toy_high_resolution)

    def stage(self, stage_id: int) -> StageConfig:
        for s in self.stages:
            if s.stage_id == stage_id:
                return s
        raise DataError(f"no stage {stage_id} configured")


# -- config file format ------------------------------------------------------

_SECTIONS = {
    "semantic_encoder": EncoderConfig,
    "structural_encoder": EncoderConfig,
    "adapter": AdapterConfig,
    "backbone": BackboneConfig,
    "pretrain": PretrainConfig,
    "stage1": StageConfig,
    "stage2": StageConfig,
    "stage3": StageConfig,
}

_TOP_LEVEL_KEYS = (
    "seed",
    "encoder_resolution",
    "toy_low_resolution",
    "toy_high_resolution",
    "sample_steps",
    "num_threads",
)

# stage_id/resolution are derived from the section name and the run, not set
# directly; rejecting them keeps one source of truth.
_STAGE_FILE_KEYS = (
    "paired_weight",
    "unpaired_weight",
    "steps",
    "batch_size",
    "learning_rate",
    "drop_character_prob",
    "drop_text_prob",
)


def _parse_scalar(raw: str, kind: type, key: str):
    raw = raw.strip()
    try:
        if kind is int:
            value = int(raw, 0)
        elif kind is float:
            value = float(raw)
        else:
            raise DataError(f"config key '{key}' has unsupported type {kind!r}")
    except ValueError as exc:
        raise DataError(f"config key '{key}': cannot parse {raw!r} as {kind.__name__}") from exc
    return value


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    """Parse config text into a RunConfig, starting from the desk preset.

    Raises DataError on syntax errors, unknown keys, duplicate keys, or
    values that violate the schema invariants.
    """
    config = RunConfig.desk_default()
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise DataError(f"{source}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw_value = stripped.partition("=")
        key = key.strip()
        if key in seen:
            raise DataError(f"{source}:{lineno}: duplicate key '{key}'")
        seen.add(key)
        _apply_key(config, key, raw_value, f"{source}:{lineno}")
    config.validate()
    return config


def _apply_key(config: RunConfig, key: str, raw_value: str, where: str) -> None:
    parts = key.split(".")
    if len(parts) == 1:
        if key not in _TOP_LEVEL_KEYS:
            raise DataError(
                f"{where}: unknown key '{key}' (valid top-level keys: "
                f"{', '.join(_TOP_LEVEL_KEYS)}; sections: {', '.join(_SECTIONS)})"
            )
        kind = type(getattr(config, key))
        setattr(config, key, _parse_scalar(raw_value, kind, key))
        return
    if len(parts) != 2:
        raise DataError(f"{where}: key '{key}' nests too deeply (one dot max)")
    section, name = parts
    if section not in _SECTIONS:
        raise DataError(f"{where}: unknown section '{section}' (valid: {', '.join(_SECTIONS)})")
    if section.startswith("stage"):
        if name not in _STAGE_FILE_KEYS:
            raise DataError(
                f"{where}: unknown key '{name}' in section '{section}' "
                f"(valid: {', '.join(_STAGE_FILE_KEYS)})"
            )
        target = config.stage(int(section[-1]))
    else:
        target = getattr(config, section)
        valid = [f.name for f in dataclasses.fields(target)]
        if name not in valid:
            raise DataError(
                f"{where}: unknown key '{name}' in section '{section}' (valid: {', '.join(valid)})"
            )
    kind = type(getattr(target, name))
    setattr(target, name, _parse_scalar(raw_value, kind, key))


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), source=str(path))


def config_to_text(config: RunConfig) -> str:
    """Serialize a RunConfig to the config file format (stable key order)."""
    lines = [f"{key} = {getattr(config, key)}" for key in _TOP_LEVEL_KEYS]
    for section in ("semantic_encoder", "structural_encoder", "adapter", "backbone", "pretrain"):
        target = getattr(config, section)
        for f in dataclasses.fields(target):
            lines.append(f"{section}.{f.name} = {getattr(target, f.name)}")
    for stage in config.stages:
        for name in _STAGE_FILE_KEYS:
            lines.append(f"stage{stage.stage_id}.{name} = {getattr(stage, name)}")
    return "\n".join(lines) + "\n"


def config_hash(config: RunConfig) -> str:
    """Stable content hash used in reproducibility stamps."""
    return hashlib.sha256(config_to_text(config).encode("utf-8")).hexdigest()[:16]
