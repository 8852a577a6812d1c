"""Training: backbone pretraining and the three-stage adapter curriculum.

Stage 1 trains the adapter on unpaired low-resolution data, where the
reference image conditions its own reconstruction. Stage 2 switches to
paired low-resolution data: the reference is one view, the target a
different view described by the caption, which forces the model to stop
copying the reference and listen to the text. Stage 3 is a short
high-resolution phase mixing both subsets.

Only the trainable partition (adapter + injected cross-attention) is ever
updated during the curriculum; the frozen partition is asserted bitwise
unchanged by the test suite. The optimizer is a decoupled-weight-decay
Adam kept as named state tensors so checkpoints capture training exactly:
save, reload and continue reproduces an uninterrupted run bit for bit.
Optimizer moments are carried across stage transitions.

RNG accounting is pinned so resumes replay the identical draw sequence.
Per step, the data stream draws: subset choice, batch indices, character
dropout, text dropout; the noise stream draws: timesteps, then noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import Tensor

from .backbone import interpolate
from .checkpoint import (
    PARTITION_TRAINABLE,
    CheckpointArchive,
    load_checkpoint,
    save_checkpoint,
)
from .config import RunConfig, StageConfig
from .dataset import DatasetManifest, ManifestRecord, resolve_image_path
from .errors import DataError, NumericalError
from .images import load_png, to_chw
from .model import CharacterGenerator, ReferenceStreams, model_from_archive
from .rng import seeded_torch_generator
from .vocab import NULL_ID

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
WEIGHT_DECAY = 0.01

_PROGRESS_KEY = "state/progress"
_RNG_DATA_KEY = "state/rng/data"
_RNG_NOISE_KEY = "state/rng/noise"


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor]):
        self.exp_avg = {n: torch.zeros_like(p) for n, p in params.items()}
        self.exp_avg_sq = {n: torch.zeros_like(p) for n, p in params.items()}
        self.step_count = 0

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        self.step_count += 1
        b1, b2 = ADAM_BETAS
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        with torch.no_grad():
            for name in sorted(params):
                p = params[name]
                g = p.grad if p.grad is not None else torch.zeros_like(p)
                m, v = self.exp_avg[name], self.exp_avg_sq[name]
                m.mul_(b1).add_(g, alpha=1.0 - b1)
                v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
                denom = (v / bc2).sqrt_().add_(ADAM_EPS)
                p.sub_(lr * ((m / bc1) / denom + WEIGHT_DECAY * p))


@dataclass
class TrainState:
    """Everything mutable about adapter training; fully checkpointable."""

    optimizer: AdamW
    data_gen: torch.Generator
    noise_gen: torch.Generator
    global_step: int = 0
    stage_id: int = 0
    completed_stages: set[int] = field(default_factory=set)

    @classmethod
    def create(cls, model: CharacterGenerator, config: RunConfig) -> "TrainState":
        return cls(
            optimizer=AdamW(model.trainable_parameters()),
            data_gen=seeded_torch_generator(config.seed, "train/data"),
            noise_gen=seeded_torch_generator(config.seed, "train/noise"),
        )


def uniform_t_sampler(state: TrainState, n: int) -> Tensor:
    return torch.rand(n, generator=state.noise_gen)


# -- data plumbing -------------------------------------------------------------


class DataCache:
    """Loads target images and reference encoder streams once per path.

    Both encoders are frozen, so reference features are constants of the
    image: caching them moves all encoder cost out of the training loop.
    """

    def __init__(self, model: CharacterGenerator, base_dir: str | Path):
        self.model = model
        self.base_dir = Path(base_dir)
        self._targets: dict[tuple[str, int], Tensor] = {}
        self._streams: dict[str, ReferenceStreams] = {}

    def target(self, record_path: str, resolution: int) -> Tensor:
        key = (record_path, resolution)
        if key not in self._targets:
            image = load_png(resolve_image_path(self.base_dir, record_path, resolution))
            if image.shape[0] != resolution or image.shape[1] != resolution:
                raise DataError(
                    f"{record_path}: rendered image is {image.shape[:2]}, "
                    f"stage expects {resolution}"
                )
            self._targets[key] = to_chw(image)
        return self._targets[key]

    def streams(self, record_path: str) -> ReferenceStreams:
        if record_path not in self._streams:
            image = load_png(resolve_image_path(self.base_dir, record_path, 64))
            with torch.no_grad():
                self._streams[record_path] = self.model.encode_reference(image)
        return self._streams[record_path]


class _EpochSampler:
    """Iterates a record list in seeded shuffled epochs."""

    def __init__(self, records: list[ManifestRecord]):
        self.records = records
        self._order: list[int] = []

    def take(self, n: int, gen: torch.Generator) -> list[ManifestRecord]:
        out = []
        while len(out) < n:
            if not self._order:
                self._order = torch.randperm(len(self.records), generator=gen).tolist()
            out.append(self.records[self._order.pop()])
        return out


def draw_subset(paired_weight: float, unpaired_weight: float, gen: torch.Generator) -> str:
    """One paired-vs-unpaired draw at the configured mix weights."""
    total = paired_weight + unpaired_weight
    if total <= 0:
        raise DataError("mix weights must not both be zero")
    p = paired_weight / total
    return "paired" if torch.rand(1, generator=gen).item() < p else "unpaired"


def _assemble_batch(
    records: list[ManifestRecord], cache: DataCache, resolution: int
) -> dict:
    targets = torch.stack([cache.target(r.target_path, resolution) for r in records])
    text = torch.tensor([r.caption_ids for r in records], dtype=torch.long)
    streams = [cache.streams(r.reference_path) for r in records]
    return {
        "target": targets,
        "text": text,
        "low": torch.stack([s.low for s in streams]),
        "region": torch.stack([s.region for s in streams]),
        "high": torch.stack([s.high for s in streams]),
        "sample_ids": [r.sample_id for r in records],
    }


# -- the step ------------------------------------------------------------------


def training_step(
    state: TrainState,
    model: CharacterGenerator,
    batch: dict,
    t_sampler: Callable[[TrainState, int], Tensor] | None = None,
    stage: StageConfig | None = None,
) -> tuple[TrainState, float]:
    """One optimizer update on the trainable partition; mutates and
    returns the state. Aborts with step/timestep/batch diagnostics if the
    loss ever goes non-finite."""
    if t_sampler is None:
        t_sampler = uniform_t_sampler
    drop_char = stage.drop_character_prob if stage is not None else 0.0
    drop_text = stage.drop_text_prob if stage is not None else 0.0
    lr = stage.learning_rate if stage is not None else 1e-4

    x0 = batch["target"]
    n = x0.shape[0]
    char_gate = (torch.rand(n, generator=state.data_gen) >= drop_char).float()
    text_dropped = torch.rand(n, generator=state.data_gen) < drop_text
    text = batch["text"].clone()
    text[text_dropped] = NULL_ID

    t = t_sampler(state, n)
    eps = torch.randn(x0.shape, generator=state.noise_gen)
    x_t, v_target = interpolate(x0, eps, t)

    context = model.adapter(batch["low"], batch["region"], batch["high"], t)
    v_pred = model.backbone(x_t, t, text, context, scale=1.0, context_gate=char_gate)
    loss = torch.mean((v_pred - v_target) ** 2)

    if not torch.isfinite(loss):
        raise NumericalError(
            f"non-finite loss at step {state.global_step}: "
            f"t={t.tolist()}, batch={batch.get('sample_ids')}"
        )

    params = model.trainable_parameters()
    for p in params.values():
        p.grad = None
    loss.backward()
    state.optimizer.step(params, lr)
    state.global_step += 1
    return state, float(loss.item())


# -- stages and curriculum ------------------------------------------------------


@dataclass
class StageMetrics:
    stage_id: int
    records: list[dict]
    metadata: dict

    def final_average_loss(self, window: int = 50) -> float:
        tail = [r["loss"] for r in self.records[-window:]]
        return float(np.mean(tail)) if tail else math.nan


def run_stage(
    stage: StageConfig,
    manifest: DatasetManifest,
    model: CharacterGenerator,
    state: TrainState,
    base_dir: str | Path,
    out_dir: str | Path | None = None,
    cache: DataCache | None = None,
    log_every: int = 200,
) -> tuple[TrainState, StageMetrics]:
    """Run one curriculum stage; emits a per-step loss log and, when an
    output directory is given, an end-of-stage checkpoint."""
    model.freeze_base()
    cache = cache or DataCache(model, base_dir)
    pools: dict[str, _EpochSampler] = {}
    for name, weight in (("paired", stage.paired_weight), ("unpaired", stage.unpaired_weight)):
        records = manifest.subset(name)
        if weight > 0 and not records:
            raise DataError(f"stage {stage.stage_id} needs {name} records but the manifest has none")
        pools[name] = _EpochSampler(records)

    warnings = []
    if stage.stage_id > 1 and (stage.stage_id - 1) not in state.completed_stages:
        warnings.append(
            f"stage {stage.stage_id} started without stage {stage.stage_id - 1} completed"
        )

    state.stage_id = stage.stage_id
    records_log: list[dict] = []
    for _ in range(stage.steps):
        subset = draw_subset(stage.paired_weight, stage.unpaired_weight, state.data_gen)
        records = pools[subset].take(stage.batch_size, state.data_gen)
        batch = _assemble_batch(records, cache, stage.resolution)
        state, loss = training_step(state, model, batch, stage=stage)
        records_log.append(
            {
                "step": state.global_step,
                "stage": stage.stage_id,
                "loss": loss,
                "lr": stage.learning_rate,
                "paired_flag": subset == "paired",
            }
        )
        if log_every and len(records_log) % log_every == 0:
            print(
                f"[stage {stage.stage_id}] step {state.global_step}: loss {loss:.5f}",
                flush=True,
            )

    state.completed_stages.add(stage.stage_id)
    metrics = StageMetrics(
        stage_id=stage.stage_id,
        records=records_log,
        metadata={"stage": stage.stage_id, "steps": stage.steps, "warnings": warnings},
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_train_checkpoint(model, state, out_dir / f"ckpt_stage{stage.stage_id}.icpt")
        _append_metrics(out_dir / "metrics.jsonl", metrics)
    return state, metrics


def run_curriculum(
    stages: list[StageConfig],
    manifest: DatasetManifest,
    model: CharacterGenerator,
    base_dir: str | Path,
    out_dir: str | Path | None = None,
    state: TrainState | None = None,
) -> Path | None:
    """Run stages 1..3 sequentially, carrying state through; one
    checkpoint per stage plus a final one. A stage failure propagates
    after earlier checkpoints are already on disk."""
    if [s.stage_id for s in stages] != [1, 2, 3]:
        raise DataError("curriculum stages must be ordered 1, 2, 3")
    config = model.config
    state = state or TrainState.create(model, config)
    cache = DataCache(model, base_dir)
    for stage in stages:
        state, _ = run_stage(stage, manifest, model, state, base_dir, out_dir, cache)
    if out_dir is not None:
        final = Path(out_dir) / "ckpt_final.icpt"
        save_train_checkpoint(model, state, final)
        return final
    return None


def _append_metrics(path: Path, metrics: StageMetrics) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps({"type": "meta", **metrics.metadata}) + "\n")
        for record in metrics.records:
            fh.write(json.dumps(record) + "\n")


# -- backbone pretraining --------------------------------------------------------


def pretrain_backbone(
    config: RunConfig,
    manifest: DatasetManifest,
    model: CharacterGenerator,
    base_dir: str | Path,
    log_every: int = 500,
) -> list[float]:
    """Caption-conditioned flow-matching pretraining of the backbone base.

    The adapter curriculum expects a competent frozen generator
    underneath; this phase provides it, after which the base partition is
    frozen for good. The adapter branch never runs here (no context), so
    its zero initialization survives untouched.
    """
    pcfg = config.pretrain
    views: dict[str, ManifestRecord] = {}
    for record in manifest.records:
        views.setdefault(record.target_path, record)
    unique = [views[k] for k in sorted(views)]
    if not unique:
        raise DataError("pretraining needs a non-empty manifest")

    cache = DataCache(model, base_dir)
    data_gen = seeded_torch_generator(config.seed, "pretrain/data")
    noise_gen = seeded_torch_generator(config.seed, "pretrain/noise")
    sampler = _EpochSampler(unique)

    base_params = {
        name: p
        for name, p in model.named_checkpoint_parameters().items()
        if name.startswith("dit/base/")
    }
    for p in base_params.values():
        p.requires_grad_(True)
    optimizer = AdamW(base_params)

    losses: list[float] = []
    for step in range(pcfg.steps):
        use_high = torch.rand(1, generator=data_gen).item() < pcfg.high_res_fraction
        resolution = config.toy_high_resolution if use_high else config.toy_low_resolution
        records = sampler.take(pcfg.batch_size, data_gen)
        x0 = torch.stack([cache.target(r.target_path, resolution) for r in records])
        text = torch.tensor([r.caption_ids for r in records], dtype=torch.long)
        dropped = torch.rand(len(records), generator=data_gen) < pcfg.drop_text_prob
        text[dropped] = NULL_ID

        t = torch.rand(len(records), generator=noise_gen)
        eps = torch.randn(x0.shape, generator=noise_gen)
        x_t, v_target = interpolate(x0, eps, t)
        v_pred = model.backbone(x_t, t, text, context=None)
        loss = torch.mean((v_pred - v_target) ** 2)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite pretraining loss at step {step}")
        for p in base_params.values():
            p.grad = None
        loss.backward()
        optimizer.step(base_params, pcfg.learning_rate)
        losses.append(float(loss.item()))
        if log_every and (step + 1) % log_every == 0:
            print(f"[pretrain] step {step + 1}/{pcfg.steps}: loss {losses[-1]:.5f}", flush=True)

    model.freeze_base()
    return losses


# -- checkpoint round-trip --------------------------------------------------------


def save_train_checkpoint(
    model: CharacterGenerator, state: TrainState | None, path: str | Path
) -> None:
    archive = model.to_archive()
    if state is not None:
        for name, tensor in state.optimizer.exp_avg.items():
            archive.add(f"optim/{name}/exp_avg", tensor.numpy().copy(), PARTITION_TRAINABLE)
        for name, tensor in state.optimizer.exp_avg_sq.items():
            archive.add(f"optim/{name}/exp_avg_sq", tensor.numpy().copy(), PARTITION_TRAINABLE)
        mask = 0
        for s in state.completed_stages:
            mask |= 1 << (s - 1)
        progress = np.array(
            [state.global_step, state.stage_id, mask, state.optimizer.step_count], dtype=np.int64
        )
        archive.add(_PROGRESS_KEY, progress, PARTITION_TRAINABLE)
        archive.add(_RNG_DATA_KEY, state.data_gen.get_state().numpy().copy(), PARTITION_TRAINABLE)
        archive.add(_RNG_NOISE_KEY, state.noise_gen.get_state().numpy().copy(), PARTITION_TRAINABLE)
    save_checkpoint(archive, path)


def load_train_checkpoint(path: str | Path) -> tuple[CharacterGenerator, TrainState | None]:
    archive = load_checkpoint(path)
    model = model_from_archive(archive)
    if _PROGRESS_KEY not in archive.entries:
        return model, None
    state = TrainState.create(model, model.config)
    for name in state.optimizer.exp_avg:
        m_key, v_key = f"optim/{name}/exp_avg", f"optim/{name}/exp_avg_sq"
        if m_key not in archive.entries or v_key not in archive.entries:
            raise DataError(f"checkpoint is missing optimizer state for {name}")
        state.optimizer.exp_avg[name] = torch.from_numpy(archive.entries[m_key].copy())
        state.optimizer.exp_avg_sq[name] = torch.from_numpy(archive.entries[v_key].copy())
    progress = archive.entries[_PROGRESS_KEY]
    state.global_step = int(progress[0])
    state.stage_id = int(progress[1])
    state.completed_stages = {s for s in (1, 2, 3) if int(progress[2]) & (1 << (s - 1))}
    state.optimizer.step_count = int(progress[3])
    state.data_gen.set_state(torch.from_numpy(archive.entries[_RNG_DATA_KEY].copy()))
    state.noise_gen.set_state(torch.from_numpy(archive.entries[_RNG_NOISE_KEY].copy()))
    return model, state


def restore_archive(path: str | Path) -> CheckpointArchive:
    return load_checkpoint(path)
