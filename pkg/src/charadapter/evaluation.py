"""Quantitative evaluation: identity metrics, copy-paste measurement,
prompt adherence, and numerical gradient checking.

Identity metrics run on the semantic encoder (the one warmed up on
identity classification); the random structural encoder would drown the
signal in noise. All metrics are pure functions of their inputs plus a
seed, so reports are exactly reproducible.

Pilot-pinned constants: thresholds marked as pilot-derived were fixed by
a documented pilot run with PILOT_SEED and are re-derived only when the
architecture defaults change.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import dataset as ds
from .adapter import CharacterAdapter
from .backbone import ToyDiT, sample
from .config import AdapterConfig, BackboneConfig, RunConfig
from .dataset import CharacterSpec, DatasetManifest, ManifestRecord, foreground_mask, render
from .encoders import ToyEncoder, encode_full
from .errors import NumericalError
from .images import image_grid, load_png, resize_image, save_png
from .model import CharacterGenerator
from .rng import seeded_rng, seeded_torch_generator
from .training import DataCache
from .vocab import NULL_ID

# Pinned by the pilot run recorded in the decisions notes; seed 7.
PILOT_SEED = 7
IDENTITY_RANKING_THRESHOLD = 0.8
OVERFIT_LOSS_RATIO = 0.10
CHANCE_RANKING_ACCURACY = 0.05

AREA_TOLERANCE = 1.25          # accepted ratio band around the expected mask area
POSE_TOLERANCE_DEG = 25.0
MIN_POSE_ANISOTROPY = 1.15     # below this the axis is unobservable -> fail
BACKGROUND_TOLERANCE = 0.25    # max-norm RGB distance for the border check


# -- identity metrics ----------------------------------------------------------


def _pooled_features(encoder: ToyEncoder, image: np.ndarray, resolution: int) -> np.ndarray:
    taps = encode_full(encoder, image, resolution)
    return taps.deep.tokens.mean(dim=0).numpy()


def identity_similarity(
    encoder: ToyEncoder, gen: np.ndarray, ref: np.ndarray, resolution: int
) -> float:
    """Cosine similarity of mean-pooled deep features; defined as 0 when a
    feature vector degenerates to zero norm."""
    a = _pooled_features(encoder, gen, resolution)
    b = _pooled_features(encoder, ref, resolution)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def identity_ranking_accuracy(
    encoder: ToyEncoder,
    gens: list[np.ndarray],
    refs: list[np.ndarray],
    resolution: int,
) -> tuple[float, int]:
    """Fraction of generations most similar to their own reference.

    References that are exact duplicates of another reference have no
    well-defined rank; those pairs are excluded and counted.
    """
    if len(gens) != len(refs) or len(gens) < 2:
        raise ValueError("need equally many gens and refs, at least 2")
    ref_feats = [_pooled_features(encoder, r, resolution) for r in refs]
    duplicates = set()
    for i in range(len(refs)):
        for j in range(i + 1, len(refs)):
            if refs[i].shape == refs[j].shape and np.array_equal(refs[i], refs[j]):
                duplicates.update((i, j))
    gen_feats = [_pooled_features(encoder, g, resolution) for g in gens]

    def cos(a, b):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        return float(np.dot(a, b) / (na * nb)) if na > 1e-12 and nb > 1e-12 else 0.0

    hits, total = 0, 0
    for i, gf in enumerate(gen_feats):
        if i in duplicates:
            continue
        own = cos(gf, ref_feats[i])
        others = [cos(gf, ref_feats[j]) for j in range(len(refs)) if j != i]
        hits += int(own > max(others))
        total += 1
    return (hits / total if total else 0.0), len(duplicates)


def copy_paste_score(gen: np.ndarray, ref: np.ndarray) -> float:
    """Pearson correlation of flattened pixels; 0 for zero-variance images.
    The generation is resized to the reference resolution if needed."""
    if gen.shape != ref.shape:
        gen = resize_image(gen, ref.shape[0], ref.shape[1])
    a = gen.reshape(-1).astype(np.float64)
    b = ref.reshape(-1).astype(np.float64)
    a_c, b_c = a - a.mean(), b - b.mean()
    na, nb = np.linalg.norm(a_c), np.linalg.norm(b_c)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.dot(a_c, b_c) / (na * nb))


# -- prompt adherence -----------------------------------------------------------


def _mask_moments(mask: np.ndarray) -> tuple[float, float, float]:
    """(principal axis angle in degrees mod 180, anisotropy, area fraction)."""
    area = float(mask.mean())
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return math.nan, 1.0, 0.0
    x = xs - xs.mean()
    y = ys - ys.mean()
    sxx, syy, sxy = float((x * x).mean()), float((y * y).mean()), float((x * y).mean())
    angle = math.degrees(0.5 * math.atan2(2.0 * sxy, sxx - syy)) % 180.0
    half_trace = (sxx + syy) / 2.0
    dev = math.hypot((sxx - syy) / 2.0, sxy)
    lam2 = max(half_trace - dev, 1e-9)
    return angle, (half_trace + dev) / lam2, area


def prompt_adherence(gen: np.ndarray, spec: CharacterSpec) -> dict[str, bool]:
    """Per-factor pass/fail against the prompted view.

    background: mean color of the 2 px border within BACKGROUND_TOLERANCE
    (max-norm) of the named background. scale: foreground area within a
    +-25% band of the area of the ground-truth render. pose: mask
    principal axis within POSE_TOLERANCE_DEG of the prompted angle; an
    (unobservable) near-isotropic mask fails, as does an empty one.
    """
    if gen.shape[0] != gen.shape[1] or gen.shape[0] not in ds.SUPPORTED_RESOLUTIONS:
        gen = resize_image(gen, 64, 64)
    resolution = gen.shape[0]

    border = np.concatenate(
        [
            gen[:2].reshape(-1, 3),
            gen[-2:].reshape(-1, 3),
            gen[2:-2, :2].reshape(-1, 3),
            gen[2:-2, -2:].reshape(-1, 3),
        ]
    )
    named = np.asarray(ds.BACKGROUND_COLORS[spec.view.background], dtype=np.float32)
    background_ok = bool(np.max(np.abs(border.mean(axis=0) - named)) <= BACKGROUND_TOLERANCE)

    mask = foreground_mask(gen, spec.view.background)
    angle, anisotropy, area = _mask_moments(mask)
    _, _, expected_area = _mask_moments(
        foreground_mask(render(spec, resolution), spec.view.background)
    )

    if area <= 0.0:
        return {"background": background_ok, "scale": False, "pose": False}

    ratio = area / max(expected_area, 1e-9)
    scale_ok = bool(1.0 / AREA_TOLERANCE <= ratio <= AREA_TOLERANCE)

    if anisotropy < MIN_POSE_ANISOTROPY or math.isnan(angle):
        pose_ok = False
    else:
        diff = abs(angle - spec.view.pose_angle) % 180.0
        pose_ok = bool(min(diff, 180.0 - diff) <= POSE_TOLERANCE_DEG)
    return {"background": background_ok, "scale": scale_ok, "pose": pose_ok}


# -- evaluation protocol ----------------------------------------------------------


@dataclass
class EvalReport:
    identity_ranking_accuracy: float
    mean_identity_similarity: float
    prompt_adherence_rate: float
    mean_copy_paste_score: float
    excluded_duplicate_refs: int
    rows: list[dict] = field(default_factory=list)

    def validate(self) -> None:
        for name in ("identity_ranking_accuracy", "prompt_adherence_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} outside [0,1]: {value}")
        if not -1.0 <= self.mean_copy_paste_score <= 1.0:
            raise ValueError("copy-paste score outside [-1,1]")

    def to_json(self) -> str:
        self.validate()
        return json.dumps(
            {
                "identity_ranking_accuracy": self.identity_ranking_accuracy,
                "mean_identity_similarity": self.mean_identity_similarity,
                "prompt_adherence_rate": self.prompt_adherence_rate,
                "mean_copy_paste_score": self.mean_copy_paste_score,
                "excluded_duplicate_refs": self.excluded_duplicate_refs,
                "rows": self.rows,
            },
            indent=2,
            sort_keys=True,
        )


def _per_character_records(manifest: DatasetManifest) -> list[ManifestRecord]:
    seen: dict[str, ManifestRecord] = {}
    for record in manifest.records:
        seen.setdefault(record.character_id, record)
    return [seen[c] for c in sorted(seen)]


def generate_for_record(
    model: CharacterGenerator,
    reference: np.ndarray,
    caption_ids: tuple[int, ...],
    steps: int,
    scale: float,
    seed: int,
    stream: str,
    resolution: int | None = None,
) -> np.ndarray:
    """Full conditioned sampling for one reference/caption pair."""
    resolution = resolution or model.config.toy_high_resolution
    streams = model.encode_reference(reference)
    rng = seeded_torch_generator(seed, stream)
    text = torch.tensor(caption_ids, dtype=torch.long)

    def velocity_model(x, t, tokens, _ctx, s):
        with torch.no_grad():
            context = model.adapter(
                streams.low.unsqueeze(0),
                streams.region.unsqueeze(0),
                streams.high.unsqueeze(0),
                t,
            )
        return model.backbone(x, t, tokens, context if s != 0.0 else None, s)

    # Euler integration with a timestep-aware context recomputed per step.
    dt = 1.0 / steps
    with torch.no_grad():
        x = torch.randn(1, 3, resolution, resolution, generator=rng)
        for i in range(steps):
            t = torch.full((1,), 1.0 - i * dt)
            x = x - dt * velocity_model(x, t, text.unsqueeze(0), None, scale)
        out = x.clamp_(0.0, 1.0)[0]
    return out.permute(1, 2, 0).numpy().astype(np.float32)


def run_eval(
    model: CharacterGenerator,
    manifest: DatasetManifest,
    base_dir: str | Path,
    out_dir: str | Path | None = None,
    steps: int | None = None,
    scale: float = 1.0,
    seed: int | None = None,
) -> EvalReport:
    """Reconstruction-style evaluation over one record per character:
    generate from (reference, its own caption), then score identity
    ranking, similarity, adherence, and copy-paste."""
    config = model.config
    steps = steps or config.sample_steps
    seed = config.seed if seed is None else seed
    records = _per_character_records(manifest)
    base_dir = Path(base_dir)

    refs, gens, rows = [], [], []
    for record in records:
        ref = load_png(base_dir / record.reference_path)
        gen = generate_for_record(
            model,
            ref,
            record.caption_ids,
            steps,
            scale,
            seed,
            stream=f"eval/sample/{record.sample_id}",
        )
        refs.append(ref)
        gens.append(gen)

    accuracy, excluded = identity_ranking_accuracy(
        model.semantic_encoder, gens, refs, config.encoder_resolution
    )
    similarities, adherence_flags, cp_scores = [], [], []
    for record, ref, gen in zip(records, refs, gens):
        sim = identity_similarity(model.semantic_encoder, gen, ref, config.encoder_resolution)
        checks = prompt_adherence(gen, record.target_spec)
        cp = copy_paste_score(gen, ref)
        similarities.append(sim)
        adherence_flags.extend(checks.values())
        cp_scores.append(cp)
        rows.append(
            {
                "sample_id": record.sample_id,
                "character_id": record.character_id,
                "identity_similarity": sim,
                "copy_paste_score": cp,
                "adherence": checks,
            }
        )

    report = EvalReport(
        identity_ranking_accuracy=accuracy,
        mean_identity_similarity=float(np.mean(similarities)),
        prompt_adherence_rate=float(np.mean(adherence_flags)),
        mean_copy_paste_score=float(np.mean(cp_scores)),
        excluded_duplicate_refs=excluded,
        rows=rows,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
        grid_rows = [
            [resize_image(r, 64, 64), resize_image(g, 64, 64)] for r, g in zip(refs, gens)
        ]
        save_png(image_grid(grid_rows), out_dir / "samples.png")
    return report


# -- the stage-2 probe: novel-view prompts -----------------------------------------


def novel_view_probes(
    manifest: DatasetManifest, count: int, seed: int
) -> list[tuple[ManifestRecord, CharacterSpec]]:
    """Fixed probe set: per character, a prompt whose pose and background
    both differ from the reference view (identity unchanged)."""
    records = _per_character_records(manifest)[:count]
    rng = seeded_rng(seed, "probes/novel-view")
    probes = []
    for record in records:
        view = record.reference_spec.view
        pose = ds.POSE_ANGLES[
            (ds.POSE_ANGLES.index(view.pose_angle) + 1 + int(rng.integers(3)))
            % len(ds.POSE_ANGLES)
        ]
        background = ds.BACKGROUNDS[
            (ds.BACKGROUNDS.index(view.background) + 1 + int(rng.integers(4)))
            % len(ds.BACKGROUNDS)
        ]
        probe_view = ds.ViewFactors(
            pose_angle=pose, scale=view.scale, background=background, style=view.style
        )
        probes.append((record, record.reference_spec.with_view(probe_view)))
    return probes


def probe_copy_paste(
    model: CharacterGenerator,
    probes: list[tuple[ManifestRecord, CharacterSpec]],
    base_dir: str | Path,
    steps: int,
    seed: int,
) -> dict:
    """Generate each probe and measure reference copying and
    background adherence to the prompt."""
    base_dir = Path(base_dir)
    cp_scores, bg_flags = [], []
    for record, probe_spec in probes:
        ref = load_png(base_dir / record.reference_path)
        gen = generate_for_record(
            model,
            ref,
            ds.caption(probe_spec),
            steps,
            1.0,
            seed,
            stream=f"probe/sample/{record.sample_id}",
        )
        cp_scores.append(copy_paste_score(gen, ref))
        bg_flags.append(prompt_adherence(gen, probe_spec)["background"])
    return {
        "mean_copy_paste": float(np.mean(cp_scores)),
        "background_adherence_rate": float(np.mean(bg_flags)),
        "copy_paste_scores": cp_scores,
    }


# -- gradient checking --------------------------------------------------------------

GRAD_CHECK_EPSILON = 1e-5
GRAD_CHECK_COMPONENTS = (
    "adapter",
    "qformer",
    "intermediate_low",
    "intermediate_region",
    "dit_xattn",
    "linear_probe",
    "frozen_encoder",
)


def _relative_errors(analytic: float, fd: float) -> float:
    # Below ~1e-7 both sides are indistinguishable from the fd noise floor
    # (float64 loss roundoff divided by 2 eps); treat them as matching zeros.
    if max(abs(analytic), abs(fd)) < 1e-7:
        return 0.0
    return abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-6)


def _check_params(
    loss_fn,
    params: dict[str, torch.Tensor],
    seed: int,
    samples_per_tensor: int = 200,
) -> float:
    """Central finite differences against autograd, in float64."""
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=False)
    worst = 0.0
    rng = seeded_rng(seed, "gradcheck/subsample")
    with torch.no_grad():
        for (name, p), grad in zip(params.items(), grads):
            if not torch.isfinite(grad).all():
                raise NumericalError(f"non-finite analytic gradient in {name}")
            flat = p.view(-1)
            count = min(samples_per_tensor, flat.numel())
            idx = rng.choice(flat.numel(), size=count, replace=False)
            for i in idx:
                i = int(i)
                original = flat[i].item()
                flat[i] = original + GRAD_CHECK_EPSILON
                up = float(loss_fn())
                flat[i] = original - GRAD_CHECK_EPSILON
                down = float(loss_fn())
                flat[i] = original
                fd = (up - down) / (2.0 * GRAD_CHECK_EPSILON)
                worst = max(worst, _relative_errors(float(grad.view(-1)[i]), fd))
    return worst


def gradient_check(component: str, tolerance: float = 1e-4, seed: int = PILOT_SEED) -> float:
    """Max relative error between autograd and central finite differences
    over a seeded instance of the component, evaluated in 64-bit."""
    if component == "frozen_encoder":
        raise ValueError("component has no trainable parameters")
    if component not in GRAD_CHECK_COMPONENTS:
        raise ValueError(f"unknown component {component!r}; options: {GRAD_CHECK_COMPONENTS}")

    gen = seeded_torch_generator(seed, f"gradcheck/{component}/init")
    torch.set_default_dtype(torch.float64)
    try:
        if component == "linear_probe":
            probe = nn.Linear(16, 8).double()
            with torch.no_grad():
                probe.weight.normal_(0, 0.5, generator=gen)
                probe.bias.normal_(0, 0.5, generator=gen)
            x = torch.randn(4, 16, generator=gen, dtype=torch.float64)
            weights = torch.randn(4, 8, generator=gen, dtype=torch.float64)
            params = {"weight": probe.weight, "bias": probe.bias}
            loss_fn = lambda: (probe(x) * weights).sum()
            worst = _check_params(loss_fn, params, seed)
        elif component == "dit_xattn":
            worst = _check_dit_xattn(gen, seed)
        else:
            worst = _check_adapter(component, gen, seed)
    finally:
        torch.set_default_dtype(torch.float32)
    if worst > tolerance:
        raise NumericalError(
            f"gradient check failed for {component}: max relative error {worst:.3e} "
            f"> tolerance {tolerance:.3e}"
        )
    return worst


def _check_adapter(component: str, gen: torch.Generator, seed: int) -> float:
    cfg = AdapterConfig()
    adapter = CharacterAdapter(cfg, input_dim=80).double()
    adapter.reset_parameters(gen)
    low = torch.randn(1, 16, 80, generator=gen, dtype=torch.float64)
    region = torch.randn(1, 32, 80, generator=gen, dtype=torch.float64)
    high = torch.randn(1, 16, 80, generator=gen, dtype=torch.float64)
    t = torch.rand(1, generator=gen, dtype=torch.float64)
    weights = torch.randn(1, cfg.num_queries, cfg.context_dim, generator=gen, dtype=torch.float64)

    selected = {
        "adapter": lambda n: True,
        "qformer": lambda n: n.startswith("qformer."),
        "intermediate_low": lambda n: n.startswith("intermediate_low."),
        "intermediate_region": lambda n: n.startswith("intermediate_region."),
    }[component]
    params = {n: p for n, p in adapter.named_parameters() if selected(n)}
    loss_fn = lambda: (adapter(low, region, high, t) * weights).sum()
    return _check_params(loss_fn, params, seed)


def _check_dit_xattn(gen: torch.Generator, seed: int) -> float:
    cfg = BackboneConfig(width=64, depth=2, heads=4, time_dim=64)
    context_dim = AdapterConfig().context_dim
    dit = ToyDiT(cfg, context_dim).double()
    dit.reset_parameters(gen)
    with torch.no_grad():
        # The construction-time zeros (modulations, output head, adapter
        # out-projection) would make the loss constant and the check
        # vacuous; randomize them so every gradient path is live.
        for name, p in dit.named_parameters():
            if p.abs().sum() == 0:
                p.normal_(0, 0.05, generator=gen)
    x = torch.randn(2, 3, 16, 16, generator=gen, dtype=torch.float64)
    t = torch.rand(2, generator=gen, dtype=torch.float64)
    text = torch.randint(0, cfg.vocab_size, (2, 6), generator=gen)
    context = torch.randn(2, 16, context_dim, generator=gen, dtype=torch.float64)
    weights = torch.randn(x.shape, generator=gen, dtype=torch.float64)
    params = {
        n: p for n, p in dit.named_parameters() if n.startswith("blocks.0.adapter_attn.")
    }
    loss_fn = lambda: (dit(x, t, text, context, 1.0) * weights).sum()
    return _check_params(loss_fn, params, seed)
