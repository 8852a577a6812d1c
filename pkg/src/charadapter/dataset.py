"""Procedural character sprites with fully known factors.

A character is an identity (body shape, 3-color palette, texture) seen
under view factors (pose angle, scale, background, style). Rendering is a
pure function of (spec, resolution): shapes are analytic inside-tests
evaluated at pixel centers in normalized coordinates, so a 64 px render
downsampled 2x closely matches the 32 px render of the same spec.

Bodies are drawn elongated (aspect 0.62 along the pose axis) so the pose
angle is observable from the second moments of the foreground mask; with
circularly symmetric bodies no mask statistic could recover it.

Datasets come in two subsets: paired records hold two distinct views of
one character (reference conditions the generation of the target), while
unpaired records are single captioned views used for self-reconstruction.
"""

from __future__ import annotations

import colorsys
import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .images import save_png
from .vocab import token_id, word_for

BODY_SHAPES = ("circle", "square", "triangle", "star")
TEXTURES = ("solid", "stripes", "dots")
POSE_ANGLES = (0, 45, 90, 135)
SCALES = (0.6, 0.8, 1.0)
BACKGROUNDS = ("red", "green", "blue", "white", "gray")
STYLES = ("flat", "outline")

POSE_WORDS = {0: "upright", 45: "tilted", 90: "sideways", 135: "leaning"}
SCALE_WORDS = {0.6: "small", 0.8: "medium", 1.0: "large"}

BACKGROUND_COLORS = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.70, 0.15),
    "blue": (0.10, 0.20, 0.85),
    "white": (1.00, 1.00, 1.00),
    "gray": (0.50, 0.50, 0.50),
}

SUPPORTED_RESOLUTIONS = (32, 64)

# Body geometry in normalized units: the major semi-axis spans
# BODY_RADIUS * scale of the image, the minor axis is squashed by
# BODY_ASPECT, and the outline band eats the outer OUTLINE_WIDTH of the
# body. At scale 1.0 the rotated body stays clear of a 2 px border even
# at 32 px.
BODY_RADIUS = 0.42
BODY_ASPECT = 0.62
OUTLINE_WIDTH = 0.18


def _build_palettes() -> tuple[tuple[tuple[float, float, float], ...], ...]:
    """Fixed palette list: every color keeps max-norm RGB distance >= 0.3
    from every background color, so foreground masks are unambiguous."""

    def ok(rgb: tuple[float, float, float]) -> bool:
        return all(
            max(abs(c - b) for c, b in zip(rgb, bg)) >= 0.3
            for bg in BACKGROUND_COLORS.values()
        )

    palettes = []
    for hue_deg in range(0, 360, 10):
        for sat, val in ((0.90, 0.95), (0.85, 0.60), (0.55, 0.80), (0.75, 0.40)):
            primary = colorsys.hsv_to_rgb(hue_deg / 360.0, sat, val)
            secondary = colorsys.hsv_to_rgb(((hue_deg + 140) % 360) / 360.0, sat, min(1.0, val + 0.05))
            accent = colorsys.hsv_to_rgb(((hue_deg + 70) % 360) / 360.0, min(1.0, sat + 0.05), val)
            if ok(primary) and ok(secondary):
                palettes.append((primary, secondary, accent))
    if len(palettes) < 42:
        raise AssertionError(f"palette grid too small: {len(palettes)}")
    return tuple(palettes[:48])


PALETTES = _build_palettes()

IDENTITY_SPACE = len(BODY_SHAPES) * len(PALETTES) * len(TEXTURES)
VIEW_SPACE = len(POSE_ANGLES) * len(SCALES) * len(BACKGROUNDS) * len(STYLES)

_IDENTITY_TABLE = tuple(itertools.product(BODY_SHAPES, range(len(PALETTES)), TEXTURES))
_VIEW_TABLE = tuple(itertools.product(POSE_ANGLES, SCALES, BACKGROUNDS, STYLES))


@dataclass(frozen=True)
class IdentityFactors:
    body_shape: str
    palette: tuple[tuple[float, float, float], ...]
    texture: str


@dataclass(frozen=True)
class ViewFactors:
    pose_angle: int
    scale: float
    background: str
    style: str


@dataclass(frozen=True)
class CharacterSpec:
    identity: IdentityFactors
    view: ViewFactors

    def with_view(self, view: ViewFactors) -> "CharacterSpec":
        return CharacterSpec(identity=self.identity, view=view)


def identity_from_index(index: int) -> IdentityFactors:
    shape, palette_idx, texture = _IDENTITY_TABLE[index]
    return IdentityFactors(body_shape=shape, palette=PALETTES[palette_idx], texture=texture)


def view_from_index(index: int) -> ViewFactors:
    pose, scale, background, style = _VIEW_TABLE[index]
    return ViewFactors(pose_angle=pose, scale=scale, background=background, style=style)


def all_views() -> list[ViewFactors]:
    return [view_from_index(i) for i in range(VIEW_SPACE)]


# -- rendering ---------------------------------------------------------------


def _inside(shape: str, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    if shape == "circle":
        return px * px + py * py <= 1.0
    if shape == "square":
        return np.maximum(np.abs(px), np.abs(py)) <= 0.82
    if shape == "triangle":
        # isoceles triangle pointing along +x
        verts = [(1.05, 0.0), (-0.85, 0.9), (-0.85, -0.9)]
        inside = np.ones_like(px, dtype=bool)
        for (ax, ay), (bx, by) in zip(verts, verts[1:] + verts[:1]):
            inside &= (bx - ax) * (py - ay) - (by - ay) * (px - ax) >= 0.0
        return inside
    if shape == "star":
        spike, valley = 1.05, 0.45
        rho = np.hypot(px, py)
        phi = np.arctan2(py, px)
        sector = np.mod(phi, 2.0 * np.pi / 5.0) / (2.0 * np.pi / 5.0)
        radius = valley + (spike - valley) * np.abs(sector - 0.5) * 2.0
        return rho <= radius
    raise ValueError(f"unknown body shape {shape!r}")


def render(spec: CharacterSpec, resolution: int) -> np.ndarray:
    """Rasterize a spec; bitwise reproducible for identical inputs."""
    if resolution not in SUPPORTED_RESOLUTIONS:
        raise ValueError(
            f"unsupported resolution {resolution} (supported: {SUPPORTED_RESOLUTIONS})"
        )
    n = resolution
    centers = (np.arange(n, dtype=np.float64) + 0.5) / n - 0.5
    u = centers[None, :].repeat(n, axis=0)  # x, rightward
    v = centers[:, None].repeat(n, axis=1)  # y, downward

    theta = np.deg2rad(float(spec.view.pose_angle))
    ub = np.cos(theta) * u + np.sin(theta) * v
    vb = -np.sin(theta) * u + np.cos(theta) * v
    px = ub / (BODY_RADIUS * spec.view.scale)
    py = vb / (BODY_RADIUS * spec.view.scale * BODY_ASPECT)

    body = _inside(spec.identity.body_shape, px, py)
    core = _inside(spec.identity.body_shape, px / (1.0 - OUTLINE_WIDTH), py / (1.0 - OUTLINE_WIDTH))

    primary, secondary, accent = spec.identity.palette
    image = np.empty((n, n, 3), dtype=np.float64)
    image[:] = BACKGROUND_COLORS[spec.view.background]

    if spec.identity.texture == "solid":
        fill = np.zeros_like(body)
    elif spec.identity.texture == "stripes":
        fill = np.floor(px / 0.4).astype(np.int64) % 2 == 0
    elif spec.identity.texture == "dots":
        gx = np.mod(px, 0.5) - 0.25
        gy = np.mod(py, 0.5) - 0.25
        fill = gx * gx + gy * gy <= 0.16 * 0.16
    else:
        raise ValueError(f"unknown texture {spec.identity.texture!r}")

    image[body & ~fill] = primary
    image[body & fill] = secondary
    if spec.view.style == "outline":
        edge = body & ~core
        image[edge] = np.asarray(accent) * 0.2
    return image.astype(np.float32)


def foreground_mask(image: np.ndarray, background: str, threshold: float = 0.25) -> np.ndarray:
    """Pixels further than the threshold (max-norm) from the named background."""
    bg = np.asarray(BACKGROUND_COLORS[background], dtype=np.float32)
    return np.max(np.abs(image - bg), axis=2) > threshold


# -- captions ----------------------------------------------------------------

CAPTION_LENGTH = 10


def caption(spec: CharacterSpec) -> tuple[int, ...]:
    """Deterministic template caption; always CAPTION_LENGTH tokens."""
    words = [
        "a",
        spec.identity.texture,
        spec.identity.body_shape,
        "character",
        POSE_WORDS[spec.view.pose_angle],
        SCALE_WORDS[spec.view.scale],
        spec.view.background,
        "background",
        spec.view.style,
        "style",
    ]
    return tuple(token_id(w) for w in words)


def parse_caption(token_ids: tuple[int, ...] | list[int]) -> ViewFactors:
    """Invert the caption template, recovering all view factors."""
    words = [word_for(t) for t in token_ids]
    if len(words) != CAPTION_LENGTH or words[0] != "a" or words[3] != "character":
        raise DataError(f"caption does not match the template: {' '.join(words)}")
    if words[7] != "background" or words[9] != "style":
        raise DataError(f"caption does not match the template: {' '.join(words)}")
    pose_for_word = {w: angle for angle, w in POSE_WORDS.items()}
    scale_for_word = {w: s for s, w in SCALE_WORDS.items()}
    if words[4] not in pose_for_word or words[5] not in scale_for_word:
        raise DataError(f"caption has unknown pose/scale words: {' '.join(words)}")
    if words[6] not in BACKGROUNDS or words[8] not in STYLES:
        raise DataError(f"caption has unknown background/style words: {' '.join(words)}")
    return ViewFactors(
        pose_angle=pose_for_word[words[4]],
        scale=scale_for_word[words[5]],
        background=words[6],
        style=words[8],
    )


# -- dataset manifests -------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    sample_id: str
    subset: str  # "paired" | "unpaired"
    character_id: str
    reference_path: str
    target_path: str
    caption_ids: tuple[int, ...]
    reference_spec: CharacterSpec
    target_spec: CharacterSpec


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]

    def subset(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.subset == name]

    def character_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.character_id, None)
        return list(seen)

    def filter_characters(self, character_ids: set[str]) -> "DatasetManifest":
        return DatasetManifest([r for r in self.records if r.character_id in character_ids])


def _view_image_path(character_id: str, view_idx: int, resolution: int) -> str:
    return f"images/{character_id}/v{view_idx:03d}_{resolution}.png"


def generate_dataset(
    n_characters: int,
    views_per_character: int,
    unpaired_fraction: float,
    rng: np.random.Generator,
) -> DatasetManifest:
    """Sample characters and organize them into paired/unpaired records.

    Identities are drawn without replacement, so no two characters share
    identity factors. Paired characters contribute one record per ordered
    pair of their views; unpaired characters contribute one
    self-reconstruction record per view. Image paths name the 64 px
    renders; swap the suffix for the 32 px files.
    """
    if n_characters < 2:
        raise DataError("need at least 2 characters")
    if views_per_character < 2:
        raise DataError("need at least 2 views per character")
    if n_characters > IDENTITY_SPACE:
        raise DataError(
            f"requested {n_characters} characters but the identity space has only "
            f"{IDENTITY_SPACE} distinct combinations"
        )
    if views_per_character > VIEW_SPACE:
        raise DataError(f"views_per_character exceeds the view space ({VIEW_SPACE})")
    if not 0.0 <= unpaired_fraction <= 1.0:
        raise DataError("unpaired_fraction must lie in [0, 1]")

    identity_indices = rng.choice(IDENTITY_SPACE, size=n_characters, replace=False)
    n_unpaired = int(round(unpaired_fraction * n_characters))
    subset_order = rng.permutation(n_characters)
    unpaired_chars = set(subset_order[:n_unpaired].tolist())

    records: list[ManifestRecord] = []
    counter = 0
    for char_idx in range(n_characters):
        character_id = f"c{char_idx:04d}"
        identity = identity_from_index(int(identity_indices[char_idx]))
        view_indices = rng.choice(VIEW_SPACE, size=views_per_character, replace=False)
        specs = [
            CharacterSpec(identity=identity, view=view_from_index(int(v))) for v in view_indices
        ]
        paths = [_view_image_path(character_id, i, 64) for i in range(views_per_character)]

        if char_idx in unpaired_chars:
            for i, spec in enumerate(specs):
                records.append(
                    ManifestRecord(
                        sample_id=f"s{counter:05d}",
                        subset="unpaired",
                        character_id=character_id,
                        reference_path=paths[i],
                        target_path=paths[i],
                        caption_ids=caption(spec),
                        reference_spec=spec,
                        target_spec=spec,
                    )
                )
                counter += 1
        else:
            for i, j in itertools.permutations(range(views_per_character), 2):
                records.append(
                    ManifestRecord(
                        sample_id=f"s{counter:05d}",
                        subset="paired",
                        character_id=character_id,
                        reference_path=paths[i],
                        target_path=paths[j],
                        caption_ids=caption(specs[j]),
                        reference_spec=specs[i],
                        target_spec=specs[j],
                    )
                )
                counter += 1

    records.sort(key=lambda r: r.sample_id)
    manifest = DatasetManifest(records)
    validate_manifest(manifest)
    return manifest


def validate_manifest(manifest: DatasetManifest) -> None:
    for r in manifest.records:
        if r.subset not in ("paired", "unpaired"):
            raise DataError(f"record {r.sample_id}: unknown subset {r.subset!r}")
        if r.reference_spec.identity != r.target_spec.identity:
            raise DataError(f"record {r.sample_id}: identity differs between views")
        if r.subset == "unpaired":
            if r.reference_path != r.target_path or r.reference_spec != r.target_spec:
                raise DataError(f"record {r.sample_id}: unpaired record must self-reference")
        else:
            if r.reference_spec.view == r.target_spec.view:
                raise DataError(f"record {r.sample_id}: paired record views must differ")
        if parse_caption(r.caption_ids) != r.target_spec.view:
            raise DataError(f"record {r.sample_id}: caption does not describe the target view")


def write_dataset(manifest: DatasetManifest, out_dir: str | Path) -> Path:
    """Render every referenced view at 32 and 64 px and write manifest.jsonl."""
    out_dir = Path(out_dir)
    rendered: set[str] = set()
    for record in manifest.records:
        for path, spec in (
            (record.reference_path, record.reference_spec),
            (record.target_path, record.target_spec),
        ):
            for resolution in SUPPORTED_RESOLUTIONS:
                rel = _res_variant(path, resolution)
                if rel in rendered:
                    continue
                save_png(render(spec, resolution), out_dir / rel)
                rendered.add(rel)
    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for record in manifest.records:
            fh.write(json.dumps(_record_to_json(record), sort_keys=True) + "\n")
    return manifest_path


def _res_variant(path: str, resolution: int) -> str:
    stem, _, _ = path.rpartition("_")
    return f"{stem}_{resolution}.png"


def resolve_image_path(base_dir: Path, record_path: str, resolution: int) -> Path:
    return base_dir / _res_variant(record_path, resolution)


def _spec_to_json(spec: CharacterSpec) -> dict:
    return {
        "identity": {
            "body_shape": spec.identity.body_shape,
            "palette": [list(c) for c in spec.identity.palette],
            "texture": spec.identity.texture,
        },
        "view": {
            "pose_angle": spec.view.pose_angle,
            "scale": spec.view.scale,
            "background": spec.view.background,
            "style": spec.view.style,
        },
    }


def spec_from_json(data: dict) -> CharacterSpec:
    try:
        identity = IdentityFactors(
            body_shape=data["identity"]["body_shape"],
            palette=tuple(tuple(float(x) for x in c) for c in data["identity"]["palette"]),
            texture=data["identity"]["texture"],
        )
        view = ViewFactors(
            pose_angle=int(data["view"]["pose_angle"]),
            scale=float(data["view"]["scale"]),
            background=data["view"]["background"],
            style=data["view"]["style"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed character spec: {exc}") from exc
    if identity.body_shape not in BODY_SHAPES or identity.texture not in TEXTURES:
        raise DataError("character spec identity factors outside their domains")
    if (
        view.pose_angle not in POSE_ANGLES
        or view.scale not in SCALES
        or view.background not in BACKGROUNDS
        or view.style not in STYLES
    ):
        raise DataError("character spec view factors outside their domains")
    return CharacterSpec(identity=identity, view=view)


def _record_to_json(record: ManifestRecord) -> dict:
    return {
        "sample_id": record.sample_id,
        "subset": record.subset,
        "character_id": record.character_id,
        "reference_path": record.reference_path,
        "target_path": record.target_path,
        "caption_ids": list(record.caption_ids),
        "reference_spec": _spec_to_json(record.reference_spec),
        "target_spec": _spec_to_json(record.target_spec),
    }


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
                records.append(
                    ManifestRecord(
                        sample_id=data["sample_id"],
                        subset=data["subset"],
                        character_id=data["character_id"],
                        reference_path=data["reference_path"],
                        target_path=data["target_path"],
                        caption_ids=tuple(int(t) for t in data["caption_ids"]),
                        reference_spec=spec_from_json(data["reference_spec"]),
                        target_spec=spec_from_json(data["target_spec"]),
                    )
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed manifest record: {exc}") from exc
    manifest = DatasetManifest(records)
    validate_manifest(manifest)
    return manifest
