import itertools

import numpy as np
import pytest
import torch

from charadapter import dataset as ds
from charadapter.config import EncoderConfig
from charadapter.encoders import (
    TokenSequence,
    ToyEncoder,
    build_semantic_encoder,
    build_structural_encoder,
    encode_full,
    encode_regions,
    fuse_channelwise,
)
from charadapter.rng import seeded_rng, seeded_torch_generator


@pytest.fixture(scope="module")
def encoder():
    return build_structural_encoder(EncoderConfig(patch_size=8, depth=4, width=48, heads=4), seed=3)


@pytest.fixture(scope="module")
def semantic_encoder():
    # the real warm-up, at desk dimensions; shared across this module
    return build_semantic_encoder(EncoderConfig(width=48), seed=7, resolution=32)


@pytest.fixture(scope="module")
def sprite():
    return ds.render(ds.CharacterSpec(ds.identity_from_index(9), ds.view_from_index(3)), 64)


def test_encode_full_shapes(encoder, sprite):
    taps = encoder, sprite
    for resolution in (16, 32, 64):
        taps = encode_full(encoder, sprite, resolution)
        tokens = (resolution // 8) ** 2
        assert taps.deep.tokens.shape == (tokens, 48)
        assert taps.shallow.tokens.shape == (tokens, 48)
        assert taps.grid == resolution // 8


def test_encode_full_rejects_indivisible_resolution(encoder, sprite):
    with pytest.raises(ValueError, match="not divisible by patch size"):
        encode_full(encoder, sprite, 36)


def test_encoder_purity(encoder, sprite):
    a = encode_full(encoder, sprite, 32)
    b = encode_full(encoder, sprite, 32)
    assert torch.equal(a.deep.tokens, b.deep.tokens)
    assert torch.equal(a.shallow.tokens, b.shallow.tokens)


def test_shallow_differs_from_deep(encoder, sprite):
    taps = encode_full(encoder, sprite, 32)
    assert not torch.equal(taps.deep.tokens, taps.shallow.tokens)


def test_regions_k1_equals_full_deep(encoder, sprite):
    full = encode_full(encoder, sprite, 32)
    regions = encode_regions(encoder, sprite, 1, 32)
    assert torch.equal(regions.tokens, full.deep.tokens)
    assert regions.stream_tag == "region"


def test_regions_shapes(encoder, sprite):
    for k in (1, 2, 4):
        regions = encode_regions(encoder, sprite, k, 32)
        assert regions.tokens.shape == (k * k * 16, 48)


def test_regions_reject_indivisible_grid(encoder, sprite):
    with pytest.raises(ValueError, match="not divisible by region grid"):
        encode_regions(encoder, sprite, 3, 32)


def test_regions_of_tiled_image_are_identical(encoder):
    """A 4-fold tiled image must produce four identical region blocks."""
    tile = ds.render(ds.CharacterSpec(ds.identity_from_index(30), ds.view_from_index(60)), 32)
    tiled = np.concatenate(
        [np.concatenate([tile, tile], axis=1), np.concatenate([tile, tile], axis=1)], axis=0
    )
    regions = encode_regions(encoder, tiled, 2, 32).tokens
    blocks = regions.reshape(4, 16, 48)
    for i, j in itertools.combinations(range(4), 2):
        assert torch.equal(blocks[i], blocks[j])


def test_fuse_channelwise_semantics():
    sem = TokenSequence(torch.full((16, 48), 1.0), "deep")
    strc = TokenSequence(torch.full((16, 32), 2.0), "deep")
    fused = fuse_channelwise(sem, strc)
    assert fused.tokens.shape == (16, 80)
    assert torch.all(fused.tokens[:, :48] == 1.0)
    assert torch.all(fused.tokens[:, 48:] == 2.0)


def test_fuse_then_slice_is_identity():
    gen = seeded_torch_generator(5, "fuse")
    sem = TokenSequence(torch.randn(10, 48, generator=gen), "deep")
    strc = TokenSequence(torch.randn(10, 32, generator=gen), "deep")
    fused = fuse_channelwise(sem, strc).tokens
    assert torch.equal(fused[:, :48], sem.tokens)
    assert torch.equal(fused[:, 48:], strc.tokens)


def test_fuse_rejects_token_count_mismatch():
    a = TokenSequence(torch.zeros(10, 8), "deep")
    b = TokenSequence(torch.zeros(12, 8), "deep")
    with pytest.raises(ValueError, match="token counts differ"):
        fuse_channelwise(a, b)


def test_token_sequence_validation():
    with pytest.raises(ValueError, match="T x D"):
        TokenSequence(torch.zeros(0, 4), "deep")
    with pytest.raises(ValueError, match="stream tag"):
        TokenSequence(torch.zeros(4, 4), "magic")
    with pytest.raises(ValueError, match="non-finite"):
        TokenSequence(torch.full((2, 2), torch.nan), "deep")


def test_frozen_contract_no_gradients(encoder, sprite):
    for p in encoder.parameters():
        assert not p.requires_grad
    before = {n: p.clone() for n, p in encoder.named_parameters()}
    _ = encode_full(encoder, sprite, 32)
    for n, p in encoder.named_parameters():
        assert torch.equal(before[n], p)


def test_semantic_encoder_separates_identities(semantic_encoder):
    """Over 20 characters: same-identity pairs must be more similar than
    cross-identity pairs for at least 90% of sampled triples."""
    rng = seeded_rng(7, "triples")
    identity_indices = rng.choice(ds.IDENTITY_SPACE, size=20, replace=False)
    view_indices = rng.choice(ds.VIEW_SPACE, size=2, replace=False)

    def features(spec):
        taps = encode_full(semantic_encoder, ds.render(spec, 64), 32)
        f = taps.deep.tokens.mean(dim=0).numpy()
        return f / np.linalg.norm(f)

    feats = []
    for ii in identity_indices:
        identity = ds.identity_from_index(int(ii))
        feats.append(
            [features(ds.CharacterSpec(identity, ds.view_from_index(int(v)))) for v in view_indices]
        )

    wins, total = 0, 0
    for i in range(20):
        same = float(np.dot(feats[i][0], feats[i][1]))
        for j in range(20):
            if i == j:
                continue
            cross = float(np.dot(feats[i][0], feats[j][1]))
            wins += int(same > cross)
            total += 1
    assert wins / total >= 0.9, f"identity ranking held for only {wins}/{total} triples"


def test_resize_stability_of_features(semantic_encoder, sprite):
    """Mean-pooled features at resolution r and 2r stay aligned."""
    a = encode_full(semantic_encoder, sprite, 32).deep.tokens.mean(dim=0)
    b = encode_full(semantic_encoder, sprite, 64).deep.tokens.mean(dim=0)
    cos = torch.dot(a, b) / (a.norm() * b.norm())
    assert cos > 0.9


def test_structural_encoder_reproducible():
    cfg = EncoderConfig(patch_size=8, depth=2, width=16, heads=2)
    a = build_structural_encoder(cfg, seed=5)
    b = build_structural_encoder(cfg, seed=5)
    for (n, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb), n


def test_shallow_layer_bounds():
    cfg = EncoderConfig(depth=4, shallow_layer=0)
    assert cfg.resolved_shallow_layer() == 2
    enc = ToyEncoder(EncoderConfig(depth=2, width=16, heads=2))
    assert enc.shallow_layer == 1
