import numpy as np

from charadapter.rng import derive_seed, seeded_rng, seeded_torch_generator


def test_same_inputs_same_sequence():
    a = seeded_rng(7, "init").random(100)
    b = seeded_rng(7, "init").random(100)
    assert np.array_equal(a, b)


def test_stream_separation():
    a = seeded_rng(7, "init").random(100)
    b = seeded_rng(7, "data").random(100)
    assert not np.array_equal(a, b)


def test_seed_separation():
    a = seeded_rng(7, "init").random(100)
    b = seeded_rng(8, "init").random(100)
    assert not np.array_equal(a, b)


def test_derive_seed_is_stable():
    # pinned so checkpoints/runs stay reproducible across releases
    assert derive_seed(7, "init") == derive_seed(7, "init")
    assert derive_seed(7, "init") != derive_seed(7, "init2")
    assert 0 <= derive_seed(123, "x") < 2**63


def test_torch_generator_streams():
    import torch

    a = torch.rand(50, generator=seeded_torch_generator(7, "init"))
    b = torch.rand(50, generator=seeded_torch_generator(7, "init"))
    c = torch.rand(50, generator=seeded_torch_generator(7, "data"))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)
