from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from charadapter.checkpoint import (
    BLOB_ALIGNMENT,
    CheckpointArchive,
    archives_equal,
    checkpoint_summary,
    load_checkpoint,
    save_checkpoint,
)
from charadapter.errors import DataError

GOLDEN = Path(__file__).parent / "data" / "golden_v1.icpt"


def _archive():
    archive = CheckpointArchive()
    archive.add("dit/base/w", np.ones((2, 2), dtype=np.float32), "base_frozen")
    archive.add("adapter/q", np.arange(6, dtype=np.float64).reshape(2, 3), "adapter_trainable")
    archive.add("state/progress", np.array([1, 2, 3], dtype=np.int64), "adapter_trainable")
    archive.extras["config"] = "seed = 7"
    return archive


def test_roundtrip_bitwise(tmp_path):
    archive = _archive()
    path = tmp_path / "a.icpt"
    save_checkpoint(archive, path)
    assert archives_equal(archive, load_checkpoint(path))


def test_save_load_save_identical_bytes(tmp_path):
    archive = _archive()
    p1, p2 = tmp_path / "a.icpt", tmp_path / "b.icpt"
    save_checkpoint(archive, p1)
    save_checkpoint(load_checkpoint(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_empty_archive_rejected(tmp_path):
    with pytest.raises(DataError, match="no entries"):
        save_checkpoint(CheckpointArchive(), tmp_path / "e.icpt")


def test_zero_dim_shapes_rejected():
    archive = CheckpointArchive()
    with pytest.raises(DataError, match="zero-dim"):
        archive.add("scalar", np.float32(1.0), "base_frozen")
    with pytest.raises(DataError, match="zero-dim"):
        archive.add("empty", np.zeros((0, 3), dtype=np.float32), "base_frozen")


def test_unknown_partition_rejected():
    archive = CheckpointArchive()
    with pytest.raises(DataError, match="unknown partition"):
        archive.add("x", np.ones((1,), dtype=np.float32), "half_frozen")


def test_duplicate_entry_rejected():
    archive = _archive()
    with pytest.raises(DataError, match="duplicate"):
        archive.add("dit/base/w", np.ones((1,), dtype=np.float32), "base_frozen")


def test_unwritable_path():
    with pytest.raises(DataError, match="cannot write"):
        save_checkpoint(_archive(), "/nonexistent-dir/x.icpt")


def test_magic_and_version_checked(tmp_path):
    path = tmp_path / "bad.icpt"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(DataError, match="bad magic"):
        load_checkpoint(path)

    good = tmp_path / "good.icpt"
    save_checkpoint(_archive(), good)
    blob = bytearray(good.read_bytes())
    blob[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(DataError, match="version 99"):
        load_checkpoint(path)


def test_corrupted_header_length(tmp_path):
    good = tmp_path / "good.icpt"
    save_checkpoint(_archive(), good)
    blob = bytearray(good.read_bytes())
    blob[8:16] = (2**40).to_bytes(8, "little")
    bad = tmp_path / "bad.icpt"
    bad.write_bytes(bytes(blob))
    with pytest.raises(DataError, match="corrupted header"):
        load_checkpoint(bad)


def test_truncated_blob(tmp_path):
    good = tmp_path / "good.icpt"
    save_checkpoint(_archive(), good)
    truncated = tmp_path / "trunc.icpt"
    truncated.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(DataError, match="truncated"):
        load_checkpoint(truncated)


def test_blob_alignment(tmp_path):
    path = tmp_path / "a.icpt"
    save_checkpoint(_archive(), path)
    blob = path.read_bytes()
    import json

    header_len = int.from_bytes(blob[8:16], "little")
    header = json.loads(blob[16 : 16 + header_len])
    for entry in header["entries"]:
        assert entry["offset"] % BLOB_ALIGNMENT == 0


def test_partition_metadata_stable(tmp_path):
    archive = _archive()
    path = tmp_path / "a.icpt"
    save_checkpoint(archive, path)
    loaded = load_checkpoint(path)
    assert loaded.partitions == archive.partitions


def test_summary_counts(tmp_path):
    path = tmp_path / "a.icpt"
    save_checkpoint(_archive(), path)
    summary = checkpoint_summary(path)
    assert summary["partitions"]["base_frozen"]["parameter_count"] == 4
    assert summary["partitions"]["adapter_trainable"]["parameter_count"] == 9
    assert summary["extras_keys"] == ["config"]


def test_golden_v1_fixture_loads():
    """Fixture written once by a pinned writer; tensor names and values
    must stay loadable forever under format v1."""
    archive = load_checkpoint(GOLDEN)
    assert archive.names() == ["golden/bias", "golden/steps", "golden/weight"]
    assert archive.partitions["golden/weight"] == "base_frozen"
    assert archive.partitions["golden/steps"] == "adapter_trainable"
    np.testing.assert_array_equal(
        archive.entries["golden/weight"],
        np.linspace(0.0, 1.0, 12, dtype=np.float32).reshape(3, 4),
    )
    np.testing.assert_array_equal(
        archive.entries["golden/bias"], np.array([1.5, -2.5], dtype=np.float64)
    )
    np.testing.assert_array_equal(
        archive.entries["golden/steps"], np.array([7, 11], dtype=np.int64)
    )
    assert archive.extras["note"] == "golden fixture"


_dtypes = st.sampled_from([np.float32, np.float64, np.int64, np.uint8])


@st.composite
def _random_archive(draw):
    archive = CheckpointArchive()
    n = draw(st.integers(1, 5))
    for i in range(n):
        shape = tuple(draw(st.lists(st.integers(1, 4), min_size=1, max_size=3)))
        dtype = draw(_dtypes)
        values = draw(
            st.binary(min_size=int(np.prod(shape)) * np.dtype(dtype).itemsize,
                      max_size=int(np.prod(shape)) * np.dtype(dtype).itemsize)
        )
        array = np.frombuffer(values, dtype=dtype).reshape(shape)
        partition = draw(st.sampled_from(["base_frozen", "adapter_trainable"]))
        archive.add(f"t{i}", array, partition)
    return archive


@settings(max_examples=25, deadline=None)
@given(_random_archive())
def test_roundtrip_property(tmp_path_factory, archive):
    path = tmp_path_factory.mktemp("hyp") / "a.icpt"
    save_checkpoint(archive, path)
    assert archives_equal(archive, load_checkpoint(path))
