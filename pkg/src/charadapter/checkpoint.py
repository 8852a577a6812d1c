"""Named-tensor checkpoint files (`.icpt`).

Layout: magic bytes ``ICPT``, format version (u32 LE), header length
(u64 LE), a JSON header describing every entry, then raw little-endian
tensor blobs, each starting at a 64-byte-aligned offset. The header is
self-describing, so a hex dump plus the JSON is enough to recover any
tensor without this library.

Every entry carries a partition tag: ``base_frozen`` for parameters that
training must never touch, ``adapter_trainable`` for everything mutable
(adapter parameters, optimizer moments, RNG state). Round-trips are
bitwise exact for all supported dtypes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"ICPT"
FORMAT_VERSION = 1
BLOB_ALIGNMENT = 64

PARTITION_FROZEN = "base_frozen"
PARTITION_TRAINABLE = "adapter_trainable"
_VALID_PARTITIONS = (PARTITION_FROZEN, PARTITION_TRAINABLE)

_DTYPE_TAGS = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i64": np.dtype("<i8"),
    "u8": np.dtype("|u1"),
}
_TAG_FOR_KIND = {np.dtype(d).str.lstrip("<|"): tag for tag, d in _DTYPE_TAGS.items()}


def dtype_tag(array: np.ndarray) -> str:
    kind = np.dtype(array.dtype).newbyteorder("<").str.lstrip("<|")
    tag = _TAG_FOR_KIND.get(kind)
    if tag is None:
        raise DataError(f"unsupported checkpoint dtype: {array.dtype}")
    return tag


@dataclass
class CheckpointArchive:
    """In-memory named-tensor store with partition metadata."""

    entries: dict[str, np.ndarray] = field(default_factory=dict)
    partitions: dict[str, str] = field(default_factory=dict)
    version: int = FORMAT_VERSION
    extras: dict[str, str] = field(default_factory=dict)

    def add(self, name: str, array: np.ndarray, partition: str) -> None:
        if name in self.entries:
            raise DataError(f"duplicate checkpoint entry '{name}'")
        if partition not in _VALID_PARTITIONS:
            raise DataError(f"unknown partition tag '{partition}' for entry '{name}'")
        array = np.asarray(array)
        if array.ndim == 0 or 0 in array.shape:
            raise DataError(f"entry '{name}' has zero-dim shape {array.shape}")
        array = np.ascontiguousarray(array)
        dtype_tag(array)  # reject unsupported dtypes early
        self.entries[name] = array.astype(array.dtype.newbyteorder("<"), copy=False)
        self.partitions[name] = partition

    def names(self, partition: str | None = None) -> list[str]:
        if partition is None:
            return sorted(self.entries)
        return sorted(n for n, p in self.partitions.items() if p == partition)

    def validate(self) -> None:
        if not self.entries:
            raise DataError("checkpoint archive has no entries")
        if set(self.entries) != set(self.partitions):
            raise DataError("partition metadata does not cover entries exactly")
        for name, tag in self.partitions.items():
            if tag not in _VALID_PARTITIONS:
                raise DataError(f"unknown partition tag '{tag}' for entry '{name}'")
        for name, array in self.entries.items():
            if array.ndim == 0 or 0 in array.shape:
                raise DataError(f"entry '{name}' has zero-dim shape {array.shape}")


def save_checkpoint(archive: CheckpointArchive, path: str | Path) -> None:
    """Write the archive; ``load_checkpoint`` reproduces it bitwise."""
    archive.validate()
    path = Path(path)

    names = archive.names()
    header_entries = []
    # Two passes: header size depends on offsets, offsets depend on header
    # size. First pass with zero offsets fixes the header length (offsets
    # are padded to fixed width below), second pass fills real offsets.
    offset_width = 16

    def build_header(offsets: dict[str, int]) -> bytes:
        entries = []
        for name in names:
            arr = archive.entries[name]
            entries.append(
                {
                    "name": name,
                    "dtype": dtype_tag(arr),
                    "shape": list(arr.shape),
                    "partition": archive.partitions[name],
                    "offset": offsets.get(name, 0),
                    "nbytes": arr.nbytes,
                }
            )
        header = {"entries": entries, "extras": dict(sorted(archive.extras.items()))}
        return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    # Offsets are formatted as plain ints; pre-pad the trial header so the
    # real offsets (which are larger numbers) cannot change its length.
    trial = build_header({n: 10**offset_width - 1 for n in names})
    preamble = len(MAGIC) + 4 + 8
    blob_start = _align(preamble + len(trial))

    offsets: dict[str, int] = {}
    cursor = blob_start
    for name in names:
        cursor = _align(cursor)
        offsets[name] = cursor
        cursor += archive.entries[name].nbytes
    header = build_header(offsets)
    if len(header) > len(trial):
        raise DataError("internal error: header grew beyond reserved size")
    header = header + b" " * (len(trial) - len(header))

    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(FORMAT_VERSION.to_bytes(4, "little"))
            fh.write(len(header).to_bytes(8, "little"))
            fh.write(header)
            pos = preamble + len(header)
            for name in names:
                pad = offsets[name] - pos
                fh.write(b"\x00" * pad)
                fh.write(archive.entries[name].tobytes())
                pos = offsets[name] + archive.entries[name].nbytes
    except OSError as exc:
        raise DataError(f"cannot write checkpoint to {path}: {exc}") from exc


def load_checkpoint(path: str | Path) -> CheckpointArchive:
    """Read a `.icpt` file, validating structure, dtypes and blob bounds."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc

    if len(blob) < len(MAGIC) + 12 or blob[: len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    version = int.from_bytes(blob[4:8], "little")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    header_len = int.from_bytes(blob[8:16], "little")
    header_end = 16 + header_len
    if header_end > len(blob):
        raise DataError(f"{path}: corrupted header length {header_len}")
    try:
        header = json.loads(blob[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot parse checkpoint header: {exc}") from exc

    archive = CheckpointArchive(version=version, extras=dict(header.get("extras", {})))
    for entry in header.get("entries", []):
        name = entry["name"]
        tag = entry["dtype"]
        if tag not in _DTYPE_TAGS:
            raise DataError(f"{path}: entry '{name}' has unknown dtype tag '{tag}'")
        partition = entry["partition"]
        if partition not in _VALID_PARTITIONS:
            raise DataError(f"{path}: entry '{name}' has unknown partition tag '{partition}'")
        shape = tuple(int(s) for s in entry["shape"])
        dtype = _DTYPE_TAGS[tag]
        nbytes = int(entry["nbytes"])
        expected = int(np.prod(shape)) * dtype.itemsize if shape else 0
        if not shape or 0 in shape:
            raise DataError(f"{path}: entry '{name}' has zero-dim shape {shape}")
        if nbytes != expected:
            raise DataError(f"{path}: entry '{name}' nbytes {nbytes} != shape implies {expected}")
        offset = int(entry["offset"])
        if offset % BLOB_ALIGNMENT != 0:
            raise DataError(f"{path}: entry '{name}' blob not {BLOB_ALIGNMENT}-byte aligned")
        if offset < header_end or offset + nbytes > len(blob):
            raise DataError(f"{path}: entry '{name}' blob truncated or out of bounds")
        array = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)), offset=offset)
        archive.add(name, array.reshape(shape).copy(), partition)
    archive.validate()
    return archive


def archives_equal(a: CheckpointArchive, b: CheckpointArchive) -> bool:
    """Bitwise equality of entries, partitions, and extras."""
    if a.names() != b.names() or a.extras != b.extras:
        return False
    for name in a.names():
        if a.partitions[name] != b.partitions[name]:
            return False
        x, y = a.entries[name], b.entries[name]
        if x.dtype != y.dtype or x.shape != y.shape or x.tobytes() != y.tobytes():
            return False
    return True


def checkpoint_summary(path: str | Path) -> dict:
    """Per-partition parameter counts, names, shapes and checksums."""
    archive = load_checkpoint(path)
    partitions: dict[str, dict] = {}
    for tag in _VALID_PARTITIONS:
        names = archive.names(tag)
        tensors = [
            {
                "name": name,
                "dtype": dtype_tag(archive.entries[name]),
                "shape": list(archive.entries[name].shape),
                "sha256": hashlib.sha256(archive.entries[name].tobytes()).hexdigest()[:16],
            }
            for name in names
        ]
        partitions[tag] = {
            "tensor_count": len(names),
            "parameter_count": int(sum(archive.entries[n].size for n in names)),
            "tensors": tensors,
        }
    return {
        "version": archive.version,
        "partitions": partitions,
        "extras_keys": sorted(archive.extras),
    }


def _align(offset: int) -> int:
    return (offset + BLOB_ALIGNMENT - 1) // BLOB_ALIGNMENT * BLOB_ALIGNMENT
