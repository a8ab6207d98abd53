"""Binary checkpoint container.

Layout (little-endian throughout)::

    b"MUSE" | u32 version | u32 count
    count x ( u16 name_len | name utf-8 | u8 rank | rank x u64 dim | float32 data )
    32-byte SHA-256 architecture fingerprint

Parameters and batch-norm running statistics are both stored as entries.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .config import fingerprint
from .nn import Backbone, BackboneSpec, build_backbone

MAGIC = b"MUSE"
VERSION = 1
FINGERPRINT_BYTES = 32


class CheckpointError(ValueError):
    """Malformed, truncated or mismatched checkpoint."""


def write_checkpoint(path, state: dict[str, np.ndarray], digest: bytes) -> Path:
    if len(digest) != FINGERPRINT_BYTES:
        raise ValueError(f"fingerprint must be {FINGERPRINT_BYTES} bytes, got {len(digest)}")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(state)))
    for name, value in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(value, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    buf.write(digest)
    path = Path(path)
    path.write_bytes(buf.getvalue())
    return path


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], bytes]:
    """Parse a checkpoint fully into memory; any inconsistency raises CheckpointError."""
    blob = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {pos}, file has {len(blob)}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    state = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"entry name is not UTF-8 at offset {pos}") from exc
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    digest = take(FINGERPRINT_BYTES)
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after fingerprint")
    return state, digest


def save_checkpoint(model: Backbone, path) -> Path:
    return write_checkpoint(path, model.state_dict(), fingerprint(model.spec))


def load_checkpoint(path, spec: BackboneSpec) -> Backbone:
    """Rebuild a backbone from ``spec`` and fill it from ``path``.

    The file is parsed and its fingerprint checked before any model exists.
    """
    state, digest = read_checkpoint(path)
    if digest != fingerprint(spec):
        raise CheckpointError("architecture fingerprint mismatch: checkpoint was written for a different backbone")
    model = build_backbone(spec, seed=0)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(str(exc)) from exc
    return model
