"""Binary tensor container used for checkpoints and exported weights.

Layout (all integers little-endian)::

    b"SOCO" | u32 version
    repeated: u32 name_len | name (utf-8) | u8 dtype | u32 rank | u64 dim * rank | f64 payload

Entries run to end of file.  Only dtype tag 1 (float64) is defined.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from soco.errors import FormatError

MAGIC = b"SOCO"
VERSION = 1
DTYPE_F64 = 1
EXPORT_PREFIXES = ("backbone.", "fpn.", "head.")


def encode(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name in sorted(entries):
        arr = np.asarray(entries[name], dtype="<f8")  # tobytes() below is C order
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", DTYPE_F64, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise FormatError("not a SOCO container (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError("truncated container")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("entry name is not valid utf-8") from None
        dtype, rank = struct.unpack("<BI", take(5))
        if dtype != DTYPE_F64:
            raise FormatError(f"unknown dtype tag {dtype} for {name}")
        if rank > 32:
            raise FormatError(f"implausible rank {rank} for {name}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        if name in out:
            raise FormatError(f"duplicate entry {name}")
        out[name] = np.reshape(np.frombuffer(take(8 * count), dtype="<f8"), shape).astype(np.float64)
    return out


def save(path: str | Path, entries: Mapping[str, np.ndarray]) -> Path:
    """Write atomically: a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode(entries)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load(path: str | Path) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    return decode(blob)


def export_weights(entries: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Online backbone, FPN and head tensors (with their batch-norm statistics).

    The ``online.`` / ``buffers.`` prefixes are stripped; projector,
    predictor, target and optimiser entries are dropped.
    """
    out = {}
    for name, value in entries.items():
        prefix, _, short = name.partition(".")
        if prefix in ("online", "buffers") and short.startswith(EXPORT_PREFIXES):
            out[short] = value
    if not out:
        raise FormatError("checkpoint holds no online backbone tensors")
    return out
