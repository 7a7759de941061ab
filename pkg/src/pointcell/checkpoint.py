"""Binary checkpoint serialization.

Layout (all integers little-endian):

    magic   4 bytes  b"PTCK"
    version u32      format version, currently 1
    then per array, in sorted-name order:
        name_len u32
        name     UTF-8 bytes
        rank     u64
        extents  rank * u64
        data     prod(extents) * f64, C order

Writing is atomic (temp file + rename). Reading validates magic,
version, and exact length; failures raise ValidationError.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import ValidationError

MAGIC = b"PTCK"
VERSION = 1


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays; sorted by name for bit-stable output."""
    path = Path(path)
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)  # note: promotes 0-d to 1-d, so gate it
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<Q", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        parts.append(arr.tobytes())
    blob = b"".join(parts)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise ValidationError(f"cannot read checkpoint {path}: {e}") from e
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    arrays: dict[str, np.ndarray] = {}
    off = 8
    n = len(blob)
    while off < n:
        if off + 4 > n:
            raise ValidationError(f"{path}: truncated record header")
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        if off + name_len > n:
            raise ValidationError(f"{path}: truncated name")
        try:
            name = blob[off : off + name_len].decode("utf-8")
        except UnicodeDecodeError as e:
            raise ValidationError(f"{path}: invalid name encoding") from e
        off += name_len
        if off + 8 > n:
            raise ValidationError(f"{path}: truncated rank for '{name}'")
        (rank,) = struct.unpack_from("<Q", blob, off)
        off += 8
        if rank > 32:
            raise ValidationError(f"{path}: implausible rank {rank} for '{name}'")
        if off + 8 * rank > n:
            raise ValidationError(f"{path}: truncated extents for '{name}'")
        shape = struct.unpack_from(f"<{rank}Q", blob, off) if rank else ()
        off += 8 * rank
        count = 1
        for s in shape:
            count *= s
        nbytes = count * 8
        if off + nbytes > n:
            raise ValidationError(f"{path}: truncated data for '{name}'")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += nbytes
        if name in arrays:
            raise ValidationError(f"{path}: duplicate array name '{name}'")
        arrays[name] = arr
    return arrays


def save_meta(path: str | Path, meta: dict) -> None:
    """JSON sidecar next to a checkpoint (step counters, RNG state)."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_meta(path: str | Path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot read checkpoint metadata {path}: {e}") from e
