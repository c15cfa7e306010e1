"""Versioned binary container for model parameters and named matrices.

Layout (all integers little-endian)::

    b"DIARKIT1"                  magic
    u32 version
    u32 n_bytes, utf-8 text      config snapshot (INI; empty for bare matrix files)
    u32 n_entries
    per entry: u16 n_bytes, utf-8 name; u8 dtype code; u8 rank; u32 dims[rank];
               little-endian row-major payload
    32 bytes                     sha256 of everything above
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DIARKIT1"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i4"), 4: np.dtype("<i1")}
_CODES = {dt: code for code, dt in DTYPES.items()}


class CheckpointError(ValueError):
    pass


def pack(entries: dict[str, np.ndarray], config_text: str = "") -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    cfg = config_text.encode("utf-8")
    out += struct.pack("<I", len(cfg)) + cfg
    out += struct.pack("<I", len(entries))
    for name, arr in entries.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        key = name.encode("utf-8")
        out += struct.pack("<H", len(key)) + key
        out += struct.pack("<BB", _CODES[dt], arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=dt).tobytes()
    out += hashlib.sha256(out).digest()
    return bytes(out)


def unpack(blob: bytes) -> tuple[dict[str, np.ndarray], str]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a diarkit container (bad magic)")
    if len(blob) < 12 + 32 or hashlib.sha256(blob[:-32]).digest() != blob[-32:]:
        raise CheckpointError("checksum mismatch (file truncated or corrupted)")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version} (expected {VERSION})")
    pos = 12
    (n,) = struct.unpack_from("<I", blob, pos)
    config_text = blob[pos + 4: pos + 4 + n].decode("utf-8")
    pos += 4 + n
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    entries = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, pos)
        name = blob[pos + 2: pos + 2 + n].decode("utf-8")
        pos += 2 + n
        code, rank = struct.unpack_from("<BB", blob, pos)
        pos += 2
        if code not in DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name!r}")
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        dt = DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        entries[name] = np.frombuffer(blob, dt, count=size // dt.itemsize, offset=pos).reshape(dims).copy()
        pos += size
    if pos != len(blob) - 32:
        raise CheckpointError("trailing bytes after last entry")
    return entries, config_text


def write_matrices(path, entries: dict[str, np.ndarray], config_text: str = "") -> None:
    Path(path).write_bytes(pack(entries, config_text))


def read_matrices(path) -> tuple[dict[str, np.ndarray], str]:
    return unpack(Path(path).read_bytes())


def quantize_(model) -> None:
    """Round live parameters to float32 precision in place (math stays float64)."""
    for p in model.parameters().values():
        p.data[...] = p.data.astype(np.float32)


def save_checkpoint(model, config, path) -> None:
    """Store float32 parameters plus the config snapshot.

    Parameters are first rounded to float32 in the live model too, so the saved
    and the in-memory model produce identical outputs.
    """
    quantize_(model)
    entries = {name: p.data.astype(np.float32) for name, p in model.parameters().items()}
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(pack(entries, config.to_ini()))
    tmp.replace(path)


def load_checkpoint(path):
    """Return (model, config) rebuilt from the snapshot."""
    from .config import parse_config

    entries, text = read_matrices(path)
    config = parse_config(text)
    model = config.model.build()
    params = model.parameters()
    if set(params) != set(entries):
        missing = sorted(set(params) - set(entries))
        extra = sorted(set(entries) - set(params))
        raise CheckpointError(f"parameter mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, p in params.items():
        if entries[name].shape != p.data.shape:
            raise CheckpointError(f"{name}: shape {entries[name].shape} != {p.data.shape}")
        p.data[...] = entries[name]
    return model, config
