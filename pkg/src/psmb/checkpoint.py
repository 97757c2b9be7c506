"""Binary checkpoint container.

Layout, all integers little-endian:

    magic      4 bytes  b"PSMB"
    version    u32      currently 1
    n_entries  u32
    index_len  u64      byte length of the index block
    index      n_entries records:
                 name_len u16, name utf-8,
                 dtype tag u8 (0=f32, 1=f64, 2=i64),
                 ndim u8, dims u32 each,
                 offset u64, nbytes u64   (into the payload region)
    payload    concatenated array bytes
    step       u64
    digest     32 bytes  sha256 of the config the state was trained under

Entries are sorted by name before writing, so identical state produces a
byte-identical file regardless of dict insertion order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict

import numpy as np

MAGIC = b"PSMB"
VERSION = 1

_TAG_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_DTYPE_TO_TAG = {np.dtype(np.float32): 0,
                 np.dtype(np.float64): 1,
                 np.dtype(np.int64): 2}


@dataclass(frozen=True)
class CheckpointBlob:
    tensors: Dict[str, np.ndarray]
    step: int
    config_digest: str   # hex


def save_checkpoint(path, tensors: Dict[str, np.ndarray], step: int,
                    config_digest: str) -> None:
    digest_raw = bytes.fromhex(config_digest)
    if len(digest_raw) != 32:
        raise ValueError("config digest must be 32 bytes of hex")

    index = bytearray()
    payload = bytearray()
    for name in sorted(tensors):
        # asarray keeps 0-d shapes; ascontiguousarray would promote them to (1,)
        arr = np.asarray(tensors[name], order="C")
        if arr.dtype not in _DTYPE_TO_TAG:
            raise ValueError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        name_b = name.encode()
        index += struct.pack("<H", len(name_b)) + name_b
        index += struct.pack("<BB", _DTYPE_TO_TAG[arr.dtype], arr.ndim)
        index += struct.pack(f"<{arr.ndim}I", *arr.shape)
        index += struct.pack("<QQ", len(payload), len(raw))
        payload += raw

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIQ", VERSION, len(tensors), len(index)))
        fh.write(index)
        fh.write(payload)
        fh.write(struct.pack("<Q", step))
        fh.write(digest_raw)


def load_checkpoint(path) -> CheckpointBlob:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint file not found: {path}")
    blob = p.read_bytes()
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version, n_entries, index_len = struct.unpack_from("<IIQ", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")

    pos = 20
    if len(blob) < pos + index_len + 8 + 32:
        raise ValueError(f"{path}: truncated checkpoint")
    index_end = pos + index_len
    payload_start = index_end
    payload_len = len(blob) - payload_start - 8 - 32

    entries = []
    for _ in range(n_entries):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + name_len].decode()
        pos += name_len
        tag, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        offset, nbytes = struct.unpack_from("<QQ", blob, pos)
        pos += 16
        if tag not in _TAG_TO_DTYPE:
            raise ValueError(f"{path}: tensor {name!r} has unknown dtype tag {tag}")
        if offset + nbytes > payload_len:
            raise ValueError(f"{path}: tensor {name!r} overruns the payload")
        entries.append((name, tag, shape, offset, nbytes))
    if pos != index_end:
        raise ValueError(f"{path}: index length does not match its contents")

    tensors = {}
    for name, tag, shape, offset, nbytes in entries:
        dtype = _TAG_TO_DTYPE[tag]
        start = payload_start + offset
        arr = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize,
                            offset=start)
        tensors[name] = arr.reshape(shape).copy()

    (step,) = struct.unpack_from("<Q", blob, len(blob) - 40)
    digest = blob[len(blob) - 32:].hex()
    return CheckpointBlob(tensors=tensors, step=step, config_digest=digest)
