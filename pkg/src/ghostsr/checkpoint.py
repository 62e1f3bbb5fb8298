"""Binary checkpoint container.

Little-endian layout, bit-exact round trips, no external dependencies:

    magic "GSR1" | u32 version | u32 meta_len | meta json (utf-8)
    u32 n_entries
    per entry: u16 name_len | name utf-8 | u8 dtype_tag | u8 ndim
               u32 dims... | raw little-endian values

dtype tags: 0 = float32, 1 = float64, 2 = int8, 3 = int32.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"GSR1"
VERSION = 1

_TAG_TO_DTYPE = {0: "<f4", 1: "<f8", 2: "|i1", 3: "<i4"}
_KIND_TO_TAG = {("f", 4): 0, ("f", 8): 1, ("i", 1): 2, ("i", 4): 3}


def _tag_for(arr: np.ndarray) -> int:
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if key not in _KIND_TO_TAG:
        raise ValueError(f"unsupported checkpoint dtype {arr.dtype}")
    return _KIND_TO_TAG[key]


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            tag = _tag_for(arr)
            blob = arr.astype(_TAG_TO_DTYPE[tag], copy=False).tobytes()
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<BB", tag, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a GSR1 checkpoint")
        version, meta_len = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            tag, ndim = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            dtype = np.dtype(_TAG_TO_DTYPE[tag])
            n_items = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(fh.read(n_items * dtype.itemsize), dtype=dtype)
            tensors[name] = arr.reshape(shape).copy()
        return tensors, meta
