"""Versioned binary checkpoint format.

Layout: magic bytes ``NDG1``, then one record per tensor:
``u32 name length | name (utf-8) | u8 dtype tag | u8 rank | u64 extents | payload``.
All integers and payloads little-endian. Records are written in sorted
name order so identical tensor sets produce identical files.

A ``section`` string (e.g. ``INR1``/``SCR1``) is carried as a reserved
uint8 record so callers can reject checkpoints of the wrong kind.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"NDG1"
SECTION_KEY = "__section__"

_TAG_TO_DTYPE = {0: "<f4", 1: "<f8", 2: "<i8", 3: "|u1"}
_DTYPE_TO_TAG = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2, np.dtype("|u1"): 3}


def save_tensors(path, tensors: dict[str, np.ndarray], section: str | None = None):
    items = dict(tensors)
    if section is not None:
        items[SECTION_KEY] = np.frombuffer(section.encode("utf-8"), dtype=np.uint8).copy()
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name in sorted(items):
            arr = np.ascontiguousarray(items[name])
            if arr.dtype not in _DTYPE_TO_TAG:
                arr = arr.astype(np.float64)
            tag = _DTYPE_TO_TAG[arr.dtype]
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", tag, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def load_tensors(path):
    """Returns ``(tensors, section)``; section is None if absent."""
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not an NDG1 checkpoint")
        tensors = {}
        while True:
            head = f.read(4)
            if not head:
                break
            (nlen,) = struct.unpack("<I", head)
            name = f.read(nlen).decode("utf-8")
            tag, rank = struct.unpack("<BB", f.read(2))
            shape = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
            dtype = np.dtype(_TAG_TO_DTYPE[tag])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise ValueError(f"{path}: truncated record {name!r}")
            tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    section = None
    if SECTION_KEY in tensors:
        section = tensors.pop(SECTION_KEY).tobytes().decode("utf-8")
    return tensors, section
