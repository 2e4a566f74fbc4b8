"""Writer for the engine's fixture container, rebuilt from the format note.

M2UF layout, all integers little-endian, no padding anywhere:

    "M2UF" | u32 version = 1 | u32 tensor count
    per tensor: u32 name length | UTF-8 name | u8 rank | rank x u32 dims
                | rank-product f32 values

Values are stored float32; the reference computes in float64 and rounds
once on write.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"M2UF"
VERSION = 1


def write_m2uf(path, tensors: list[tuple[str, np.ndarray]]) -> None:
    names = [name for name, _ in tensors]
    if len(set(names)) != len(names):
        raise ValueError("duplicate tensor names in fixture")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors:
            data = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def read_m2uf(path) -> dict[str, np.ndarray]:
    """Reader used only by the oracle's own round-trip tests."""
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not an M2UF file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            rank = fh.read(1)[0]
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            size = 1
            for d in dims:
                size *= d
            arr = np.frombuffer(fh.read(4 * size), dtype="<f4").reshape(dims)
            out[name] = arr.astype(np.float32)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes")
    return out
