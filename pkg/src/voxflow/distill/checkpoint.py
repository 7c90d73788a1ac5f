"""Versioned binary checkpoints: magic, config echo, shape-headed tensors.

All integers are little-endian u32; tensor payloads are little-endian
float64 in C order.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"FVDM-CKPT1"


def save_checkpoint(path, config: dict, arrays: dict[str, np.ndarray]) -> None:
    import json

    blob = bytearray(MAGIC)
    cfg_bytes = json.dumps(config, sort_keys=True).encode()
    blob += struct.pack("<I", len(cfg_bytes)) + cfg_bytes
    blob += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        nb = name.encode()
        blob += struct.pack("<I", len(nb)) + nb
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    import json

    with open(path, "rb") as fh:
        data = fh.read()
    if data[:len(MAGIC)] != MAGIC:
        raise ValueError("not a FVDM-CKPT1 checkpoint")
    off = len(MAGIC)

    def u32():
        nonlocal off
        (v,) = struct.unpack_from("<I", data, off)
        off += 4
        return v

    cfg_len = u32()
    config = json.loads(data[off:off + cfg_len].decode())
    off += cfg_len
    arrays = {}
    for _ in range(u32()):
        nlen = u32()
        name = data[off:off + nlen].decode()
        off += nlen
        ndim = u32()
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count,
                                     offset=off).reshape(shape).copy()
        off += 8 * count
    return config, arrays
