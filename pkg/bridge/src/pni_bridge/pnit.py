"""Independent PNIT codec, written against the documented byte layout.

Kept separate from the main package on purpose: the tensor files are the
interface contract between the two sides, so the bridge decodes them
from the spec rather than sharing code.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"PNIT"
VERSION = 1


def write_tensor(path, tensor):
    arr = np.ascontiguousarray(tensor, dtype=np.float32)
    if not 1 <= arr.ndim <= 4:
        raise ValueError(f"tensor rank {arr.ndim} outside [1, 4]")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<BB", VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_tensor(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a PNIT file")
    version, ndim = struct.unpack_from("<BB", blob, 4)
    if version != VERSION or not 1 <= ndim <= 4:
        raise ValueError(f"{path}: unsupported PNIT header")
    dims = struct.unpack_from(f"<{ndim}I", blob, 6)
    payload = blob[6 + 4 * ndim:]
    expected = 4 * int(np.prod(dims, dtype=np.uint64))
    if len(payload) != expected:
        raise ValueError(f"{path}: payload size mismatch")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
