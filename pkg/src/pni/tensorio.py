"""Tensor and image file I/O shared by every pipeline stage.

PNIT byte layout (little-endian throughout)::

    offset  size          field
    0       4             magic  b"PNIT"
    4       1             format version, currently 1
    5       1             ndim, 1..4
    6       4*ndim        dims, u32 each
    6+4n    4*prod(dims)  payload, row-major float32

The format is the contract between this package and any external
feature/refiner bridge; keep it byte-stable.

Index sidecars (provenance, Voronoi assignments) use a similar header::

    magic b"PNII", version u8 = 1, ncols u8, nrows u32, then
    nrows*ncols u32 values, row-major.

Images are plain binary PGM (P5, grayscale) and PPM (P6, color), maxval
255. Grayscale arrays are (H, W), color arrays (H, W, 3), values in [0, 1].
"""

from __future__ import annotations

import struct

import numpy as np

PNIT_MAGIC = b"PNIT"
PNIT_VERSION = 1
INDEX_MAGIC = b"PNII"
INDEX_VERSION = 1

MAX_NDIM = 4


class TensorIOError(Exception):
    """Base class for tensor/image file format errors."""


class HeaderError(TensorIOError):
    """Magic, version, or ndim field is corrupt."""


class PayloadError(TensorIOError):
    """Dims and payload disagree, or payload fails a strictness check."""


def write_tensor(path, tensor):
    """Write ``tensor`` to ``path`` in PNIT format (float32, row-major)."""
    arr = np.ascontiguousarray(tensor, dtype=np.float32)
    if arr.ndim < 1 or arr.ndim > MAX_NDIM:
        raise PayloadError(f"tensor rank {arr.ndim} outside [1, {MAX_NDIM}]")
    header = PNIT_MAGIC + struct.pack("<BB", PNIT_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def read_tensor(path, strict=False):
    """Read a PNIT tensor. With ``strict`` any NaN/Inf payload is rejected."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 6 or blob[:4] != PNIT_MAGIC:
        raise HeaderError(f"{path}: not a PNIT file (bad magic)")
    version, ndim = struct.unpack_from("<BB", blob, 4)
    if version != PNIT_VERSION:
        raise HeaderError(f"{path}: unsupported PNIT version {version}")
    if ndim < 1 or ndim > MAX_NDIM:
        raise HeaderError(f"{path}: ndim {ndim} outside [1, {MAX_NDIM}]")
    if len(blob) < 6 + 4 * ndim:
        raise HeaderError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", blob, 6)
    payload = blob[6 + 4 * ndim:]
    expected = int(np.prod(dims, dtype=np.uint64))
    if len(payload) != 4 * expected:
        raise PayloadError(
            f"{path}: payload mismatch, dims {dims} need {4 * expected} bytes, "
            f"got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
    if strict and not np.all(np.isfinite(arr)):
        raise PayloadError(f"{path}: non-finite values in strict mode")
    return arr.copy()


def write_index(path, array):
    """Write a 1-D or 2-D unsigned integer array as a PNII sidecar."""
    arr = np.asarray(array)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise PayloadError(f"index array rank {arr.ndim} not in (1, 2)")
    if np.any(arr < 0):
        raise PayloadError("index arrays must be nonnegative")
    arr = np.ascontiguousarray(arr, dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC + struct.pack("<BBI", INDEX_VERSION, arr.shape[1], arr.shape[0]))
        fh.write(arr.tobytes())


def read_index(path):
    """Read a PNII sidecar. Returns an (nrows, ncols) int64 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 10 or blob[:4] != INDEX_MAGIC:
        raise HeaderError(f"{path}: not a PNII index file")
    version, ncols, nrows = struct.unpack_from("<BBI", blob, 4)
    if version != INDEX_VERSION:
        raise HeaderError(f"{path}: unsupported PNII version {version}")
    payload = blob[10:]
    if len(payload) != 4 * nrows * ncols:
        raise PayloadError(f"{path}: payload mismatch in index file")
    return np.frombuffer(payload, dtype="<u4").reshape(nrows, ncols).astype(np.int64)


def _quantize(values, lo, hi):
    """Clamp to [lo, hi], map linearly onto 0..255, round half up."""
    if not lo < hi:
        raise ValueError(f"min {lo} must be < max {hi}")
    scaled = (np.clip(values, lo, hi) - lo) / (hi - lo) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


# Piecewise-linear color ramp for PPM heatmaps, dark blue -> red.
_RAMP_ANCHORS = np.array(
    [
        [0.00, 0.0, 0.0, 0.5],
        [0.25, 0.0, 0.0, 1.0],
        [0.50, 0.0, 1.0, 1.0],
        [0.75, 1.0, 1.0, 0.0],
        [1.00, 1.0, 0.0, 0.0],
    ]
)


def _color_ramp(unit):
    """Map values in [0, 1] through the heatmap ramp; returns (..., 3)."""
    u = np.clip(unit, 0.0, 1.0)
    out = np.empty(u.shape + (3,))
    for ch in range(3):
        out[..., ch] = np.interp(u, _RAMP_ANCHORS[:, 0], _RAMP_ANCHORS[:, 1 + ch])
    return out


def write_map_image(path, anomaly_map, lo, hi):
    """Render a 2-D score map to an 8-bit image.

    ``.pgm`` paths get a P5 grayscale rendering, anything else (``.ppm``)
    a P6 color-ramp rendering. Values are clamped to [lo, hi] and linearly
    quantized, midpoints rounding half up.
    """
    arr = np.asarray(anomaly_map, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"anomaly map must be 2-D, got rank {arr.ndim}")
    if str(path).endswith(".pgm"):
        write_gray_image(path, _quantize(arr, lo, hi))
    else:
        if not lo < hi:
            raise ValueError(f"min {lo} must be < max {hi}")
        unit = (np.clip(arr, lo, hi) - lo) / (hi - lo)
        rgb = _quantize(_color_ramp(unit), 0.0, 1.0)
        write_rgb_image(path, rgb)


def write_gray_image(path, values):
    """Write a (H, W) array as binary PGM. Floats are taken as [0, 1]."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValueError("grayscale image must be 2-D")
    if arr.dtype != np.uint8:
        arr = _quantize(arr.astype(np.float64), 0.0, 1.0)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def write_rgb_image(path, values):
    """Write a (H, W, 3) array as binary PPM. Floats are taken as [0, 1]."""
    arr = np.asarray(values)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("color image must have shape (H, W, 3)")
    if arr.dtype != np.uint8:
        arr = _quantize(arr.astype(np.float64), 0.0, 1.0)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def _read_pnm_header(blob, path):
    """Parse a PNM header, skipping '#' comments. Returns (magic, w, h, offset)."""
    if blob[:2] not in (b"P5", b"P6"):
        raise HeaderError(f"{path}: not a binary PGM/PPM file")
    magic = blob[:2].decode("ascii")
    fields = []
    pos = 2
    while len(fields) < 3:
        if pos >= len(blob):
            raise HeaderError(f"{path}: truncated PNM header")
        ch = blob[pos:pos + 1]
        if ch == b"#":
            pos = blob.index(b"\n", pos) + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(blob) and not blob[end:end + 1].isspace():
                end += 1
            fields.append(int(blob[pos:end]))
            pos = end
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise HeaderError(f"{path}: only maxval 255 supported, got {maxval}")
    return magic, w, h, pos


def read_image(path):
    """Read a PGM/PPM (or, with Pillow installed, PNG/JPEG) image.

    Returns float64 values in [0, 1]: (H, W) for grayscale, (H, W, 3)
    for color.
    """
    text = str(path)
    if text.endswith((".pgm", ".ppm")):
        with open(path, "rb") as fh:
            blob = fh.read()
        magic, w, h, offset = _read_pnm_header(blob, path)
        channels = 1 if magic == "P5" else 3
        expected = w * h * channels
        payload = blob[offset:offset + expected]
        if len(payload) != expected:
            raise PayloadError(f"{path}: PNM payload shorter than header promises")
        arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
        return arr.reshape(h, w) if channels == 1 else arr.reshape(h, w, 3)
    try:
        from PIL import Image
    except ImportError as exc:
        raise TensorIOError(
            f"{path}: reading non-PNM images requires the optional Pillow dependency"
        ) from exc
    with Image.open(path) as img:
        mode = "L" if img.mode in ("L", "I;16", "1") else "RGB"
        return np.asarray(img.convert(mode), dtype=np.float64) / 255.0
