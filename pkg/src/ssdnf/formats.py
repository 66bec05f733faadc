"""NTC tensor container and binary PPM export.

NTC layout (all integers little-endian)::

    b"NTC1" | u32 record_count | record*
    record := u16 name_len | name (utf-8) | u8 dtype (0=f32, 1=f64, 2=u8) | u8 ndim | u32 dims[ndim] | data
"""
from __future__ import annotations

import io
import logging
import os
import struct
from typing import Mapping

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"NTC1"
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}


class NtcError(ValueError):
    pass


def ntc_dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _CODES:
            raise NtcError(f"record {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise NtcError(f"record {name!r}: name or rank too large")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", _CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


def ntc_loads(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 8 or data[:4] != MAGIC:
        raise NtcError("bad magic: not an NTC1 container")
    (count,) = struct.unpack_from("<I", data, 4)
    pos = 8
    out: dict[str, np.ndarray] = {}
    for k in range(count):
        label = f"#{k}"

        def need(n, what):
            if pos + n > len(data):
                raise NtcError(f"truncated record {label}: missing {what}")
        need(2, "name length")
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        need(nlen, "name")
        name = data[pos:pos + nlen].decode("utf-8")
        label = f"{name!r} (#{k})"
        pos += nlen
        need(2, "header")
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        if code not in _DTYPES:
            raise NtcError(f"record {label}: unknown dtype code {code}")
        need(4 * ndim, "dims")
        dims = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        need(nbytes, f"data ({nbytes} bytes)")
        if name in out:
            raise NtcError(f"duplicate record name {name!r}")
        out[name] = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
        pos += nbytes
    if pos != len(data):
        raise NtcError(f"{len(data) - pos} trailing bytes after {count} records")
    return out


def ntc_write(path, tensors: Mapping[str, np.ndarray]) -> None:
    data = ntc_dumps(tensors)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def ntc_read(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return ntc_loads(f.read())


def export_ppm(image: np.ndarray) -> tuple[bytes, int]:
    """[H, W, 3] floats in [0, 1] -> (P6 bytes, number of clamped values)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected [H, W, 3] image, got {img.shape}")
    h, w, _ = img.shape
    clamped = int(np.count_nonzero((img < 0) | (img > 1) | ~np.isfinite(img)))
    if clamped:
        log.warning("export_ppm: clamped %d out-of-range values", clamped)
    # round half up
    q = np.floor(np.nan_to_num(img, nan=0.0) * 255.0 + 0.5)
    q = np.clip(q, 0, 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes(), clamped


def write_ppm(path, image: np.ndarray) -> int:
    data, clamped = export_ppm(image)
    with open(path, "wb") as f:
        f.write(data)
    return clamped


def image_grid(images, cols: int) -> np.ndarray:
    images = [np.asarray(im) for im in images]
    h, w, _ = images[0].shape
    rows = -(-len(images) // cols)
    grid = np.ones((rows * h, cols * w, 3), dtype=np.float32)
    for k, im in enumerate(images):
        r, c = divmod(k, cols)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = im
    return grid
