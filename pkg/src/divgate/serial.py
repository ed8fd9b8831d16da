"""On-disk formats.

DTNSR1: ``DTNSR1`` magic, u8 ndim, ndim little-endian u32 dims, then
row-major little-endian float32 data.

DPACK1: ``DPACK1`` magic, little-endian u32 entry count, then per entry a
little-endian u16 name length, the UTF-8 name, and an embedded DTNSR1
record.  Used for parameter stores and checkpoints.
"""
from __future__ import annotations

import struct

import numpy as np

from .tensor import Tensor

TENSOR_MAGIC = b"DTNSR1"
PACK_MAGIC = b"DPACK1"


class FormatError(ValueError):
    """Raised on bad magic or truncated data; carries the byte offset."""

    def __init__(self, offset: int, message: str):
        super().__init__(f"at byte {offset}: {message}")
        self.offset = offset


def _as_array(t) -> np.ndarray:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float32)
    return np.ascontiguousarray(arr, dtype=np.float32)


def encode_tensor(t) -> bytes:
    arr = _as_array(t)
    if arr.ndim == 0 or arr.size == 0:
        raise ValueError(f"refusing to encode empty tensor of shape {arr.shape}")
    if arr.ndim > 255:
        raise ValueError("too many dimensions for DTNSR1")
    head = TENSOR_MAGIC + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f4").tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one DTNSR1 record starting at ``offset``; returns (array, end)."""
    if buf[offset:offset + 6] != TENSOR_MAGIC:
        raise FormatError(offset, f"bad tensor magic {buf[offset:offset + 6]!r}")
    pos = offset + 6
    if pos + 1 > len(buf):
        raise FormatError(pos, "truncated before ndim")
    ndim = buf[pos]
    pos += 1
    if ndim == 0:
        raise FormatError(offset + 6, "zero-dimensional tensor not allowed")
    if pos + 4 * ndim > len(buf):
        raise FormatError(pos, "truncated inside dims")
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    if any(d == 0 for d in dims):
        raise FormatError(offset + 7, f"zero-length dimension in {dims}")
    count = int(np.prod(dims, dtype=np.int64))
    if pos + 4 * count > len(buf):
        raise FormatError(pos, f"truncated data: need {4 * count} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims)
    return np.ascontiguousarray(arr), pos + 4 * count


def write_tensor(path, t) -> None:
    with open(path, "wb") as f:
        f.write(encode_tensor(t))


def read_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        buf = f.read()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(end, f"{len(buf) - end} trailing bytes after tensor record")
    return Tensor(arr)


def encode_pack(arrays: dict[str, np.ndarray]) -> bytes:
    out = [PACK_MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"name too long: {name!r}")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(encode_tensor(arr))
    return b"".join(out)


def decode_pack(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:6] != PACK_MAGIC:
        raise FormatError(0, f"bad pack magic {buf[:6]!r}")
    if len(buf) < 10:
        raise FormatError(6, "truncated before entry count")
    (count,) = struct.unpack_from("<I", buf, 6)
    pos = 10
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        if pos + 2 > len(buf):
            raise FormatError(pos, "truncated before name length")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + nlen > len(buf):
            raise FormatError(pos, "truncated inside name")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        if name in arrays:
            raise FormatError(pos, f"duplicate entry {name!r}")
        arrays[name], pos = decode_tensor(buf, pos)
    if pos != len(buf):
        raise FormatError(pos, f"{len(buf) - pos} trailing bytes after last entry")
    return arrays


def write_pack(path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(encode_pack(arrays))


def read_pack(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return decode_pack(f.read())


def write_png(path, image) -> None:
    """8-bit grayscale export of a [0,1] image; visualization only."""
    from PIL import Image

    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    arr = np.squeeze(arr)
    if arr.ndim != 2:
        raise ValueError(f"expected a single-channel image, got shape {arr.shape}")
    u8 = np.clip(np.round(np.clip(arr, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="L").save(path)
