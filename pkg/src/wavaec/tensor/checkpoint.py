"""Flat binary tensor container.

Layout (all integers little-endian)::

    magic      8 bytes   b"WAECKPT\\0"
    version    u32       FORMAT_VERSION
    count      u32       number of tensors
    per tensor:
      name_len u32, name (UTF-8)
      dtype    u8        see DTYPE_TAGS
      rank     u32
      dims     rank x u64
      values   raw little-endian, C order
"""

from __future__ import annotations

import hashlib
import io
import struct

import numpy as np

MAGIC = b"WAECKPT\0"
FORMAT_VERSION = 1
DTYPE_TAGS = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("u1"),
}
_TAG_OF = {dt: tag for tag, dt in DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


def dumps(tensors):
    """Serialize an ordered mapping name -> ndarray to bytes."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        if dt not in _TAG_OF:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BI", _TAG_OF[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


def loads(blob):
    view = memoryview(blob)
    if bytes(view[:8]) != MAGIC:
        raise CheckpointError("not a tensor checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", view, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    out = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos:pos + name_len]).decode("utf-8")
            pos += name_len
            tag, rank = struct.unpack_from("<BI", view, pos)
            pos += 5
            dims = struct.unpack_from(f"<{rank}Q", view, pos)
            pos += 8 * rank
            dt = DTYPE_TAGS[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(view):
                raise CheckpointError(f"truncated data for tensor {name!r}")
            out[name] = np.frombuffer(view[pos:pos + nbytes], dtype=dt).reshape(dims).copy()
            pos += nbytes
    except (struct.error, KeyError) as err:
        raise CheckpointError(f"corrupt checkpoint: {err}") from None
    return out


def save(path, tensors):
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def digest(tensors):
    return hashlib.sha256(dumps(tensors)).hexdigest()
