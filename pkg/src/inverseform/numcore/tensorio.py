"""IFTN binary tensor format.

Layout: magic ``b"IFTN"``, u8 version (1), u8 dtype (0 = float64), u8 rank,
little-endian u64 dims[rank], then the row-major little-endian payload.
"""

import struct

import numpy as np

from ..errors import FormatError

MAGIC = b"IFTN"
VERSION = 1
DTYPE_F64 = 0


def encode_tensor(array) -> bytes:
    a = np.asarray(array, dtype="<f8")   # ascontiguousarray would promote 0-d to 1-d
    head = MAGIC + struct.pack("<BBB", VERSION, DTYPE_F64, a.ndim)
    head += struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes(order="C")


def decode_tensor(buf, offset=0):
    """Decode one tensor starting at ``offset``; returns (array, next_offset)."""
    buf = memoryview(buf)
    if len(buf) - offset < 7:
        raise FormatError("truncated IFTN header", offset)
    if bytes(buf[offset:offset + 4]) != MAGIC:
        raise FormatError("bad IFTN magic", offset)
    version, dtype, rank = struct.unpack_from("<BBB", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported IFTN version {version}", offset + 4)
    if dtype != DTYPE_F64:
        raise FormatError(f"unsupported IFTN dtype {dtype}", offset + 5)
    pos = offset + 7
    if len(buf) - pos < 8 * rank:
        raise FormatError("truncated IFTN dims", pos)
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    nbytes = 8 * int(np.prod(dims, dtype=np.int64))
    if len(buf) - pos < nbytes:
        raise FormatError(f"truncated IFTN payload: need {nbytes} bytes, have {len(buf) - pos}", pos)
    data = np.frombuffer(buf[pos:pos + nbytes], dtype="<f8").reshape(dims).astype(np.float64)
    return data, pos + nbytes


def save_tensor(path, array):
    from ..fileio import atomic_write_bytes

    atomic_write_bytes(path, encode_tensor(array))


def load_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    data, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after IFTN tensor", end)
    return data
