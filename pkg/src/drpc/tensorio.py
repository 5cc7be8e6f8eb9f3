"""Binary tensor file format.

Layout, little-endian::

    b"DRPC" | u8 version=1 | u8 dtype (0=f64, 1=u8) | u8 ndim | ndim x u32 | raw data
"""

import re
import struct

import numpy as np

from .errors import DataError

MAGIC = b"DRPC"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("u1")}
_CODES = {np.dtype("<f8"): 0, np.dtype("u1"): 1}


def encode_tensor(array):
    arr = np.asarray(array)
    if arr.dtype == np.float64:
        arr = arr.astype("<f8", copy=False)
    dtype = np.dtype(arr.dtype).newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dtype not in _CODES:
        raise DataError(f"unsupported dtype {arr.dtype}; only float64 and uint8 can be stored")
    if arr.ndim > 255:
        raise DataError("too many dimensions")
    header = MAGIC + struct.pack("<BBB", VERSION, _CODES[dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def decode_tensor(blob, source="<bytes>"):
    if blob[:4] != MAGIC:
        raise DataError(f"{source}: bad magic {blob[:4]!r}")
    version, code, ndim = struct.unpack_from("<BBB", blob, 4)
    if version != VERSION:
        raise DataError(f"{source}: unsupported version {version}")
    if code not in _DTYPES:
        raise DataError(f"{source}: unknown dtype code {code}")
    shape = struct.unpack_from(f"<{ndim}I", blob, 7)
    dtype = _DTYPES[code]
    offset = 7 + 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    expected = offset + count * dtype.itemsize
    if len(blob) != expected:
        raise DataError(f"{source}: expected {expected} bytes, found {len(blob)}")
    return np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape).copy()


def write_tensor(path, array):
    with open(path, "wb") as fh:
        fh.write(encode_tensor(array))


def read_tensor(path):
    with open(path, "rb") as fh:
        return decode_tensor(fh.read(), source=str(path))


def write_ppm(path, image):
    """Binary P6 export of a ``3 x H x W`` float image in [0, 1] (or uint8)."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DataError(f"PPM export needs a 3 x H x W image, got {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr.transpose(1, 2, 0)).tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+255\s", blob)
    if m is None:
        raise DataError(f"{path}: not a binary P6 file with max value 255")
    w, h = int(m.group(1)), int(m.group(2))
    data = np.frombuffer(blob[m.end():], dtype=np.uint8)
    if data.size != 3 * w * h:
        raise DataError(f"{path}: expected {3 * w * h} pixel bytes, found {data.size}")
    return data.reshape(h, w, 3).transpose(2, 0, 1).copy()
