"""Single-file parameter checkpoints.

Layout (all integers little-endian)::

    b"MDSC"                 magic
    u8                      format version
    u32 + bytes             JSON metadata (utf-8, sorted keys)
    u32                     entry count
    per entry:
        u16 + bytes         path (utf-8)
        u8                  dtype tag: 'f' float32, 'd' float64, 'q' int64
        u8                  ndim
        u32 * ndim          shape
        bytes               row-major little-endian payload
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import InputError

MAGIC = b"MDSC"
VERSION = 1

_TAGS = {np.dtype(np.float32): b"f", np.dtype(np.float64): b"d", np.dtype(np.int64): b"q"}
_DTYPES = {v: k for k, v in _TAGS.items()}


def encode(arrays, meta=None) -> bytes:
    chunks = [MAGIC, struct.pack("<B", VERSION)]
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    chunks += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(arrays))]
    for path, arr in arrays.items():
        arr = np.asarray(arr)
        tag = _TAGS.get(arr.dtype.newbyteorder("="))
        if tag is None:
            raise InputError(f"unsupported dtype {arr.dtype} for {path!r}")
        name = path.encode()
        chunks += [struct.pack("<H", len(name)), name, tag, struct.pack("<B", arr.ndim)]
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(chunks)


def decode(buf: bytes):
    try:
        return _decode(buf)
    except InputError:
        raise
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        raise InputError(f"corrupt or truncated checkpoint: {exc}") from None


def _decode(buf: bytes):
    if buf[:4] != MAGIC:
        raise InputError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<B", buf, 4)
    if version != VERSION:
        raise InputError(f"unsupported checkpoint version {version}")
    off = 5
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    meta = json.loads(buf[off:off + n].decode())
    off += n
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, off)
        off += 2
        path = buf[off:off + ln].decode()
        off += ln
        dtype = _DTYPES[buf[off:off + 1]].newbyteorder("<")
        (ndim,) = struct.unpack_from("<B", buf, off + 1)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if off + nbytes > len(buf):
            raise InputError(f"payload of {path!r} runs past end of file")
        arrays[path] = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=off).reshape(shape).astype(dtype.newbyteorder("="))
        off += nbytes
    if off != len(buf):
        raise InputError("trailing bytes after last checkpoint entry")
    return arrays, meta


def save(path, arrays, meta=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(arrays, meta))
    os.replace(tmp, path)


def load(path):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"checkpoint {path} does not exist")
    return decode(path.read_bytes())
