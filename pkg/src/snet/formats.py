"""Binary tensor (STNT) and checkpoint (SNCK) files.

STNT: b"STNT", version u8 (=1), dtype u8, ndim u8, ndim x u64 LE dims,
row-major little-endian payload.

SNCK: b"SNCK", version u8 (=1), then records until EOF, each
name-length u32 LE, UTF-8 name, dtype u8, ndim u8, ndim x u64 LE dims, payload.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

TENSOR_MAGIC = b"STNT"
CHECKPOINT_MAGIC = b"SNCK"
VERSION = 1

# 3 (bytes) is used only inside checkpoints for metadata blobs.
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<u4"), 3: np.dtype("u1")}


def _dtype_code(arr):
    for code, dt in DTYPES.items():
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            return code
    raise FormatError(f"unsupported dtype {arr.dtype}")


def _encode_array(arr):
    code = _dtype_code(arr)
    dt = DTYPES[code]
    header = struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def array(self):
        start = self.pos
        code, ndim = struct.unpack("<BB", self.take(2, "dtype/ndim"))
        if code not in DTYPES:
            raise FormatError(f"unknown dtype code {code}", start)
        dims = struct.unpack(f"<{ndim}Q", self.take(8 * ndim, "dims"))
        dt = DTYPES[code]
        count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        payload = self.take(count * dt.itemsize, "payload")
        return np.frombuffer(payload, dtype=dt).reshape(dims).copy()


def _read_header(buf, magic):
    r = _Reader(buf)
    got = r.take(4, "magic")
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)
    (version,) = struct.unpack("<B", r.take(1, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    return r


def encode_tensor(arr):
    arr = np.asarray(arr)
    if _dtype_code(arr) == 3:
        raise FormatError("STNT does not store byte arrays")
    return TENSOR_MAGIC + struct.pack("<B", VERSION) + _encode_array(arr)


def decode_tensor(buf):
    r = _read_header(buf, TENSOR_MAGIC)
    arr = r.array()
    if r.pos != len(buf):
        raise FormatError("trailing bytes after tensor payload", r.pos)
    return arr


def write_tensor(path, arr):
    data = arr.data if hasattr(arr, "requires_grad") else arr
    Path(path).write_bytes(encode_tensor(data))


def read_tensor(path):
    return decode_tensor(Path(path).read_bytes())


def encode_checkpoint(entries):
    out = [CHECKPOINT_MAGIC, struct.pack("<B", VERSION)]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw + _encode_array(np.asarray(arr)))
    return b"".join(out)


def decode_checkpoint(buf):
    r = _read_header(buf, CHECKPOINT_MAGIC)
    entries = {}
    while r.pos < len(buf):
        (n,) = struct.unpack("<I", r.take(4, "name length"))
        name = r.take(n, "name").decode("utf-8")
        entries[name] = r.array()
    return entries


def write_checkpoint(path, entries):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(entries))
    tmp.replace(path)


def read_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


def text_blob(text):
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def blob_text(arr):
    return np.asarray(arr, dtype=np.uint8).tobytes().decode("utf-8")
