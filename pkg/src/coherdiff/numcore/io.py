"""Named-tensor container.

Byte layout (all integers little-endian)::

    offset 0   8 bytes   magic b"CDTNSR01"
    offset 8   8 bytes   uint64 N, length of the JSON header in bytes
    offset 16  N bytes   UTF-8 JSON object, keys sorted:
                           name -> {"dtype": "<f4"|"<f8"|"<i8",
                                    "shape": [...], "byte_offset": int}
                           "__meta__" -> arbitrary JSON (optional)
    offset 16+N          payload: tensors concatenated in header key order,
                         each C-contiguous little-endian, byte_offset relative
                         to the payload start; no padding between tensors

A file is valid only when the payload length equals the sum of all tensor
sizes. Writes go to a temporary sibling and are renamed into place.
"""
import json
import os

import numpy as np

from coherdiff.errors import CheckpointError

MAGIC = b"CDTNSR01"
_DTYPES = {"<f4": np.float32, "<f8": np.float64, "<i8": np.int64}
META_KEY = "__meta__"


def _dtype_code(arr):
    code = np.dtype(arr.dtype).newbyteorder("<").str
    if code not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return code


def dumps(tensors, meta=None):
    header = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        if name == META_KEY:
            raise CheckpointError(f"{META_KEY!r} is a reserved name")
        arr = np.asarray(tensors[name])
        code = _dtype_code(arr)
        raw = np.ascontiguousarray(arr, dtype=np.dtype(code)).tobytes()
        header[name] = {"dtype": code, "shape": list(arr.shape), "byte_offset": offset}
        chunks.append(raw)
        offset += len(raw)
    if meta is not None:
        header[META_KEY] = meta
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + len(blob).to_bytes(8, "little") + blob + b"".join(chunks)


def loads(buf):
    if len(buf) < 16 or buf[:8] != MAGIC:
        raise CheckpointError("not a tensor container (bad magic or truncated preamble)")
    n = int.from_bytes(buf[8:16], "little")
    if 16 + n > len(buf):
        raise CheckpointError("truncated header")
    try:
        header = json.loads(buf[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    if not isinstance(header, dict):
        raise CheckpointError("corrupt header: not an object")
    meta = header.pop(META_KEY, None)
    payload = memoryview(buf)[16 + n:]
    tensors = {}
    expected = 0
    for name in sorted(header):
        entry = header[name]
        try:
            dtype = np.dtype(_DTYPES[entry["dtype"]]).newbyteorder("<")
            shape = tuple(int(s) for s in entry["shape"])
            start = int(entry["byte_offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"corrupt header entry {name!r}: {exc}") from None
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if start != expected or start + nbytes > len(payload):
            raise CheckpointError(f"payload for {name!r} is truncated or misplaced")
        tensors[name] = np.frombuffer(payload[start:start + nbytes], dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        expected = start + nbytes
    if expected != len(payload):
        raise CheckpointError(f"payload length {len(payload)} != declared {expected}")
    return tensors, meta


def save_tensors(path, tensors, meta=None):
    data = dumps(tensors, meta)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_tensors(path):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from None
    return loads(buf)
