"""Versioned binary container for named arrays.

Layout (all integers little-endian)::

    magic        8 bytes   b"MEXPERT\\x00"
    kind         4 bytes   b"DSET" (dataset) or b"CKPT" (checkpoint)
    version      uint32
    header_len   uint64
    header       header_len bytes of UTF-8 JSON (sorted keys, compact)
    payload      concatenated raw array bytes, C order
    digest       32 bytes, SHA-256 of every preceding byte

The JSON header carries free-form ``meta`` plus ``blobs``: a list of
``{"name", "dtype", "shape", "offset", "nbytes"}`` entries addressing the
payload. ``dtype`` is a numpy dtype string, or a list of
``[field, dtype, shape]`` triples for structured records.

Files are written to a temporary sibling and renamed into place, so a
reader never observes a partially written container.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"MEXPERT\x00"
_PREFIX = struct.Struct("<8s4sIQ")
DIGEST_LEN = 32


class ContainerError(Exception):
    """A container could not be read: wrong kind, version, truncation, corruption."""


def _dtype_to_json(dt: np.dtype):
    if dt.names is None:
        return dt.str
    return [[name, dt.fields[name][0].base.str, list(dt.fields[name][0].shape)]
            for name in dt.names]


def _dtype_from_json(spec) -> np.dtype:
    if isinstance(spec, str):
        return np.dtype(spec)
    return np.dtype([(name, base, tuple(shape)) for name, base, shape in spec])


def encode(kind: bytes, version: int, meta: Mapping[str, Any],
           arrays: Mapping[str, np.ndarray]) -> bytes:
    blobs, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        raw = arr.tobytes(order="C")
        blobs.append({"name": name, "dtype": _dtype_to_json(arr.dtype),
                      "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "blobs": blobs}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(MAGIC, kind, version, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode(buf: bytes, kind: bytes, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    if len(buf) < _PREFIX.size + DIGEST_LEN:
        raise ContainerError(f"truncated container: only {len(buf)} bytes")
    magic, got_kind, got_version, header_len = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ContainerError("not a container file (bad magic)")
    if got_kind != kind:
        raise ContainerError(f"expected a {kind.decode()} container, found {got_kind.decode(errors='replace')}")
    if got_version != version:
        raise ContainerError(f"unsupported {kind.decode()} version {got_version} (this build reads {version})")
    body, digest = buf[:-DIGEST_LEN], buf[-DIGEST_LEN:]
    header_end = _PREFIX.size + header_len
    if header_end > len(body):
        raise ContainerError("truncated container: header extends past end of file")
    if hashlib.sha256(body).digest() != digest:
        raise ContainerError("container digest mismatch: file is truncated or corrupted")
    try:
        header = json.loads(body[_PREFIX.size:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"unreadable header: {exc}") from None
    payload = body[header_end:]
    arrays = {}
    for blob in header["blobs"]:
        start, n = blob["offset"], blob["nbytes"]
        if start + n > len(payload):
            raise ContainerError(f"blob {blob['name']!r} extends past end of payload")
        dt = _dtype_from_json(blob["dtype"])
        arr = np.frombuffer(payload[start:start + n], dtype=dt).reshape(blob["shape"])
        arrays[blob["name"]] = arr.copy()
    return header["meta"], arrays


def write(path: str | os.PathLike, kind: bytes, version: int,
          meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(kind, version, meta, arrays)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read(path: str | os.PathLike, kind: bytes, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return decode(fh.read(), kind, version)
