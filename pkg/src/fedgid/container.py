"""Binary container shared by dataset and checkpoint files.

Layout::

    b"FGID" | u16 version | u32 header_len | header (UTF-8 JSON) | payload

The header records the metadata dict, the checksum (sha256 of the payload)
and one entry per array with dtype, shape, byte offset and length.  Arrays are
stored C-contiguous in little-endian byte order.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FGID"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class ContainerError(ValueError):
    """The file is not a readable container."""


class ChecksumError(ContainerError):
    """Payload does not match the checksum stored in the header."""


class VersionError(ContainerError):
    """Container was written by an incompatible format version."""


def _le_dtype(dtype: np.dtype) -> np.dtype:
    dtype = np.dtype(dtype)
    if dtype.byteorder in ("|", "<"):
        return dtype
    return dtype.newbyteorder("<")


def write_container(path, arrays: dict[str, np.ndarray], meta: dict, kind: str) -> Path:
    path = Path(path)
    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        arr = np.ascontiguousarray(arr, dtype=_le_dtype(arr.dtype))
        raw = arr.tobytes()
        entries.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
             "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "kind": kind,
        "meta": meta,
        "arrays": entries,
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    return path


def read_container(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(arrays, meta)``; raises a ContainerError subclass on any defect."""
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise ContainerError(f"{path}: file too short for a container prefix")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ContainerError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"{path}: container version {version}, expected {VERSION}")
    start = _PREFIX.size
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumError(f"{path}: header unreadable (truncated?)") from exc
    payload = data[start + hlen:]
    if len(payload) != header["payload_bytes"] or hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    if kind is not None and header["kind"] != kind:
        raise ContainerError(f"{path}: holds {header['kind']!r}, expected {kind!r}")
    arrays = {}
    for e in header["arrays"]:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, header["meta"]
