"""Parameter archive: a small self-describing binary container.

Layout::

    b"CMTAPARM"                 8-byte magic
    uint32 LE                   format version
    uint64 LE                   manifest length in bytes
    manifest                    UTF-8 JSON, sorted keys
    payload                     concatenated little-endian float64 arrays

The manifest lists each entry's name, shape and byte offset, carries free
metadata (config echo, hashes) and the SHA-256 of the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CMTAPARM"
FORMAT_VERSION = 1


class ArchiveError(ValueError):
    pass


def dumps(params: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "entries": entries,
        "meta": meta or {},
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + payload


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise ArchiveError("not a parameter archive (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != FORMAT_VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    manifest = json.loads(blob[20:20 + hlen].decode("utf-8"))
    payload = blob[20 + hlen:]
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise ArchiveError("payload checksum mismatch")
    params = {}
    for e in manifest["entries"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        params[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return params, manifest["meta"]


def save(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(params, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
