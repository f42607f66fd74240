"""Versioned binary checkpoint container.

Layout: magic, format version (u32 LE), header length (u64 LE), UTF-8 JSON
header, raw array payload, SHA-256 digest of everything before it. The
header carries run metadata plus an index of (name, dtype, shape, offset)
for each array in the payload. Round trips are byte-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"GLCK"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    index = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        index.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": arr.nbytes,
            }
        )
        payload += arr.tobytes()
    header = dict(meta)
    header["format_version"] = FORMAT_VERSION
    header["arrays"] = index
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    body = bytearray()
    body += MAGIC
    body += struct.pack("<I", FORMAT_VERSION)
    body += struct.pack("<Q", len(header_bytes))
    body += header_bytes
    body += payload
    digest = hashlib.sha256(bytes(body)).digest()
    with open(path, "wb") as fh:
        fh.write(bytes(body))
        fh.write(digest)


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 4 + 4 + 8 + 32:
        raise CheckpointError("checkpoint truncated")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    if body[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", body[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {version} (want {FORMAT_VERSION})"
        )
    (header_len,) = struct.unpack("<Q", body[8:16])
    header_end = 16 + header_len
    if header_end > len(body):
        raise CheckpointError("checkpoint header truncated")
    meta = json.loads(body[16:header_end].decode("utf-8"))
    payload = body[header_end:]

    arrays: dict[str, np.ndarray] = {}
    for entry in meta.pop("arrays"):
        start = entry["offset"]
        stop = start + entry["nbytes"]
        if stop > len(payload):
            raise CheckpointError(f"array {entry['name']} exceeds payload")
        flat = np.frombuffer(payload[start:stop], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = flat.reshape(entry["shape"]).copy()
    return meta, arrays
