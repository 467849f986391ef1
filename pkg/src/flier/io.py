"""Deterministic key->tensor files.

Layout: magic line, 8-byte little-endian header length, canonical JSON
header (metadata, tensor names/shapes/offsets, payload sha256), then the
raw little-endian float64 payload.  Identical content always serializes to
identical bytes, so save -> load -> save round-trips byte for byte.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"FLIERTENSORS/1\n"


class ArtifactError(RuntimeError):
    """A persisted artifact is missing, truncated or corrupted."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def atomic_write(path: Path | str, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def dump_tensors(tensors, meta: dict | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        a = np.array(arr, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = canonical_json({
        "meta": meta or {},
        "tensors": entries,
        "payload_bytes": offset,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + payload


def parse_tensors(blob: bytes, source: str = "<bytes>"):
    if not blob.startswith(MAGIC):
        raise ArtifactError(f"{source}: not a tensor file (bad magic)")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise ArtifactError(f"{source}: truncated header length")
    (hlen,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    if len(blob) < pos + hlen:
        raise ArtifactError(f"{source}: truncated header")
    try:
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"{source}: header parse error: {exc}") from None
    payload = blob[pos + hlen:]
    if len(payload) != header.get("payload_bytes"):
        raise ArtifactError(f"{source}: payload length {len(payload)} does not match header")
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise ArtifactError(f"{source}: payload checksum mismatch")
    tensors = OrderedDict()
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64)) * 8
        raw = payload[e["offset"]:e["offset"] + n]
        if len(raw) != n:
            raise ArtifactError(f"{source}: tensor {e['name']!r} is truncated")
        tensors[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return tensors, header["meta"]


def save_tensors(path, tensors, meta: dict | None = None) -> None:
    atomic_write(path, dump_tensors(tensors, meta))


def load_tensors(path):
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"{path}: file not found")
    return parse_tensors(path.read_bytes(), str(path))


def write_json(path, obj) -> None:
    atomic_write(path, (json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n").encode())


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"{path}: file not found")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{path}: JSON parse error: {exc}") from None
