"""Versioned binary container for model checkpoints.

Layout: 8-byte magic, uint32 format version, uint32 header length, UTF-8 JSON
header, raw little-endian array payload.  The header carries the artifact kind,
free-form metadata, and a shape table (name/dtype/shape/offset per array) that
makes round-trips lossless for every stored dtype.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MPOSECKP"
FORMAT_VERSION = 1

_ALLOWED_DTYPES = {"<f4", "<f8", "<i4", "<i8", "|b1"}


class CheckpointError(ValueError):
    """Raised for corrupt, truncated, or malformed checkpoint files."""


class VersionMismatchError(CheckpointError):
    """Raised when a file's format version differs from this implementation."""


def save_arrays(path, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays plus metadata to ``path`` atomically."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.str.startswith(">"):
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        code = arr.dtype.str
        if code not in _ALLOWED_DTYPES:
            raise CheckpointError(f"unsupported array dtype {arr.dtype} for '{name}'")
        data = arr.tobytes(order="C")
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)

    header = json.dumps({"kind": kind, "meta": meta or {}, "arrays": entries}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_arrays(path, expected_kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container written by :func:`save_arrays`.

    Raises CheckpointError on corruption/truncation (no partial objects) and
    VersionMismatchError naming both versions on a format mismatch.
    """
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8:
        raise CheckpointError(f"{path}: truncated checkpoint (only {len(raw)} bytes)")
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a meshpose checkpoint")
    version, header_len = struct.unpack_from("<II", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path}: checkpoint format version {version}, this implementation reads version {FORMAT_VERSION}"
        )
    body = len(MAGIC) + 8
    if len(raw) < body + header_len:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(raw[body : body + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint header: {exc}") from exc

    if expected_kind is not None and header.get("kind") != expected_kind:
        raise CheckpointError(f"{path}: checkpoint kind {header.get('kind')!r}, expected {expected_kind!r}")

    payload = raw[body + header_len :]
    total = sum(e["nbytes"] for e in header["arrays"])
    if len(payload) != total:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, shape table declares {total}")

    arrays = {}
    for entry in header["arrays"]:
        if entry["dtype"] not in _ALLOWED_DTYPES:
            raise CheckpointError(f"{path}: unsupported dtype {entry['dtype']} in shape table")
        chunk = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(chunk, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        arrays[entry["name"]] = arr
    return arrays, header.get("meta", {})
