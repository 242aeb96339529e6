"""Single-file parameter container: JSON manifest header plus raw payload.

Layout: 8-byte magic, little-endian uint64 header length, canonical JSON
header, then the concatenated array payload. The manifest records name,
dtype, shape, and byte range for every entry, so files are self-describing
and the same format serves checkpoints and externally supplied weight
imports. Writing is canonical (entries sorted by name, compact JSON), so a
save -> load -> save round trip is byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataError

__all__ = ["write_container", "read_container", "MAGIC"]

MAGIC = b"FRCONT01"

_DTYPES = {"<f4": "<f4", "<f8": "<f8", "|u1": "|u1", "<i8": "<i8"}


def _canonical_dtype(arr: np.ndarray) -> str:
    mapping = {
        np.dtype(np.float32): "<f4",
        np.dtype(np.float64): "<f8",
        np.dtype(np.uint8): "|u1",
        np.dtype(np.int64): "<i8",
    }
    key = mapping.get(arr.dtype)
    if key is None:
        raise DataError(f"unsupported container dtype {arr.dtype}")
    return key


def write_container(path: str | Path, arrays: dict[str, np.ndarray], extra: dict) -> None:
    """Serialize named arrays plus a JSON-compatible extra header to path."""
    path = Path(path)
    manifest = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dtype = _canonical_dtype(arr)
        data = arr.astype(np.dtype(dtype), copy=False).tobytes()
        manifest.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": list(arr.shape),
                "offset": offset,
                "length": len(data),
            }
        )
        chunks.append(data)
        offset += len(data)
    header = {"format": 1, "manifest": manifest, "extra": extra}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        for chunk in chunks:
            fh.write(chunk)


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container, validating the manifest against the payload."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"container not found: {path}")
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: not a parameter container (bad magic)")
    header_len = int.from_bytes(blob[len(MAGIC) : len(MAGIC) + 8], "little")
    header_start = len(MAGIC) + 8
    if header_start + header_len > len(blob):
        raise DataError(f"{path}: truncated header")
    try:
        header = json.loads(blob[header_start : header_start + header_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: corrupt header: {exc}") from exc
    payload = blob[header_start + header_len :]

    arrays: dict[str, np.ndarray] = {}
    for entry in header.get("manifest", []):
        name = entry.get("name", "<unnamed>")
        dtype = entry.get("dtype")
        if dtype not in _DTYPES:
            raise DataError(f"{path}: entry {name!r} has unsupported dtype {dtype}")
        shape = tuple(entry.get("shape", []))
        offset, length = entry.get("offset", -1), entry.get("length", -1)
        expected = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
        if length != expected:
            raise DataError(
                f"{path}: entry {name!r} declares {length} bytes but shape {shape} "
                f"needs {expected}"
            )
        if offset < 0 or offset + length > len(payload):
            raise DataError(f"{path}: entry {name!r} payload range out of bounds")
        arrays[name] = np.frombuffer(
            payload[offset : offset + length], dtype=np.dtype(dtype)
        ).reshape(shape).copy()
    return header.get("extra", {}), arrays
