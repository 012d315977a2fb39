"""Single-file binary checkpoint format.

Layout, all little-endian:

    [u64 header_length] [UTF-8 JSON header] [zero pad to 8-byte alignment]
    [raw tensor blobs, each 8-byte aligned]

The JSON header carries a format ``version`` integer, a free-form
``meta`` dict (model config, ablation flags, training iteration), and a
``tensors`` array of ``{name, shape, dtype, byte_offset}`` records.
Offsets are relative to the start of the blob section.  Parameters are
stored as 32-bit floats regardless of the in-memory training dtype.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .errors import CheckpointError

FORMAT_VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def _align8(n: int) -> int:
    return (n + 7) & ~7


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Serialize named arrays plus metadata; atomic against partial writes."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype.kind == "f" and arr.dtype.itemsize != 4:
            arr = arr.astype("<f4")
        else:
            arr = arr.astype("<f4") if arr.dtype != np.dtype("<f4") else arr
        blob = arr.tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": "<f4", "byte_offset": offset}
        )
        blobs.append(blob)
        offset = _align8(offset + len(blob))
    header = {"version": FORMAT_VERSION, "meta": meta or {}, "tensors": entries}
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    parts = [np.uint64(len(header_bytes)).tobytes(), header_bytes]
    pad = _align8(8 + len(header_bytes)) - (8 + len(header_bytes))
    parts.append(b"\x00" * pad)
    for i, blob in enumerate(blobs):
        parts.append(blob)
        if i < len(blobs) - 1:
            parts.append(b"\x00" * (_align8(len(blob)) - len(blob)))
    atomic_write_bytes(path, b"".join(parts))


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns (name -> float32 array, meta dict)."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < 8:
        raise CheckpointError(f"checkpoint {path} is truncated")
    header_len = int(np.frombuffer(raw[:8], dtype="<u8")[0])
    header_end = 8 + header_len
    if header_end > len(raw):
        raise CheckpointError(f"checkpoint {path} header exceeds file size")
    try:
        header = json.loads(raw[8:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"checkpoint {path} has a malformed header: {e}") from e
    version = header.get("version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint {path}: unsupported format version {version!r}")
    blob_base = _align8(header_end)
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"checkpoint {path}: unknown dtype {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = blob_base + entry["byte_offset"]
        end = start + count * dtype.itemsize
        if end > len(raw):
            raise CheckpointError(f"checkpoint {path}: tensor {entry['name']!r} is truncated")
        arr = np.frombuffer(raw[start:end], dtype=dtype).reshape(shape).copy()
        tensors[entry["name"]] = arr
    return tensors, header.get("meta", {})
