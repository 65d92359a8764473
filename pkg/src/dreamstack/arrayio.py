"""Tiny array container: one JSON header line, then raw little-endian bytes.

Used for both replay chunk files and checkpoint parameter blobs. The header
carries a format version, arbitrary metadata, and the name/dtype/shape of
every array; payloads follow in header order with no padding.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class FormatError(Exception):
    """Raised when a container file's header or payload is malformed."""


def write_arrays(path: str | Path, arrays: dict[str, np.ndarray],
                 meta: dict | None = None) -> None:
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.dtype.newbyteorder("<")
        entries.append({"name": name, "dtype": le.str, "shape": list(arr.shape)})
        blobs.append(arr.astype(le, copy=False).tobytes())
    header = {"version": FORMAT_VERSION, "arrays": entries}
    header.update(meta or {})
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
        f.write(b"\n")
        for blob in blobs:
            f.write(blob)


def read_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line)
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"{path}: unreadable header: {e}") from None
        if not isinstance(header, dict) or "version" not in header:
            raise FormatError(f"{path}: header is not a container header")
        if header["version"] != FORMAT_VERSION:
            raise FormatError(
                f"{path}: unsupported container version {header['version']}"
            )
        arrays: dict[str, np.ndarray] = {}
        for entry in header.get("arrays", []):
            try:
                dtype = np.dtype(entry["dtype"])
                shape = tuple(entry["shape"])
                name = entry["name"]
            except (KeyError, TypeError) as e:
                raise FormatError(f"{path}: bad array entry: {e}") from None
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            buf = f.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise FormatError(f"{path}: truncated payload for {name!r}")
            arrays[name] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
        meta = {k: v for k, v in header.items() if k not in ("version", "arrays")}
        return arrays, meta
