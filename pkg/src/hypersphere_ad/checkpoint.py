"""Flat binary tensor container with a JSON sidecar manifest.

Layout (all integers little-endian):

    magic    8 bytes  b"HSADCKPT"
    version  u32      currently 1
    count    u32      number of tensors
    then per tensor:
      name_len u16, name utf-8 bytes
      dtype    u8   (0=float32, 1=float64, 2=int64, 3=uint8)
      ndim     u8
      dims     ndim * u32
      payload  raw little-endian array bytes, C order

The manifest (architecture/variant/provenance dict) is written next to
the container as ``<path>.json``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"HSADCKPT"
VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("uint8"): 3,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    """Malformed or unsupported container."""


def manifest_path(path) -> Path:
    return Path(str(path) + ".json")


def write_tensors(path, tensors: dict[str, np.ndarray], manifest: dict | None = None):
    """Write named arrays (insertion order preserved) plus the manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            le = arr.dtype.newbyteorder("<")
            if np.dtype(le) not in _DTYPE_CODES:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", _DTYPE_CODES[np.dtype(le)], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(le, copy=False).tobytes(order="C"))
    if manifest is not None:
        manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def read_tensors(path) -> tuple[dict[str, np.ndarray], dict | None]:
    """Read a container; returns (tensors, manifest or None)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a tensor container (bad magic)")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    offset = 16
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        code, ndim = struct.unpack_from("<BB", raw, offset)
        offset += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name!r}")
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)),
                            offset=offset).reshape(shape)
        offset += nbytes
        tensors[name] = arr.copy()  # decouple from the file buffer
    mpath = manifest_path(path)
    manifest = json.loads(mpath.read_text()) if mpath.exists() else None
    return tensors, manifest
