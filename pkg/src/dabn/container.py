"""Versioned binary container for checkpoints and dataset caches.

Layout::

    magic bytes | u32 little-endian manifest length | manifest (UTF-8 JSON) | tensor blobs

The manifest carries caller metadata under ``"meta"`` and a ``"tensors"`` list
of ``{name, dtype, shape, offset, nbytes}`` records; offsets are relative to
the first blob byte. JSON keys are sorted and tensors are written in the given
order so equal content always yields equal bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

_DTYPES = {"f4": "<f4", "f8": "<f8", "i8": "<i8", "i4": "<i4", "u1": "|u1"}


def dump(path, magic: bytes, meta: dict, tensors: dict[str, tuple[str, np.ndarray]]) -> None:
    """Write ``tensors`` (name -> (dtype code, array)) with ``meta``."""
    records, blobs, offset = [], [], 0
    for name, (code, array) in tensors.items():
        blob = np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()
        records.append(
            {"name": name, "dtype": code, "shape": list(np.shape(array)), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"meta": meta, "tensors": records}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(magic):
        raise DataError(f"{path}: not a {magic.decode()} file")
    pos = len(magic)
    try:
        (size,) = struct.unpack_from("<I", raw, pos)
        manifest = json.loads(raw[pos + 4 : pos + 4 + size])
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: corrupt manifest") from exc
    base = pos + 4 + size
    tensors = {}
    for rec in manifest["tensors"]:
        start = base + rec["offset"]
        chunk = raw[start : start + rec["nbytes"]]
        if len(chunk) != rec["nbytes"]:
            raise DataError(f"{path}: truncated tensor {rec['name']!r}")
        dtype = np.dtype(_DTYPES[rec["dtype"]])
        tensors[rec["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(rec["shape"]).astype(dtype.newbyteorder("="))
    return manifest["meta"], tensors
