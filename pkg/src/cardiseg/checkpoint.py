"""Parameter checkpoint container.

Layout of a checkpoint file::

    bytes 0..7    magic b"CARDISEG"
    bytes 8..11   uint32 little-endian: manifest length M
    bytes 12..11+M  JSON manifest, UTF-8
    remainder     raw little-endian value blocks, concatenated

The manifest carries ``precision``, an optional free-form ``meta``
object (model configuration, fold id...), and one entry per tensor with
name, shape, dtype and byte offset/length into the payload.  Round
trips are bit-exact.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

__all__ = ["save_checkpoint", "load_checkpoint"]

_MAGIC = b"CARDISEG"
_DTYPES = {"f32": "<f4", "f64": "<f8"}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float arrays plus optional metadata to ``path``."""
    entries = []
    blocks = []
    offset = 0
    for name, arr in arrays.items():
        dname = _DTYPE_NAMES.get(np.dtype(arr.dtype))
        if dname is None:
            raise ParseError(f"unsupported checkpoint dtype {arr.dtype} for {name!r}")
        raw = np.ascontiguousarray(arr).astype(_DTYPES[dname], copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": dname,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blocks.append(raw)
        offset += len(raw)
    manifest = {
        "format": "cardiseg-checkpoint",
        "version": 1,
        "precision": entries[0]["dtype"] if entries else "f32",
        "meta": meta or {},
        "tensors": entries,
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(mbytes)))
        fh.write(mbytes)
        for raw in blocks:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns (name -> array, meta)."""
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ParseError(f"{path}: not a cardiseg checkpoint (bad magic)")
    (mlen,) = struct.unpack("<I", data[8:12])
    try:
        manifest = json.loads(data[12 : 12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: corrupt manifest: {exc}") from exc
    if manifest.get("format") != "cardiseg-checkpoint":
        raise ParseError(f"{path}: unknown container format")
    payload = data[12 + mlen :]
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise ParseError(f"{path}: truncated block for {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return arrays, manifest.get("meta", {})
