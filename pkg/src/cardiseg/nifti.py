"""Minimal single-file NIfTI-1 (.nii) reader and writer.

Only what volume ingestion needs: the standard 348-byte header with
magic "n+1\\0", 2-4 dimensional arrays of the common scalar datatypes,
grid spacing from pixdim, and scl_slope/scl_inter rescaling.  Arrays
are returned as (z, y, x) with matching (z, y, x) spacing; on disk the
x index varies fastest, per the published header layout.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

__all__ = ["read_nifti", "write_nifti"]

_HEADER_SIZE = 348
_MAGIC_SINGLE = b"n+1\x00"
_MAGIC_PAIR = b"ni1\x00"

# datatype code -> numpy dtype (endianness applied at read time)
_DTYPES = {
    2: "u1",
    4: "i2",
    8: "i4",
    16: "f4",
    64: "f8",
    256: "i1",
    512: "u2",
    768: "u4",
}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}
_BITPIX = {2: 8, 4: 16, 8: 32, 16: 32, 64: 64, 256: 8, 512: 16, 768: 32}


def read_nifti(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read a .nii volume; returns ((z, y, x) array, (z, y, x) spacing in mm)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER_SIZE:
        raise ParseError(f"{path}: file shorter than a NIfTI-1 header")
    magic = raw[344:348]
    if magic == _MAGIC_PAIR:
        raise ParseError(f"{path}: two-file NIfTI (.hdr/.img) is not supported")
    if magic != _MAGIC_SINGLE:
        raise ParseError(f"{path}: bad magic {magic!r}, expected {_MAGIC_SINGLE!r}")
    for endian in ("<", ">"):
        (sizeof_hdr,) = struct.unpack(endian + "i", raw[0:4])
        if sizeof_hdr == _HEADER_SIZE:
            break
    else:
        raise ParseError(f"{path}: sizeof_hdr is not 348 in either byte order")

    dim = struct.unpack(endian + "8h", raw[40:56])
    ndim = dim[0]
    if not 2 <= ndim <= 4:
        raise ParseError(f"{path}: unsupported dimensionality {ndim}")
    extents = [max(1, d) for d in dim[1 : 1 + ndim]]
    if ndim == 4:
        if extents[3] != 1:
            raise ParseError(f"{path}: 4D volumes with multiple frames are not supported")
        extents = extents[:3]

    (datatype,) = struct.unpack(endian + "h", raw[70:72])
    if datatype not in _DTYPES:
        raise ParseError(f"{path}: unsupported datatype code {datatype}")
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    (vox_offset,) = struct.unpack(endian + "f", raw[108:112])
    slope, inter = struct.unpack(endian + "2f", raw[112:120])
    offset = int(vox_offset)
    if offset < _HEADER_SIZE:
        raise ParseError(f"{path}: vox_offset {offset} points inside the header")

    count = int(np.prod(extents))
    dtype = np.dtype(endian + _DTYPES[datatype])
    nbytes = count * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise ParseError(f"{path}: data block truncated")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    # on-disk x varies fastest: a C-order reshape of reversed dims is (z, y, x)
    zyx = [1] * (3 - len(extents)) + list(reversed(extents))
    arr = flat.reshape(zyx)
    arr = arr.astype(arr.dtype.newbyteorder("="))
    if slope not in (0.0, 1.0) or inter != 0.0:
        scale = slope if slope != 0.0 else 1.0
        arr = (arr.astype(np.float32) * scale) + inter

    used = 3 if ndim >= 3 else 2
    spacing_xyz = list(pixdim[1 : 1 + used])
    if any(s <= 0 for s in spacing_xyz):
        raise ParseError(f"{path}: non-positive pixdim {spacing_xyz}")
    while len(spacing_xyz) < 3:
        spacing_xyz.append(1.0)
    spacing = (float(spacing_xyz[2]), float(spacing_xyz[1]), float(spacing_xyz[0]))
    return arr, spacing


def write_nifti(path, array: np.ndarray, spacing: tuple[float, float, float]) -> None:
    """Write a (z, y, x) array as a little-endian single-file .nii."""
    arr = np.asarray(array)
    if arr.ndim != 3:
        raise ParseError(f"write_nifti needs a 3D (z, y, x) array, got {arr.ndim}D")
    code = _DTYPE_CODES.get(np.dtype(arr.dtype.newbyteorder("=")))
    if code is None:
        raise ParseError(f"unsupported dtype {arr.dtype} for NIfTI output")

    header = bytearray(_HEADER_SIZE)
    struct.pack_into("<i", header, 0, _HEADER_SIZE)
    dz, dy, dx = arr.shape
    struct.pack_into("<8h", header, 40, 3, dx, dy, dz, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, code)
    struct.pack_into("<h", header, 72, _BITPIX[code])
    sz, sy, sx = spacing
    struct.pack_into("<8f", header, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, 352.0)  # vox_offset
    struct.pack_into("<2f", header, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<b", header, 123, 2)  # xyzt_units: millimetres
    header[344:348] = _MAGIC_SINGLE

    payload = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(b"\x00" * 4)  # pad to vox_offset 352
        fh.write(payload)
