"""Minimal NIfTI-1 single-file reader/writer.

Covers the subset needed for LGE CMR segmentation data: 3D volumes in
`.nii` or `.nii.gz` files, scalar datatypes, pixdim spacing and the
scl_slope/scl_inter intensity scaling. Arrays are exchanged in (z, y, x)
index order; on disk NIfTI stores x fastest, which is exactly C order for
a (nz, ny, nx) array, so no transpose is needed.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

HEADER_SIZE = 348
# sizeof_hdr, data_type, db_name, extents, session_error, regular, dim_info,
# dim[8], intent_p1..3, intent_code, datatype, bitpix, slice_start,
# pixdim[8], vox_offset, scl_slope, scl_inter, slice_end, slice_code,
# xyzt_units, cal_max, cal_min, slice_duration, toffset, glmax, glmin,
# descrip, aux_file, qform_code, sform_code, quatern b/c/d, qoffset x/y/z,
# srow_x, srow_y, srow_z, intent_name, magic
_HDR_FMT = "i10s18sihcc8h3fhhhh8ffffhbbffffii80s24shh6f4f4f4f16s4s"

_DTYPES = {
    2: np.dtype("uint8"),
    4: np.dtype("int16"),
    8: np.dtype("int32"),
    16: np.dtype("float32"),
    64: np.dtype("float64"),
    256: np.dtype("int8"),
    512: np.dtype("uint16"),
    768: np.dtype("uint32"),
}
_CODES = {v: k for k, v in _DTYPES.items()}


def _open(path: Path, mode: str):
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def read(path: str | Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read a NIfTI-1 file.

    Returns (data, spacing) with data shaped (z, y, x) and spacing
    (sz, sy, sx) in mm. Intensity scaling is applied when scl_slope is set.
    """
    path = Path(path)
    try:
        with _open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if len(raw) < HEADER_SIZE:
        raise DataError(f"{path}: truncated NIfTI header")

    for endian in ("<", ">"):
        fields = struct.unpack_from(endian + _HDR_FMT, raw, 0)
        if fields[0] == HEADER_SIZE:
            break
    else:
        raise DataError(f"{path}: not a NIfTI-1 file (bad sizeof_hdr)")

    magic = fields[-1]
    if magic[:3] not in (b"n+1", b"ni1"):
        raise DataError(f"{path}: unsupported magic {magic!r}")
    if magic[:3] == b"ni1":
        raise DataError(f"{path}: two-file (.hdr/.img) NIfTI is not supported")

    dim = fields[7:15]
    ndim = dim[0]
    if ndim < 3:
        raise DataError(f"{path}: expected a 3D volume, got dim0={ndim}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    extra = int(np.prod([max(1, d) for d in dim[4 : 1 + ndim]])) if ndim > 3 else 1
    if extra != 1:
        raise DataError(f"{path}: 4D+ volumes with more than one frame are not supported")

    datatype = fields[19]
    if datatype not in _DTYPES:
        raise DataError(f"{path}: unsupported datatype code {datatype}")
    dtype = _DTYPES[datatype].newbyteorder(endian)

    pixdim = fields[22:30]
    vox_offset = int(fields[30])
    scl_slope, scl_inter = fields[31], fields[32]

    count = nx * ny * nz
    buf = raw[vox_offset : vox_offset + count * dtype.itemsize]
    if len(buf) != count * dtype.itemsize:
        raise DataError(f"{path}: data blob shorter than header promises")
    data = np.frombuffer(buf, dtype=dtype).reshape(nz, ny, nx)

    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data.astype(np.float64) * slope + scl_inter

    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    return np.ascontiguousarray(data), spacing


def write(path: str | Path, data: np.ndarray, spacing: tuple[float, float, float]) -> None:
    """Write a (z, y, x) array to a NIfTI-1 single file (.nii or .nii.gz)."""
    path = Path(path)
    data = np.ascontiguousarray(data)
    if data.ndim != 3:
        raise DataError(f"expected 3D array, got shape {data.shape}")
    if data.dtype not in _CODES:
        raise DataError(f"unsupported dtype {data.dtype} for NIfTI output")

    nz, ny, nx = data.shape
    sz, sy, sx = spacing
    dim = (3, nx, ny, nz, 1, 1, 1, 1)
    pixdim = (1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    header = struct.pack(
        "<" + _HDR_FMT,
        HEADER_SIZE,
        b"", b"", 0, 0, b"r", b"\x00",
        *dim,
        0.0, 0.0, 0.0,
        0,
        _CODES[data.dtype],
        data.dtype.itemsize * 8,
        0,
        *pixdim,
        352.0,  # vox_offset: header + 4 byte extension flag
        1.0, 0.0,
        0, 0, 0,
        0.0, 0.0, 0.0, 0.0,
        0, 0,
        b"scarseg", b"",
        0, 0,
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        sx, 0.0, 0.0, 0.0,
        0.0, sy, 0.0, 0.0,
        0.0, 0.0, sz, 0.0,
        b"",
        b"n+1\x00",
    )
    with _open(path, "wb") as f:
        f.write(header)
        f.write(b"\x00\x00\x00\x00")  # no header extensions
        f.write(data.tobytes())
