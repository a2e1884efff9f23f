"""Reader/writer for single-file, uncompressed NIfTI-1 volumes.

Only what CT ingestion needs: 3 spatial dims, int16 or float32 voxels,
slope/intercept scaling and pixdim spacings. Orientation (qform/sform) and
extensions are ignored. The file's x-fastest voxel order is exactly the
row-major (z, y, x) order used by :class:`~swdl.volume.Volume`.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import BadMagicError, HeaderError, TruncatedError, UnsupportedDatatypeError
from .volume import Volume

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

DT_INT16 = 4
DT_FLOAT32 = 16
_DTYPES = {DT_INT16: ("i2", 16), DT_FLOAT32: ("f4", 32)}


def _endianness(buf: bytes) -> str:
    if len(buf) < HEADER_SIZE:
        raise TruncatedError(f"header truncated: {len(buf)} of {HEADER_SIZE} bytes")
    for e in "<>":
        if struct.unpack(e + "i", buf[:4])[0] == HEADER_SIZE:
            return e
    raise HeaderError("sizeof_hdr is not 348 in either byte order")


def read_header(buf: bytes) -> dict:
    e = _endianness(buf)
    magic = bytes(buf[344:348])
    if magic != MAGIC:
        raise BadMagicError(f"unsupported magic {magic!r}")
    dim = struct.unpack(e + "8h", buf[40:56])
    datatype, bitpix = struct.unpack(e + "2h", buf[70:74])
    pixdim = struct.unpack(e + "8f", buf[76:108])
    vox_offset, slope, inter = struct.unpack(e + "3f", buf[108:120])
    if dim[0] != 3:
        raise HeaderError(f"only 3D volumes are supported (dim[0]={dim[0]})")
    if min(dim[1:4]) < 1:
        raise HeaderError(f"non-positive spatial dims {dim[1:4]}")
    if datatype not in _DTYPES:
        raise UnsupportedDatatypeError(f"unsupported datatype code {datatype}")
    if bitpix != _DTYPES[datatype][1]:
        raise HeaderError(f"bitpix {bitpix} inconsistent with datatype {datatype}")
    if not vox_offset >= VOX_OFFSET or vox_offset != int(vox_offset):
        raise HeaderError(f"bad vox_offset {vox_offset}")
    spacing = tuple(abs(float(p)) for p in pixdim[1:4])
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise HeaderError(f"bad pixdim {pixdim[1:4]}")
    return {
        "endian": e,
        "dims": tuple(int(d) for d in dim[1:4]),  # (nx, ny, nz)
        "datatype": int(datatype),
        "pixdim": spacing,  # (sx, sy, sz)
        "vox_offset": int(vox_offset),
        "scl_slope": float(slope),
        "scl_inter": float(inter),
    }


def read_nifti(buf: bytes) -> Volume:
    hdr = read_header(buf)
    nx, ny, nz = hdr["dims"]
    code, _ = _DTYPES[hdr["datatype"]]
    dt = np.dtype(hdr["endian"] + code)
    start = hdr["vox_offset"]
    need = start + nx * ny * nz * dt.itemsize
    if len(buf) < need:
        raise TruncatedError(f"payload truncated: need {need} bytes, have {len(buf)}")
    data = np.frombuffer(buf, dtype=dt, count=nx * ny * nz, offset=start).astype(np.float64)
    if hdr["scl_slope"] != 0:
        data = data * hdr["scl_slope"] + hdr["scl_inter"]
    if not np.all(np.isfinite(data)):
        raise HeaderError("voxel data contains non-finite values")
    sx, sy, sz = hdr["pixdim"]
    return Volume(data.reshape(nz, ny, nx), (sz, sy, sx))


def _header(shape, spacing, datatype, slope=1.0, inter=0.0, endian="<") -> bytes:
    nz, ny, nx = shape
    sz, sy, sx = spacing
    h = bytearray(HEADER_SIZE)
    struct.pack_into(endian + "i", h, 0, HEADER_SIZE)
    struct.pack_into(endian + "8h", h, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into(endian + "2h", h, 70, datatype, _DTYPES[datatype][1])
    struct.pack_into(endian + "8f", h, 76, 1.0, sx, sy, sz, 0, 0, 0, 0)
    struct.pack_into(endian + "3f", h, 108, float(VOX_OFFSET), slope, inter)
    struct.pack_into("b", h, 123, 2)  # xyzt_units: mm
    h[344:348] = MAGIC
    return bytes(h)


def write_nifti(v: Volume) -> bytes:
    """Float32, little-endian, unit scaling, vox_offset 352."""
    payload = np.ascontiguousarray(v.data, dtype="<f4").tobytes()
    return _header(v.shape, v.spacing, DT_FLOAT32) + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + payload


def encode_nifti(data: np.ndarray, spacing, datatype: int = DT_FLOAT32, slope: float = 1.0,
                 inter: float = 0.0, endian: str = "<") -> bytes:
    """Lower-level writer used to produce int16 / big-endian files."""
    code, _ = _DTYPES[datatype]
    payload = np.ascontiguousarray(data, dtype=endian + code).tobytes()
    return _header(data.shape, spacing, datatype, slope, inter, endian) + b"\x00" * 4 + payload


def load(path) -> Volume:
    return read_nifti(Path(path).read_bytes())


def save(path, v: Volume) -> None:
    Path(path).write_bytes(write_nifti(v))
