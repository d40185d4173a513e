"""Single-file NIfTI-1 reading and writing.

Deliberately strict: little-endian, single-file magic ``n+1\\0`` only,
datatypes limited to uint8/int16/float32/float64. Anything else is
rejected with a named error rather than guessed at. gzip compression is
chosen by file extension (``.nii.gz``).

The 348-byte header is parsed with a single struct format string; the
field offsets below follow the nifti1.h reference layout.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import NiftiFormatError, NiftiUnsupportedError, ValidationError

HEADER_SIZE = 348
VOX_OFFSET = 352  # header + 4 zero extension bytes

# nifti datatype code -> numpy dtype (little-endian)
_DTYPES = {
    2: np.dtype("<u1"),   # uint8
    4: np.dtype("<i2"),   # int16
    16: np.dtype("<f4"),  # float32
    64: np.dtype("<f8"),  # float64
}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}
_BITPIX = {2: 8, 4: 16, 16: 32, 64: 64}


def _open(path: Path, mode: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def _quaternion_affine(b: float, c: float, d: float, qfac: float,
                       spacing: tuple, offsets: tuple) -> np.ndarray:
    """Rotation-plus-scale affine from the qform quaternion fields."""
    a_sq = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a_sq) if a_sq > 0 else 0.0
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])
    qfac = -1.0 if qfac < 0 else 1.0
    scale = np.diag([spacing[0], spacing[1], qfac * spacing[2]])
    affine = np.eye(4)
    affine[:3, :3] = rot @ scale
    affine[:3, 3] = offsets
    return affine


def read_header(path) -> dict:
    """Parse and sanity-check the header; no voxel data is read.

    Returns a dict with dims, spacing, datatype, vox_offset, scl_slope,
    scl_inter and affine (or None). Raises NiftiFormatError for files that
    are not little-endian single-file NIfTI-1, NiftiUnsupportedError for
    rejected features.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with _open(path, "rb") as fh:
        raw = fh.read(HEADER_SIZE)
    if len(raw) < HEADER_SIZE:
        raise NiftiFormatError(f"{path}: file shorter than the 348-byte header")

    sizeof_hdr = struct.unpack("<i", raw[0:4])[0]
    if sizeof_hdr != HEADER_SIZE:
        # 1_543_569_408 is 348 byte-swapped, i.e. a big-endian file
        raise NiftiFormatError(
            f"{path}: sizeof_hdr={sizeof_hdr}, expected 348 (little-endian)")

    magic = raw[344:348]
    if magic != b"n+1\x00":
        raise NiftiFormatError(
            f"{path}: magic {magic!r} is not the single-file 'n+1' signature")

    dim = struct.unpack("<8h", raw[40:56])
    ndim = dim[0]
    if ndim < 3:
        raise NiftiUnsupportedError(f"{path}: dim[0]={ndim}, need a 3D volume")
    if ndim > 3 and any(d > 1 for d in dim[4:1 + ndim]):
        raise NiftiUnsupportedError(
            f"{path}: {ndim}D data not supported (trailing dims must be 1)")
    nx, ny, nz = (int(d) for d in dim[1:4])
    if nx <= 0 or ny <= 0 or nz <= 0:
        raise NiftiFormatError(f"{path}: non-positive dims {dim[1:4]}")

    datatype = struct.unpack("<h", raw[70:72])[0]
    if datatype not in _DTYPES:
        raise NiftiUnsupportedError(
            f"{path}: datatype code {datatype} not in supported set "
            f"{sorted(_DTYPES)} (uint8/int16/float32/float64)")

    pixdim = struct.unpack("<8f", raw[76:108])
    spacing = tuple(float(p) for p in pixdim[1:4])
    if any(s <= 0 for s in spacing):
        raise ValidationError(f"{path}: non-positive pixdim {spacing}")

    vox_offset = float(struct.unpack("<f", raw[108:112])[0])
    if vox_offset < HEADER_SIZE:
        vox_offset = VOX_OFFSET
    scl_slope, scl_inter = struct.unpack("<2f", raw[112:120])

    qform_code, sform_code = struct.unpack("<2h", raw[252:256])
    affine = None
    if sform_code > 0:
        rows = struct.unpack("<12f", raw[280:328])
        affine = np.eye(4)
        affine[0, :] = rows[0:4]
        affine[1, :] = rows[4:8]
        affine[2, :] = rows[8:12]
    elif qform_code > 0:
        b, c, d = struct.unpack("<3f", raw[256:268])
        offsets = struct.unpack("<3f", raw[268:280])
        affine = _quaternion_affine(b, c, d, pixdim[0], spacing, offsets)

    return {
        "dims": (nx, ny, nz),
        "spacing": spacing,
        "datatype": int(datatype),
        "vox_offset": int(vox_offset),
        "scl_slope": float(scl_slope),
        "scl_inter": float(scl_inter),
        "affine": affine,
    }


def read_volume(path) -> tuple[np.ndarray, tuple, np.ndarray | None]:
    """Read voxel data as float64 plus (spacing, affine).

    Data is returned in (x, y, z) index order. Intensity scaling
    (scl_slope/scl_inter) is applied when the header requests it.
    Non-finite voxels fail validation, naming the first offending index.
    """
    path = Path(path)
    hdr = read_header(path)
    nx, ny, nz = hdr["dims"]
    dtype = _DTYPES[hdr["datatype"]]
    nbytes = nx * ny * nz * dtype.itemsize
    with _open(path, "rb") as fh:
        fh.seek(hdr["vox_offset"])
        raw = fh.read(nbytes)
    if len(raw) != nbytes:
        raise NiftiFormatError(
            f"{path}: truncated data section ({len(raw)} of {nbytes} bytes)")
    # file stores x fastest; reshape in Fortran order to get [x, y, z]
    data = np.frombuffer(raw, dtype=dtype).reshape((nx, ny, nz), order="F")
    data = np.ascontiguousarray(data).astype(np.float64)

    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if (slope not in (0.0, 1.0)) or inter != 0.0:
        data = data * (slope if slope != 0.0 else 1.0) + inter

    bad = ~np.isfinite(data)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValidationError(f"{path}: non-finite voxel at index {idx}")
    return data, hdr["spacing"], hdr["affine"]


def write_volume(data: np.ndarray, spacing, path, affine=None,
                 dtype: str = "float32") -> None:
    """Write a single-file little-endian NIfTI-1 volume.

    ``dtype`` is "float32" or "uint8". The sform carries the affine
    (defaulting to a diagonal spacing matrix); qform is left unset.
    I/O failures propagate with the path in the message.
    """
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError(f"expected 3D data, got shape {data.shape}")
    np_dtype = np.dtype("<f4") if dtype == "float32" else np.dtype("<u1")
    code = _DTYPE_CODES[np_dtype]
    nx, ny, nz = data.shape
    sx, sy, sz = (float(s) for s in spacing)

    if affine is None:
        affine = np.diag([sx, sy, sz, 1.0])
    affine = np.asarray(affine, dtype=np.float64)

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    hdr[39] = ord("r")  # 'regular' convention byte
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, _BITPIX[code])
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    hdr[123] = 2  # xyzt_units: millimetres
    descrip = b"lesionforge"
    hdr[148:148 + len(descrip)] = descrip
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform_code=0, sform_code=1
    struct.pack_into("<12f", hdr, 280, *affine[0, :], *affine[1, :], *affine[2, :])
    hdr[344:348] = b"n+1\x00"

    payload = np.ascontiguousarray(data.astype(np_dtype)).tobytes(order="F")
    try:
        with _open(Path(path), "wb") as fh:
            fh.write(bytes(hdr))
            fh.write(b"\x00\x00\x00\x00")  # no extensions
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc}") from exc
