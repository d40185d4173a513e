import gzip
import struct

import numpy as np
import pytest

from lesionforge.errors import (NiftiFormatError, NiftiUnsupportedError,
                                ValidationError)
from lesionforge.nifti import VOX_OFFSET, read_header, write_volume
from lesionforge.rng import make_rng
from lesionforge.volume import Mask, Volume, load_mask, load_nifti, save_nifti


def test_header_echo_96_cube(tmp_path):
    path = tmp_path / "big.nii"
    write_volume(np.zeros((96, 96, 96), dtype=np.float32), (1, 1, 1), path)
    v = load_nifti(path)
    assert v.dims == (96, 96, 96)
    assert v.spacing == (1.0, 1.0, 1.0)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.nii"
    write_volume(np.zeros((4, 4, 4)), (1, 1, 1), path)
    raw = bytearray(path.read_bytes())
    raw[344:348] = b"ni1\x00"  # dual-file magic is explicitly unsupported
    path.write_bytes(bytes(raw))
    with pytest.raises(NiftiFormatError):
        load_nifti(path)


def test_big_endian_rejected(tmp_path):
    path = tmp_path / "be.nii"
    write_volume(np.zeros((4, 4, 4)), (1, 1, 1), path)
    raw = bytearray(path.read_bytes())
    struct.pack_into(">i", raw, 0, 348)
    path.write_bytes(bytes(raw))
    with pytest.raises(NiftiFormatError, match="little-endian"):
        load_nifti(path)


def test_unsupported_datatype(tmp_path):
    path = tmp_path / "c64.nii"
    write_volume(np.zeros((4, 4, 4)), (1, 1, 1), path)
    raw = bytearray(path.read_bytes())
    struct.pack_into("<h", raw, 70, 32)  # complex64
    path.write_bytes(bytes(raw))
    with pytest.raises(NiftiUnsupportedError, match="datatype"):
        load_nifti(path)


def test_nan_voxel_names_first_index(tmp_path):
    data = np.zeros((3, 3, 3), dtype=np.float32)
    data[1, 2, 0] = np.nan
    path = tmp_path / "nan.nii"
    write_volume(data, (1, 1, 1), path)
    with pytest.raises(ValidationError, match=r"\(1, 2, 0\)"):
        load_nifti(path)


def test_truncated_data_section(tmp_path):
    path = tmp_path / "short.nii"
    write_volume(np.zeros((8, 8, 8)), (1, 1, 1), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:VOX_OFFSET + 100])
    with pytest.raises(NiftiFormatError, match="truncated"):
        load_nifti(path)


@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_roundtrip_20_random_volumes(tmp_path, suffix):
    rng = make_rng(7)
    spacings = [(1.0, 1.0, 1.0), (0.5, 1.25, 2.0), (2.0, 2.0, 2.0)]
    for i in range(20):
        shape = tuple(int(rng.integers(2, 12)) for _ in range(3))
        spacing = spacings[i % len(spacings)]
        # float32-representable data so the float32 file is lossless
        data = rng.random(shape).astype(np.float32).astype(np.float64)
        v = Volume(data, spacing)
        path = tmp_path / f"v{i}{suffix}"
        save_nifti(v, path)
        v2 = load_nifti(path)
        assert v2.dims == v.dims
        assert v2.spacing == v.spacing
        assert np.array_equal(v2.data, v.data)


def test_mask_roundtrip_and_zero_bytes(tmp_path):
    m = Mask(np.zeros((5, 6, 7), dtype=np.uint8), (1, 1, 1))
    path = tmp_path / "m.nii.gz"
    save_nifti(m, path)
    with gzip.open(path, "rb") as fh:
        raw = fh.read()
    assert raw[VOX_OFFSET:] == b"\x00" * (5 * 6 * 7)
    m2 = load_mask(path)
    assert np.array_equal(m2.data, m.data)
    assert m2.spacing == m.spacing


def test_mask_loader_rejects_nonbinary(tmp_path):
    path = tmp_path / "notmask.nii"
    write_volume(np.full((3, 3, 3), 0.5, dtype=np.float32), (1, 1, 1), path)
    with pytest.raises(ValidationError, match="binary"):
        load_mask(path)


def test_unwritable_directory(tmp_path):
    target = tmp_path / "no_such_dir" / "x.nii"
    with pytest.raises(OSError, match="x.nii"):
        save_nifti(Volume(np.zeros((2, 2, 2)), (1, 1, 1)), target)


def test_qform_fallback(tmp_path):
    path = tmp_path / "q.nii"
    write_volume(np.zeros((4, 4, 4)), (1.0, 2.0, 3.0), path)
    raw = bytearray(path.read_bytes())
    # clear sform, set identity-rotation qform with offsets
    struct.pack_into("<2h", raw, 252, 1, 0)
    struct.pack_into("<3f", raw, 256, 0.0, 0.0, 0.0)   # quaternion b, c, d
    struct.pack_into("<3f", raw, 268, 10.0, 20.0, 30.0)
    path.write_bytes(bytes(raw))
    hdr = read_header(path)
    assert np.allclose(hdr["affine"][:3, :3], np.diag([1.0, 2.0, 3.0]))
    assert np.allclose(hdr["affine"][:3, 3], [10.0, 20.0, 30.0])


def test_sform_preferred_over_qform(tmp_path):
    path = tmp_path / "sq.nii"
    v = Volume(np.zeros((4, 4, 4)),
               (1.0, 1.0, 1.0),
               affine=np.diag([1.0, 1.0, 1.0, 1.0]))
    save_nifti(v, path)
    raw = bytearray(path.read_bytes())
    struct.pack_into("<2h", raw, 252, 1, 1)  # qform also present
    struct.pack_into("<3f", raw, 268, 99.0, 99.0, 99.0)
    path.write_bytes(bytes(raw))
    hdr = read_header(path)
    assert np.allclose(hdr["affine"], np.eye(4))  # sform wins


def test_scl_slope_applied(tmp_path):
    path = tmp_path / "scl.nii"
    write_volume(np.full((2, 2, 2), 3.0), (1, 1, 1), path)
    raw = bytearray(path.read_bytes())
    struct.pack_into("<2f", raw, 112, 2.0, 1.0)  # slope 2, inter 1
    path.write_bytes(bytes(raw))
    v = load_nifti(path)
    assert np.allclose(v.data, 7.0)


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        load_nifti("/nonexistent/file.nii")
