import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lesionforge.errors import ValidationError
from lesionforge.rng import make_rng
from lesionforge.volume import (Mask, Volume, boundary, connected_components,
                                filter_small_components, gaussian_blur,
                                resample)
from oracles import (boundary_by_enumeration, dense_gaussian_blur,
                     flood_fill_components)


def mask_of(arr, spacing=(1.0, 1.0, 1.0)):
    return Mask(np.asarray(arr, dtype=np.uint8), spacing)


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

def test_volume_rejects_nan():
    data = np.zeros((2, 2, 2))
    data[0, 1, 1] = np.inf
    with pytest.raises(ValidationError, match=r"\(0, 1, 1\)"):
        Volume(data, (1, 1, 1))


def test_volume_rejects_bad_spacing():
    with pytest.raises(ValidationError):
        Volume(np.zeros((2, 2, 2)), (1, 0, 1))


def test_mask_rejects_nonbinary():
    with pytest.raises(ValidationError):
        Mask(np.full((2, 2, 2), 2, dtype=np.uint8), (1, 1, 1))


def test_data_is_immutable():
    v = Volume(np.zeros((2, 2, 2)), (1, 1, 1))
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1.0


def test_construction_copies_input():
    src = np.zeros((2, 2, 2))
    v = Volume(src, (1, 1, 1))
    src[0, 0, 0] = 5.0
    assert v.data[0, 0, 0] == 0.0


# ---------------------------------------------------------------------------
# Connected components
# ---------------------------------------------------------------------------

def test_components_empty_mask():
    assert connected_components(mask_of(np.zeros((4, 4, 4)))) == []


def test_components_two_isolated_voxels():
    arr = np.zeros((6, 6, 6))
    arr[0, 0, 0] = 1
    arr[5, 5, 5] = 1
    comps = connected_components(mask_of(arr), connectivity=26)
    assert len(comps) == 2
    assert all(c.voxel_count == 1 for c in comps)
    assert comps[0].voxels == frozenset({(0, 0, 0)})


def test_components_volume_uses_spacing():
    arr = np.zeros((4, 4, 4))
    arr[1, 1, 1] = 1
    comps = connected_components(mask_of(arr, spacing=(2.0, 2.0, 2.0)))
    assert comps[0].volume_mm3 == pytest.approx(8.0)


def test_components_ordering_deterministic():
    arr = np.zeros((8, 8, 8))
    arr[6, 6, 0] = 1   # min z = 0 -> first
    arr[0, 0, 5] = 1
    comps = connected_components(mask_of(arr))
    assert comps[0].bounding_box[2][0] == 0
    assert comps[1].bounding_box[2][0] == 5


@pytest.mark.parametrize("connectivity", [6, 18, 26])
def test_components_match_flood_fill_oracle(connectivity):
    rng = make_rng(1000 + connectivity)
    for _ in range(50):
        arr = (rng.random((16, 16, 16)) < 0.25).astype(np.uint8)
        ours = connected_components(mask_of(arr), connectivity)
        oracle = flood_fill_components(arr.astype(bool), connectivity)
        assert sorted(len(c) for c in oracle) == sorted(
            c.voxel_count for c in ours)
        assert {frozenset(c) for c in oracle} == {c.voxels for c in ours}


# ---------------------------------------------------------------------------
# Small-component filtering
# ---------------------------------------------------------------------------

def test_filter_3mm_removes_small_keeps_large():
    arr = np.zeros((10, 10, 10))
    arr[0, 0, 0:2] = 1                  # 2 voxels = 2 mm^3 at 1 mm iso
    arr[5:7, 5:7, 5:7] = 1              # 8 voxels = 8 mm^3
    out = filter_small_components(mask_of(arr), 3.0)
    assert out.data.sum() == 8
    assert not out.data[0, 0, 0]


def test_filter_zero_threshold_is_identity():
    rng = make_rng(3)
    arr = (rng.random((8, 8, 8)) < 0.3).astype(np.uint8)
    out = filter_small_components(mask_of(arr), 0.0)
    assert np.array_equal(out.data, arr)


def test_filter_respects_voxel_volume():
    arr = np.zeros((4, 4, 4))
    arr[1, 1, 1] = 1                    # 1 voxel at 2 mm iso = 8 mm^3
    out = filter_small_components(mask_of(arr, spacing=(2, 2, 2)), 3.0)
    assert out.data.sum() == 1


def test_filter_threshold_is_inclusive():
    arr = np.zeros((6, 6, 6))
    arr[1, 1, 1:4] = 1                  # exactly 3 mm^3
    out = filter_small_components(mask_of(arr), 3.0)
    assert out.data.sum() == 3


def test_filter_input_unmodified_and_idempotent():
    rng = make_rng(4)
    arr = (rng.random((10, 10, 10)) < 0.2).astype(np.uint8)
    m = mask_of(arr)
    once = filter_small_components(m, 4.0)
    assert np.array_equal(m.data, arr)
    twice = filter_small_components(once, 4.0)
    assert np.array_equal(once.data, twice.data)


def test_filter_negative_threshold():
    with pytest.raises(ValueError):
        filter_small_components(mask_of(np.zeros((2, 2, 2))), -1.0)


# ---------------------------------------------------------------------------
# Boundary
# ---------------------------------------------------------------------------

def test_boundary_solid_cube():
    arr = np.zeros((5, 5, 5))
    arr[1:4, 1:4, 1:4] = 1
    bd = boundary(mask_of(arr), connectivity=6)
    assert bd.data.sum() == 26          # all but the centre voxel
    assert not bd.data[2, 2, 2]


def test_boundary_single_voxel_and_empty():
    arr = np.zeros((3, 3, 3))
    arr[1, 1, 1] = 1
    assert np.array_equal(boundary(mask_of(arr)).data, arr)
    zero = np.zeros((3, 3, 3))
    assert not boundary(mask_of(zero)).data.any()


@pytest.mark.parametrize("connectivity", [6, 26])
def test_boundary_matches_enumeration_oracle(connectivity):
    rng = make_rng(5)
    for _ in range(20):
        arr = (rng.random((10, 10, 10)) < 0.4).astype(np.uint8)
        ours = boundary(mask_of(arr), connectivity).data.astype(bool)
        oracle = boundary_by_enumeration(arr.astype(bool), connectivity)
        assert np.array_equal(ours, oracle)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_boundary_is_subset(seed):
    rng = make_rng(seed)
    arr = (rng.random((6, 6, 6)) < 0.5).astype(np.uint8)
    m = mask_of(arr)
    bd = boundary(m)
    assert not (bd.data & ~m.data).any()


# ---------------------------------------------------------------------------
# Gaussian blur
# ---------------------------------------------------------------------------

def test_blur_sigma_zero_identity(rng):
    v = Volume(rng.random((6, 6, 6)), (1, 1, 1))
    out = gaussian_blur(v, 0.0)
    assert np.array_equal(out.data, v.data)


def test_blur_preserves_constant():
    v = Volume(np.full((8, 8, 8), 3.7), (1, 1, 1))
    out = gaussian_blur(v, 1.5)
    assert np.abs(out.data - 3.7).max() < 1e-6


def test_blur_impulse_matches_dense_oracle():
    arr = np.zeros((9, 9, 9))
    arr[4, 4, 4] = 1.0
    ours = gaussian_blur(Volume(arr, (1, 1, 1)), 1.0).data
    oracle = dense_gaussian_blur(arr, 1.0)
    assert np.abs(ours - oracle).max() < 1e-5


def test_blur_sigma_converted_via_spacing():
    # sigma 2 mm at 2 mm spacing == sigma 1 voxel
    arr = np.zeros((9, 9, 9))
    arr[4, 4, 4] = 1.0
    coarse = gaussian_blur(Volume(arr, (2, 2, 2)), 2.0).data
    oracle = dense_gaussian_blur(arr, 1.0)
    assert np.abs(coarse - oracle).max() < 1e-5


def test_blur_preserves_interior_sum(rng):
    arr = np.zeros((16, 16, 16))
    arr[6:10, 6:10, 6:10] = rng.random((4, 4, 4))
    out = gaussian_blur(Volume(arr, (1, 1, 1)), 1.0)
    assert out.data.sum() == pytest.approx(arr.sum(), rel=1e-4)


def test_blur_negative_sigma():
    with pytest.raises(ValueError):
        gaussian_blur(Volume(np.zeros((2, 2, 2)), (1, 1, 1)), -0.5)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def test_resample_identity_when_spacing_matches(rng):
    v = Volume(rng.random((5, 5, 5)), (1.5, 1.5, 1.5))
    out = resample(v, (1.5, 1.5, 1.5))
    assert np.array_equal(out.data, v.data)


def test_resample_doubles_dims():
    v = Volume(np.zeros((10, 10, 10)), (2, 2, 2))
    out = resample(v, (1, 1, 1))
    assert out.dims == (20, 20, 20)
    assert out.spacing == (1.0, 1.0, 1.0)


def test_resample_preserves_extent_within_one_voxel(rng):
    v = Volume(rng.random((11, 7, 5)), (1.7, 0.9, 2.3))
    out = resample(v, (1.0, 1.0, 1.0))
    for n_new, t, n_old, s in zip(out.dims, out.spacing, v.dims, v.spacing):
        assert abs(n_new * t - n_old * s) <= max(t, s)


def test_resample_nearest_keeps_masks_binary(rng):
    m = Mask((rng.random((8, 8, 8)) < 0.5).astype(np.uint8), (2, 2, 2))
    out = resample(m, (1.3, 1.3, 1.3), mode="nearest")
    assert isinstance(out, Mask)
    assert set(np.unique(out.data)) <= {0, 1}


def test_resample_mask_requires_nearest(rng):
    m = Mask(np.zeros((4, 4, 4), dtype=np.uint8), (1, 1, 1))
    with pytest.raises(ValueError, match="nearest"):
        resample(m, (2, 2, 2), mode="trilinear")


def test_resample_rejects_bad_spacing():
    v = Volume(np.zeros((4, 4, 4)), (1, 1, 1))
    with pytest.raises(ValueError):
        resample(v, (1, -1, 1))
