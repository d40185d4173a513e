"""Core 3D grid types and spatial primitives.

``Volume`` holds scalar data (float64 in memory, float32 on disk) and
``Mask`` holds strictly binary data (uint8). Both are immutable after
construction: the backing arrays are copied on the way in and marked
read-only. Operations return new objects.

Index order is (x, y, z) throughout, matching the on-disk NIfTI layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import nifti
from .errors import ValidationError

CONNECTIVITY_STRUCTS = {
    6: ndimage.generate_binary_structure(3, 1),
    18: ndimage.generate_binary_structure(3, 2),
    26: ndimage.generate_binary_structure(3, 3),
}


def _check_connectivity(connectivity: int) -> np.ndarray:
    if connectivity not in CONNECTIVITY_STRUCTS:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    return CONNECTIVITY_STRUCTS[connectivity]


def _frozen_copy(data: np.ndarray, dtype) -> np.ndarray:
    out = np.array(data, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Volume:
    """A 3D scalar grid with physical voxel spacing in millimetres."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    affine: np.ndarray | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValidationError(f"volume data must be 3D, got shape {data.shape}")
        if any(n <= 0 for n in data.shape):
            raise ValidationError(f"non-positive dims {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValidationError(f"spacing components must be > 0, got {spacing}")
        data = _frozen_copy(data, np.float64)
        bad = ~np.isfinite(data)
        if bad.any():
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise ValidationError(f"non-finite voxel at index {idx}")
        affine = self.affine
        if affine is not None:
            affine = _frozen_copy(affine, np.float64)
            if affine.shape != (4, 4):
                raise ValidationError(f"affine must be 4x4, got {affine.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def grid_compatible(self, other) -> bool:
        return self.dims == other.dims and np.allclose(
            self.spacing, other.spacing, rtol=1e-5, atol=1e-6)

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing, self.affine)


@dataclass(frozen=True)
class Mask:
    """A strictly binary 3D grid on the same lattice conventions as Volume."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    affine: np.ndarray | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValidationError(f"mask data must be 3D, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValidationError(f"spacing components must be > 0, got {spacing}")
        if not np.isin(data, (0, 1)).all():
            raise ValidationError("mask data must be strictly binary (0/1)")
        data = _frozen_copy(data, np.uint8)
        affine = self.affine
        if affine is not None:
            affine = _frozen_copy(affine, np.float64)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)

    dims = Volume.dims
    voxel_volume_mm3 = Volume.voxel_volume_mm3
    grid_compatible = Volume.grid_compatible

    def bool(self) -> np.ndarray:
        return self.data.astype(bool)

    def with_data(self, data: np.ndarray) -> "Mask":
        return Mask(data, self.spacing, self.affine)

    def volume_mm3(self) -> float:
        return float(self.data.sum()) * self.voxel_volume_mm3


@dataclass(frozen=True)
class Component:
    """One connected region of a mask's foreground."""

    voxels: frozenset
    volume_mm3: float
    bounding_box: tuple  # ((x0, x1), (y0, y1), (z0, z1)), inclusive
    label: int = field(default=0, compare=False)

    @property
    def voxel_count(self) -> int:
        return len(self.voxels)

    def to_mask_array(self, dims) -> np.ndarray:
        out = np.zeros(dims, dtype=np.uint8)
        idx = np.array(sorted(self.voxels))
        out[idx[:, 0], idx[:, 1], idx[:, 2]] = 1
        return out


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def load_nifti(path) -> Volume:
    """Load a single-file NIfTI-1 volume (see ``nifti`` for strictness)."""
    data, spacing, affine = nifti.read_volume(path)
    return Volume(data, spacing, affine)


def load_mask(path) -> Mask:
    """Load a NIfTI file that must contain strictly binary data."""
    data, spacing, affine = nifti.read_volume(path)
    if not np.isin(data, (0.0, 1.0)).all():
        vals = np.unique(data)
        raise ValidationError(
            f"{path}: expected binary mask, found values {vals[:6]}")
    return Mask(data.astype(np.uint8), spacing, affine)


def save_nifti(v, path) -> None:
    """Write Volume as float32 or Mask as uint8, little-endian NIfTI-1."""
    if isinstance(v, Mask):
        nifti.write_volume(v.data, v.spacing, path, v.affine, dtype="uint8")
    elif isinstance(v, Volume):
        nifti.write_volume(v.data, v.spacing, path, v.affine, dtype="float32")
    else:
        raise TypeError(f"expected Volume or Mask, got {type(v).__name__}")


# ---------------------------------------------------------------------------
# Connected components and morphology
# ---------------------------------------------------------------------------

def connected_components(m: Mask, connectivity: int = 26) -> list[Component]:
    """Label the foreground; deterministic order by bbox (min z, min y, min x)."""
    struct = _check_connectivity(connectivity)
    labels, n = ndimage.label(m.bool(), structure=struct)
    voxvol = m.voxel_volume_mm3
    comps = []
    for lab in range(1, n + 1):
        coords = np.argwhere(labels == lab)
        voxels = frozenset(map(tuple, coords.tolist()))
        lo = coords.min(axis=0)
        hi = coords.max(axis=0)
        bbox = ((int(lo[0]), int(hi[0])), (int(lo[1]), int(hi[1])),
                (int(lo[2]), int(hi[2])))
        comps.append(Component(voxels, len(voxels) * voxvol, bbox, label=lab))
    comps.sort(key=lambda c: (c.bounding_box[2][0], c.bounding_box[1][0],
                              c.bounding_box[0][0]))
    return comps


def filter_small_components(m: Mask, min_volume_mm3: float,
                            connectivity: int = 26) -> Mask:
    """Drop components with volume below ``min_volume_mm3``; input untouched."""
    if min_volume_mm3 < 0:
        raise ValueError(f"min_volume_mm3 must be >= 0, got {min_volume_mm3}")
    struct = _check_connectivity(connectivity)
    labels, n = ndimage.label(m.bool(), structure=struct)
    if n == 0:
        return m.with_data(np.zeros(m.dims, dtype=np.uint8))
    counts = np.bincount(labels.ravel(), minlength=n + 1)
    keep = counts * m.voxel_volume_mm3 >= min_volume_mm3
    keep[0] = False
    return m.with_data(keep[labels].astype(np.uint8))


def boundary(m: Mask, connectivity: int = 6) -> Mask:
    """Foreground voxels with at least one background neighbour.

    Voxels on the array edge count as boundary (outside the grid is
    treated as background).
    """
    struct = _check_connectivity(connectivity)
    fg = m.bool()
    eroded = ndimage.binary_erosion(fg, structure=struct, border_value=0)
    return m.with_data((fg & ~eroded).astype(np.uint8))


# ---------------------------------------------------------------------------
# Filtering and resampling
# ---------------------------------------------------------------------------

def _gaussian_kernel(sigma_vox: float) -> np.ndarray:
    """1D Gaussian truncated at 3 sigma, renormalized to sum 1."""
    radius = max(1, int(np.ceil(3.0 * sigma_vox)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma_vox) ** 2)
    return k / k.sum()


def gaussian_blur(v: Volume, sigma_mm: float) -> Volume:
    """Separable Gaussian blur; sigma given in millimetres.

    Sigma 0 is the identity. Edges replicate the nearest voxel, so
    constant volumes stay constant.
    """
    if sigma_mm < 0:
        raise ValueError(f"sigma_mm must be >= 0, got {sigma_mm}")
    if sigma_mm == 0:
        return v.with_data(v.data)
    out = v.data.astype(np.float64)
    for axis, s in enumerate(v.spacing):
        kernel = _gaussian_kernel(sigma_mm / s)
        out = ndimage.convolve1d(out, kernel, axis=axis, mode="nearest")
    return v.with_data(out)


def resample(v, target_spacing, mode: str = "trilinear"):
    """Resample to ``target_spacing`` with voxel-center alignment.

    Output dims are chosen to preserve physical extent within one voxel.
    Masks must use ``mode="nearest"`` and stay strictly binary.
    """
    target = tuple(float(s) for s in target_spacing)
    if any(s <= 0 for s in target):
        raise ValueError(f"target spacing must be > 0, got {target}")
    if mode not in ("nearest", "trilinear"):
        raise ValueError(f"mode must be 'nearest' or 'trilinear', got {mode!r}")
    if isinstance(v, Mask) and mode != "nearest":
        raise ValueError("masks must be resampled with mode='nearest'")
    if target == tuple(v.spacing):
        return v.with_data(v.data)

    src = v.spacing
    new_dims = tuple(max(1, int(round(n * s / t)))
                     for n, s, t in zip(v.dims, src, target))
    # output voxel center j maps to source index (j + 0.5) * t/s - 0.5
    axes = [(np.arange(n, dtype=np.float64) + 0.5) * (t / s) - 0.5
            for n, s, t in zip(new_dims, src, target)]
    grid = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([g.ravel() for g in grid])
    order = 0 if mode == "nearest" else 1
    sampled = ndimage.map_coordinates(
        v.data.astype(np.float64), coords, order=order, mode="nearest")
    sampled = sampled.reshape(new_dims)

    new_affine = None
    if v.affine is not None:
        shift = np.eye(4)
        for i in range(3):
            shift[i, i] = target[i] / src[i]
            shift[i, 3] = 0.5 * target[i] / src[i] - 0.5
        new_affine = v.affine @ shift
    if isinstance(v, Mask):
        return Mask((sampled > 0.5).astype(np.uint8), target, new_affine)
    return Volume(sampled, target, new_affine)
