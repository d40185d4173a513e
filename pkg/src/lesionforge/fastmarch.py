"""Fast-marching image fill for lesion removal.

Unknown voxels are processed in order of arrival time (Euclidean distance
into the region, which solves the unit-speed Eikonal problem) and each is
extrapolated from already-known voxels inside a small band. The weights
follow the classic first-order scheme: a directional factor aligning with
the propagation normal, an inverse-square distance factor, and a level-set
proximity factor. Voxels filled early become sources for later ones.

Bands are clamped at the array border, so regions touching the edge fill
from whatever known tissue is in reach.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

BAND_RADIUS_VOX = 3.0


def _band_offsets(radius: float) -> np.ndarray:
    r = int(np.floor(radius))
    offs = []
    for dx in range(-r, r + 1):
        for dy in range(-r, r + 1):
            for dz in range(-r, r + 1):
                if dx == dy == dz == 0:
                    continue
                if dx * dx + dy * dy + dz * dz <= radius * radius:
                    offs.append((dx, dy, dz))
    return np.array(offs, dtype=np.int64)


_OFFSETS = _band_offsets(BAND_RADIUS_VOX)
_OFFSET_NORMS = np.linalg.norm(_OFFSETS.astype(np.float64), axis=1)
_OFFSET_DST = 1.0 / (_OFFSET_NORMS * _OFFSET_NORMS)


def _arrival_times(region: np.ndarray, spacing) -> np.ndarray:
    """Distance (mm) from each region voxel to the known surroundings."""
    return ndimage.distance_transform_edt(region, sampling=spacing)


def fill_region(data: np.ndarray, region: np.ndarray, spacing) -> np.ndarray:
    """Return a copy of ``data`` with ``region`` voxels extrapolated.

    Voxels outside ``region`` are bit-identical to the input.
    """
    region = np.asarray(region).astype(bool)
    out = data.astype(np.float64, copy=True)
    if not region.any():
        return out
    times = _arrival_times(region, spacing)
    # propagation normal: gradient of arrival time, one-sided at borders
    gradients = np.stack(np.gradient(times), axis=-1)
    known = ~region

    targets = np.argwhere(region)
    order = np.argsort(times[region], kind="stable")
    targets = targets[order]
    shape = np.array(data.shape)

    for p in targets:
        q = p + _OFFSETS
        inside = ((q >= 0) & (q < shape)).all(axis=1)  # clamp band at border
        q = q[inside]
        qt = (q[:, 0], q[:, 1], q[:, 2])
        usable = known[qt]
        if not usable.any():
            continue  # beyond the band; a later pass reaches it
        q = q[usable]
        qt = (q[:, 0], q[:, 1], q[:, 2])
        offs = (q - p).astype(np.float64)
        rnorm = _OFFSET_NORMS[inside][usable]

        normal = gradients[tuple(p)]
        nn = np.linalg.norm(normal)
        if nn > 0:
            direction = np.abs(offs @ (normal / nn)) / rnorm
        else:
            direction = np.ones_like(rnorm)
        dst = _OFFSET_DST[inside][usable]
        lev = 1.0 / (1.0 + np.abs(times[tuple(p)] - times[qt]))
        w = direction * dst * lev
        vals = out[qt]
        den = w.sum()
        if den > 0.0:
            out[tuple(p)] = float(w @ vals) / den
        else:
            out[tuple(p)] = float(vals.mean())
        known[tuple(p)] = True
    return out
