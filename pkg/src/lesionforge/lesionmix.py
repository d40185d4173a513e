"""Lesion-level augmentation: populating, inpainting, and longitudinal
pair synthesis.

Populating composites augmented lesion patches from a bank of real
samples into an image (image takes the patch intensities on the lesion
mask, the label gains the mask). Inpainting removes selected lesions by
fast-marching extrapolation from surrounding tissue, peeling the region
boundary inward and smoothing each peeled shell with a Gaussian blur so
no seam is left. Both directions drive toward a target lesion load, which
is how longitudinal pairs with known new/vanishing labels are made.

Every operation is deterministic given its seed, and each returns an
AugmentPlan that replays to a bit-identical result.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import manifest as mf
from .errors import ValidationError
from .fastmarch import fill_region
from .rng import make_rng, spawn_seed
from .volume import (Mask, Volume, boundary, connected_components,
                     gaussian_blur, load_mask, load_nifti, save_nifti)

SCALE_RANGE = (0.8, 1.25)
INTENSITY_GAIN_RANGE = (0.9, 1.1)
NOISE_FRACTION = 0.02          # of the patch intensity range
MAX_PLACEMENT_ATTEMPTS = 50
AUGMENT_RETRIES = 5


@dataclass(frozen=True)
class LesionSample:
    """One lesion cropped to its bounding box (plus a 1-voxel margin)."""

    intensity_patch: np.ndarray   # float64, crop of the source image
    mask_patch: np.ndarray        # uint8, the lesion voxels inside the crop
    source_id: str

    def __post_init__(self):
        if self.intensity_patch.shape != self.mask_patch.shape:
            raise ValidationError("intensity and mask patches must be congruent")
        if not self.mask_patch.any():
            raise ValidationError("lesion sample mask must be nonempty")

    @property
    def voxel_count(self) -> int:
        return int(self.mask_patch.sum())


@dataclass(frozen=True)
class LesionBank:
    samples: tuple[LesionSample, ...]

    def __post_init__(self):
        if not self.samples:
            raise ValidationError("lesion bank is empty")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class AugmentPlan:
    """Replayable record of one augmentation run."""

    target_load_mm3: float
    alpha: float | None = None
    ops: list = field(default_factory=list)
    warning: str | None = None

    def as_dict(self) -> dict:
        return {"target_load_mm3": self.target_load_mm3, "alpha": self.alpha,
                "ops": list(self.ops), "warning": self.warning}


# ---------------------------------------------------------------------------
# Bank construction and per-sample augmentation
# ---------------------------------------------------------------------------

def build_bank(images, connectivity: int = 26) -> LesionBank:
    """One sample per connected lesion component across all (Volume, Mask)
    pairs, cropped with a 1-voxel margin."""
    samples = []
    for idx, (vol, mask) in enumerate(images):
        if not vol.grid_compatible(mask):
            raise ValidationError(f"image/mask pair {idx} grids incompatible")
        for ci, comp in enumerate(connected_components(mask, connectivity)):
            (x0, x1), (y0, y1), (z0, z1) = comp.bounding_box
            lo = (max(0, x0 - 1), max(0, y0 - 1), max(0, z0 - 1))
            hi = (min(mask.dims[0], x1 + 2), min(mask.dims[1], y1 + 2),
                  min(mask.dims[2], z1 + 2))
            sl = tuple(slice(a, b) for a, b in zip(lo, hi))
            patch_mask = comp.to_mask_array(mask.dims)[sl]
            samples.append(LesionSample(
                intensity_patch=vol.data[sl].copy(),
                mask_patch=patch_mask.astype(np.uint8),
                source_id=f"img{idx}/lesion{ci}",
            ))
    if not samples:
        raise ValidationError("no lesion components found; bank would be empty")
    return LesionBank(tuple(samples))


def _zoom_nearest(arr: np.ndarray, scale: float) -> np.ndarray:
    """Isotropic nearest-neighbour rescale with voxel-center alignment."""
    new_shape = tuple(max(1, int(round(n * scale))) for n in arr.shape)
    idx = []
    for n_new, n_old in zip(new_shape, arr.shape):
        src = (np.arange(n_new) + 0.5) / scale - 0.5
        idx.append(np.clip(np.round(src).astype(int), 0, n_old - 1))
    return arr[np.ix_(*idx)]


def _transform_sample(s: LesionSample, flips, scale: float, gain: float,
                      noise_sigma: float, rng=None) -> LesionSample:
    """Apply a fixed geometric + intensity transform to a sample.

    With flips empty, scale 1, gain 1 and noise 0 this is the identity.
    """
    patch = s.intensity_patch
    mask = s.mask_patch
    for ax in flips:
        patch = np.flip(patch, axis=ax)
        mask = np.flip(mask, axis=ax)
    if scale != 1.0:
        patch = _zoom_nearest(patch, scale)
        mask = (_zoom_nearest(mask, scale) > 0).astype(np.uint8)
    patch = patch * gain
    if noise_sigma > 0.0:
        patch = patch + rng.normal(0.0, noise_sigma, size=patch.shape)
    if not mask.any():
        raise ValidationError("transform emptied the lesion mask")
    return LesionSample(np.ascontiguousarray(patch),
                        np.ascontiguousarray(mask), s.source_id)


def augment_sample(s: LesionSample, rng) -> LesionSample:
    """Random flips, isotropic scaling, intensity gain and Gaussian noise.

    Retries a few times if a transform empties the mask, then passes the
    sample through unchanged.
    """
    rng = make_rng(rng)
    for _ in range(AUGMENT_RETRIES):
        flips = tuple(ax for ax in range(3) if rng.random() < 0.5)
        scale = float(rng.uniform(*SCALE_RANGE))
        gain = float(rng.uniform(*INTENSITY_GAIN_RANGE))
        span = float(s.intensity_patch.max() - s.intensity_patch.min())
        noise_sigma = NOISE_FRACTION * span
        try:
            return _transform_sample(s, flips, scale, gain, noise_sigma, rng)
        except ValidationError:
            continue
    return s


# ---------------------------------------------------------------------------
# Populating
# ---------------------------------------------------------------------------

def _fits(mask_patch: np.ndarray, pos, wm: np.ndarray,
          lesions: np.ndarray) -> bool:
    """Patch mask at ``pos`` must sit inside wm and clear of lesions."""
    sl = tuple(slice(p, p + n) for p, n in zip(pos, mask_patch.shape))
    m = mask_patch.astype(bool)
    if (~wm[sl] & m).any():
        return False
    if (lesions[sl] & m).any():
        return False
    return True


def _paste(image: np.ndarray, label: np.ndarray, sample: LesionSample, pos):
    sl = tuple(slice(p, p + n) for p, n in zip(pos, sample.mask_patch.shape))
    m = sample.mask_patch.astype(bool)
    image[sl][m] = sample.intensity_patch[m]
    label[sl][m] = 1


def populate(x: Volume, y: Mask, bank: LesionBank, wm: Mask,
             target_load_mm3: float, rng) -> tuple[Volume, Mask, AugmentPlan]:
    """Add augmented bank lesions until the lesion load reaches the target.

    Each placement must sit entirely inside the white-matter mask and
    overlap no existing lesion; compositing is hard (image takes the patch
    intensities exactly on the mask, nothing else changes). Placement
    failing 50 consecutive times stops early with a warning in the plan.
    """
    if not x.grid_compatible(y) or not x.grid_compatible(wm):
        raise ValidationError("populate inputs must share one grid")
    if not wm.data.any():
        raise ValidationError("white-matter mask is empty")
    voxvol = x.voxel_volume_mm3
    load = float(y.data.sum()) * voxvol
    if target_load_mm3 < load:
        raise ValueError(
            f"target load {target_load_mm3:.1f} mm^3 below current "
            f"{load:.1f} mm^3; use inpaint to shrink")

    rng = make_rng(rng)
    image = x.data.copy()
    label = y.data.copy()
    wm_arr = wm.bool()
    lesions = label.astype(bool)
    plan = AugmentPlan(target_load_mm3=float(target_load_mm3))
    dims = x.dims
    # anchor candidate positions on white-matter voxels; the exact
    # fits-inside-wm / no-overlap constraints are still rejection checks
    wm_coords = np.argwhere(wm_arr)

    while load < target_load_mm3:
        sample_index = int(rng.integers(0, len(bank)))
        op_seed = spawn_seed(rng)
        sample = augment_sample(bank.samples[sample_index], op_seed)
        shape = sample.mask_patch.shape
        if any(s > d for s, d in zip(shape, dims)):
            plan.warning = "bank sample larger than the volume"
            break
        placed = None
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            center = wm_coords[int(rng.integers(0, len(wm_coords)))]
            pos = tuple(
                int(np.clip(c - s // 2, 0, d - s))
                for c, s, d in zip(center, shape, dims))
            if _fits(sample.mask_patch, pos, wm_arr, lesions):
                placed = pos
                break
        if placed is None:
            plan.warning = (f"placement failed {MAX_PLACEMENT_ATTEMPTS} "
                            f"consecutive times at load {load:.1f} mm^3")
            break
        _paste(image, label, sample, placed)
        sl = tuple(slice(p, p + n) for p, n in zip(placed, shape))
        lesions[sl] |= sample.mask_patch.astype(bool)
        load += sample.voxel_count * voxvol
        plan.ops.append({"op": "populate", "sample_index": sample_index,
                         "seed": op_seed, "position": list(placed)})

    return x.with_data(image), y.with_data(label), plan


# ---------------------------------------------------------------------------
# Inpainting
# ---------------------------------------------------------------------------

def inpaint(x: Volume, y: Mask, components_to_remove, sigma_mm: float = 1.0,
            rng=None) -> tuple[Volume, Mask, AugmentPlan]:
    """Remove the given lesion components from image and label.

    The label is exact set subtraction. The image inside the removed
    region is rebuilt by fast-marching extrapolation, peeling the region
    boundary inward and committing a Gaussian-smoothed shell each pass;
    voxels outside the region are untouched.
    """
    if not x.grid_compatible(y):
        raise ValidationError("image and label grids incompatible")
    plan = AugmentPlan(target_load_mm3=0.0)
    if not components_to_remove:
        plan.target_load_mm3 = y.volume_mm3()
        return x.with_data(x.data), y.with_data(y.data), plan

    label_bool = y.bool()
    removal = np.zeros(x.dims, dtype=bool)
    for comp in components_to_remove:
        comp_mask = comp.to_mask_array(x.dims).astype(bool)
        if (comp_mask & ~label_bool).any():
            raise ValidationError("component to remove is not a subset of the label")
        removal |= comp_mask
        plan.ops.append({"op": "inpaint",
                         "bounding_box": [list(b) for b in comp.bounding_box],
                         "voxel_count": comp.voxel_count,
                         "sigma_mm": sigma_mm})

    work = x.data.copy()
    remaining = removal.copy()
    while remaining.any():
        shell = boundary(Mask(remaining.astype(np.uint8), x.spacing),
                         connectivity=6).bool()
        filled = fill_region(work, remaining, x.spacing)
        smoothed = gaussian_blur(Volume(filled, x.spacing), sigma_mm).data
        work[shell] = smoothed[shell]
        remaining &= ~shell

    new_label = (label_bool & ~removal).astype(np.uint8)
    plan.target_load_mm3 = float(new_label.sum()) * y.voxel_volume_mm3
    return x.with_data(work), y.with_data(new_label), plan


# ---------------------------------------------------------------------------
# Longitudinal synthesis
# ---------------------------------------------------------------------------

def synth_longitudinal(x: Volume, y: Mask, bank: LesionBank, wm: Mask,
                       alpha_low: float = 0.8, alpha_high: float = 1.2,
                       rng=0, sigma_mm: float = 1.0, connectivity: int = 26):
    """Make a second timepoint with a target load alpha * current load.

    alpha ~ Uniform[alpha_low, alpha_high]. Growth populates new lesions
    (they become the ``new`` label); shrinkage inpaints existing lesions
    smallest first until the load drops to the target (they become the
    ``vanishing`` label). Returns (image_t2, all_t2, new, vanishing, plan).
    """
    if alpha_low > alpha_high:
        raise ValueError(f"alpha_low {alpha_low} > alpha_high {alpha_high}")
    if not y.data.any():
        raise ValidationError("synth_longitudinal needs a nonempty lesion mask")
    rng = make_rng(rng)
    alpha = float(rng.uniform(alpha_low, alpha_high))
    load = y.volume_mm3()
    target = alpha * load
    zeros = y.with_data(np.zeros(y.dims, dtype=np.uint8))

    if alpha >= 1.0:
        x2, all_t2, plan = populate(x, y, bank, wm, target, rng)
        new = Mask((all_t2.data & ~y.data.astype(bool)).astype(np.uint8),
                   y.spacing, y.affine)
        vanishing = zeros
    else:
        comps = connected_components(y, connectivity)
        comps_by_size = sorted(
            comps, key=lambda c: (c.voxel_count, c.bounding_box[2][0],
                                  c.bounding_box[1][0], c.bounding_box[0][0]))
        to_remove = []
        remaining = load
        for comp in comps_by_size:
            if remaining <= target:
                break
            to_remove.append(comp)
            remaining -= comp.volume_mm3
        x2, all_t2, plan = inpaint(x, y, to_remove, sigma_mm)
        vanishing_arr = np.zeros(y.dims, dtype=np.uint8)
        for comp in to_remove:
            vanishing_arr |= comp.to_mask_array(y.dims)
        vanishing = y.with_data(vanishing_arr)
        new = zeros

    plan.alpha = alpha
    plan.target_load_mm3 = target
    return x2, all_t2, new, vanishing, plan


# ---------------------------------------------------------------------------
# Plan replay
# ---------------------------------------------------------------------------

def apply_plan(x: Volume, y: Mask, bank: LesionBank, plan: AugmentPlan,
               connectivity: int = 26):
    """Re-apply a recorded plan; bit-identical to the original run."""
    image = x.data.copy()
    label = y.data.copy()
    out_x = x.with_data(image)
    out_y = y.with_data(label)
    inpaint_comps = []
    inpaint_sigma = 1.0
    for op in plan.ops:
        if op["op"] == "populate":
            sample = augment_sample(bank.samples[op["sample_index"]],
                                    op["seed"])
            _paste(image, label, sample, tuple(op["position"]))
            out_x = x.with_data(image)
            out_y = y.with_data(label)
        elif op["op"] == "inpaint":
            bbox = tuple(tuple(b) for b in op["bounding_box"])
            match = [c for c in connected_components(out_y, connectivity)
                     if c.bounding_box == bbox
                     and c.voxel_count == op["voxel_count"]]
            if not match:
                raise ValidationError(f"plan references unknown component {bbox}")
            inpaint_comps.extend(match)
            inpaint_sigma = op["sigma_mm"]
        else:
            raise ValidationError(f"unknown plan op {op['op']!r}")
    if inpaint_comps:
        out_x, out_y, _ = inpaint(out_x, out_y, inpaint_comps, inpaint_sigma)
    return out_x, out_y


# ---------------------------------------------------------------------------
# Dataset balancing
# ---------------------------------------------------------------------------

def balance_dataset(dataset: mf.DatasetManifest, bank: LesionBank,
                    per_dataset_target: int, out_dir, rng=0,
                    alpha_low: float = 0.8, alpha_high: float = 1.2
                    ) -> mf.DatasetManifest:
    """Pad a dataset's train split to ``per_dataset_target`` subjects with
    synthesized longitudinal pairs.

    Base subjects are cycled from the train split; each base needs an
    image, a white-matter mask and a nonempty all-lesion label at its
    first timepoint. Generated subjects are written under ``out_dir`` as
    NIfTI plus a replay plan JSON, carry every label kind, and land in the
    train split.
    """
    train = dataset.train_subjects()
    n_current = len(train)
    if per_dataset_target < n_current:
        raise ValueError(
            f"target {per_dataset_target} below current train count {n_current}")
    if per_dataset_target == n_current:
        return dataset

    bases = [s for s in train
             if s.timepoints[0].wm is not None
             and s.timepoints[0].all is not None]
    if not bases:
        raise ValidationError(
            f"dataset {dataset.name!r}: no train subject has both a wm mask "
            f"and an all-lesion label at timepoint 1 to synthesize from")

    rng = make_rng(rng)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    new_subjects = list(dataset.subjects)
    cache: dict = {}

    for k in range(per_dataset_target - n_current):
        base = bases[k % len(bases)]
        if base.id not in cache:
            tp = base.timepoints[0]
            cache[base.id] = (load_nifti(tp.image), load_mask(tp.all),
                              load_mask(tp.wm))
        x1, y1, wm = cache[base.id]
        if not y1.data.any():
            raise ValidationError(
                f"subject {base.id}: empty all-lesion label, cannot synthesize")
        seed = spawn_seed(rng)
        x2, all_t2, new, vanishing, plan = synth_longitudinal(
            x1, y1, bank, wm, alpha_low, alpha_high, seed)

        sid = f"{base.id}_aug{k:03d}"
        subj_dir = out_dir / sid
        subj_dir.mkdir(exist_ok=True)
        paths = {}
        for name, obj in (("t1_image", x1), ("t1_all", y1), ("wm", wm),
                          ("t2_image", x2), ("t2_all", all_t2),
                          ("t2_new", new), ("t2_vanishing", vanishing)):
            p = subj_dir / f"{name}.nii.gz"
            save_nifti(obj, p)
            paths[name] = str(p)
        with open(subj_dir / "plan.json", "w") as fh:
            json.dump({"base": base.id, "seed": seed, **plan.as_dict()}, fh,
                      indent=2)

        new_subjects.append(mf.SubjectRecord(
            id=sid,
            format="longitudinal",
            availability=mf.LabelAvailability(True, True, True, True),
            split="train",
            timepoints=(
                mf.Timepoint(image=paths["t1_image"], wm=paths["wm"],
                             all=paths["t1_all"]),
                mf.Timepoint(image=paths["t2_image"], wm=paths["wm"],
                             all=paths["t2_all"], new=paths["t2_new"],
                             vanishing=paths["t2_vanishing"]),
            ),
        ))

    balanced = mf.DatasetManifest(name=dataset.name,
                                  subjects=tuple(new_subjects))
    mf.validate_manifest(balanced)
    return balanced
