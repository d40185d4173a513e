"""Synthetic brain-like phantoms with controllable lesion dynamics.

A phantom is an ellipsoidal head containing a thick white-matter shell
around a ventricle. Lesions are unions of one to three jittered spheres,
placed inside the white matter without touching each other, and brighter
than the surrounding tissue. Optional distractors are equally bright
blobs placed outside the white matter, for probing whether a model
respects the anatomy.

Longitudinal series are produced by chaining the lesion-level
augmentation ops with per-step volume-change targets, so every timepoint
comes with exact all/new/vanishing ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import manifest as mf
from .errors import ValidationError
from .lesionmix import build_bank, synth_longitudinal
from .rng import make_rng, spawn_seed
from .volume import Mask, Volume, save_nifti


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    background_intensity: float = 0.1
    wm_intensity: float = 0.5
    lesion_intensity_range: tuple[float, float] = (0.8, 1.0)
    n_lesions: int = 4
    lesion_radius_range_mm: tuple[float, float] = (1.2, 2.5)
    noise_sigma: float = 0.02
    seed: int = 0
    # bright blobs outside the white matter; same look as lesions
    n_distractors: int = 0
    distractor_intensity_range: tuple[float, float] | None = None
    distractor_radius_range_mm: tuple[float, float] | None = None

    def __post_init__(self):
        if self.lesion_intensity_range[0] <= self.wm_intensity:
            raise ValueError("lesion intensities must exceed wm_intensity")
        if self.lesion_radius_range_mm[0] <= 0:
            raise ValueError("lesion radii must be positive")
        if self.n_lesions < 0 or self.n_distractors < 0:
            raise ValueError("counts must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        kwargs = dict(d)
        for key in ("dims", "spacing", "lesion_intensity_range",
                    "lesion_radius_range_mm", "distractor_intensity_range",
                    "distractor_radius_range_mm"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class PhantomSubject:
    """A full longitudinal series with exact ground truth.

    ``new_masks[k]`` / ``vanishing_masks[k]`` describe the transition from
    timepoint k to k+1.
    """

    subject_id: str
    images: tuple[Volume, ...]
    wm: Mask
    all_masks: tuple[Mask, ...]
    new_masks: tuple[Mask, ...] = field(default_factory=tuple)
    vanishing_masks: tuple[Mask, ...] = field(default_factory=tuple)

    @property
    def n_timepoints(self) -> int:
        return len(self.images)


def _ellipsoid(dims, radii_frac) -> np.ndarray:
    grids = np.indices(dims).astype(np.float64)
    out = np.zeros(dims, dtype=np.float64)
    for ax in range(3):
        c = (dims[ax] - 1) / 2.0
        r = radii_frac * dims[ax]
        out += ((grids[ax] - c) / r) ** 2
    return out <= 1.0


def _blob(center, radius_mm, dims, spacing, rng) -> np.ndarray:
    """Union of 1-3 jittered spheres around ``center`` (index units)."""
    n_spheres = int(rng.integers(1, 4))
    mask = np.zeros(dims, dtype=bool)
    grids = np.indices(dims).astype(np.float64)
    for k in range(n_spheres):
        if k == 0:
            c = np.asarray(center, dtype=np.float64)
            r = radius_mm
        else:
            jitter_vox = rng.uniform(-0.4, 0.4, size=3) * radius_mm / np.asarray(spacing)
            c = np.asarray(center, dtype=np.float64) + jitter_vox
            r = float(rng.uniform(0.6, 0.9)) * radius_mm
        dist_mm2 = np.zeros(dims)
        for ax in range(3):
            dist_mm2 += ((grids[ax] - c[ax]) * spacing[ax]) ** 2
        mask |= dist_mm2 <= r * r
    return mask


def _place_blobs(n: int, zone: np.ndarray, forbidden: np.ndarray,
                 radius_range_mm, dims, spacing, rng,
                 what: str) -> list[np.ndarray]:
    """Place ``n`` blobs inside ``zone``, not touching ``forbidden``."""
    struct = ndimage.generate_binary_structure(3, 3)
    placed = []
    taken = forbidden.copy()
    candidates = np.argwhere(zone)
    if candidates.size == 0:
        raise ValidationError(f"no room to place {what}: placement zone empty")
    for k in range(n):
        ok = False
        for _ in range(200):
            center = candidates[int(rng.integers(0, len(candidates)))]
            radius_mm = float(rng.uniform(*radius_range_mm))
            blob = _blob(center, radius_mm, dims, spacing, rng)
            if not blob.any():
                continue
            if (blob & ~zone).any():
                continue
            if (blob & ndimage.binary_dilation(taken, struct)).any():
                continue
            placed.append(blob)
            taken |= blob
            ok = True
            break
        if not ok:
            raise ValidationError(
                f"could not place {what} {k + 1}/{n}: the zone cannot fit a "
                f"blob of radius {radius_range_mm} mm without touching "
                f"existing structures")
    return placed


def make_phantom(spec: PhantomSpec) -> tuple[Volume, Mask, Mask]:
    """Build one phantom: (image, white-matter mask, all-lesion mask)."""
    rng = make_rng(spec.seed)
    dims = tuple(spec.dims)
    spacing = tuple(spec.spacing)

    head = _ellipsoid(dims, 0.46)
    wm_outer = _ellipsoid(dims, 0.33)
    ventricle = _ellipsoid(dims, 0.14)
    wm = wm_outer & ~ventricle

    csf_intensity = 0.5 * (spec.background_intensity + spec.wm_intensity)
    image = np.full(dims, spec.background_intensity, dtype=np.float64)
    image[head] = csf_intensity
    image[wm] = spec.wm_intensity
    image[ventricle] = csf_intensity

    lesions = np.zeros(dims, dtype=bool)
    if spec.n_lesions > 0:
        blobs = _place_blobs(spec.n_lesions, wm, lesions,
                             spec.lesion_radius_range_mm, dims, spacing, rng,
                             what="lesion")
        for blob in blobs:
            image[blob] = float(rng.uniform(*spec.lesion_intensity_range))
            lesions |= blob

    if spec.n_distractors > 0:
        # anywhere clear of the (dilated) white matter, away from the edges
        zone = ~ndimage.binary_dilation(
            wm, ndimage.generate_binary_structure(3, 3))
        zone[[0, -1], :, :] = False
        zone[:, [0, -1], :] = False
        zone[:, :, [0, -1]] = False
        intensity_range = (spec.distractor_intensity_range
                           or spec.lesion_intensity_range)
        radius_range = (spec.distractor_radius_range_mm
                        or spec.lesion_radius_range_mm)
        blobs = _place_blobs(spec.n_distractors, zone, lesions,
                             radius_range, dims, spacing, rng,
                             what="distractor")
        for blob in blobs:
            image[blob] = float(rng.uniform(*intensity_range))

    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=dims)

    return (Volume(image, spacing),
            Mask(wm.astype(np.uint8), spacing),
            Mask(lesions.astype(np.uint8), spacing))


def make_longitudinal(spec: PhantomSpec, n_timepoints: int,
                      dynamics=None, subject_id: str = "phantom",
                      ) -> PhantomSubject:
    """Chain per-step load targets into a T-timepoint series.

    ``dynamics`` holds T-1 per-step volume-change factors, each in
    [0.5, 2.0]; None draws them uniformly from [0.8, 1.2]. The lesion bank
    for growth steps is built once from the first timepoint.
    """
    if n_timepoints < 2:
        raise ValueError("need n_timepoints >= 2")
    rng = make_rng(spec.seed)
    if dynamics is None:
        dynamics = [float(rng.uniform(0.8, 1.2))
                    for _ in range(n_timepoints - 1)]
    dynamics = [float(a) for a in dynamics]
    if len(dynamics) != n_timepoints - 1:
        raise ValueError(f"dynamics needs {n_timepoints - 1} entries")
    if any(not (0.5 <= a <= 2.0) for a in dynamics):
        raise ValueError("per-step factors must lie in [0.5, 2.0]")

    image, wm, all_mask = make_phantom(spec)
    bank = build_bank([(image, all_mask)])

    images = [image]
    all_masks = [all_mask]
    new_masks = []
    vanishing_masks = []
    for alpha in dynamics:
        step_seed = spawn_seed(rng)
        x2, all_t2, new, vanishing, _ = synth_longitudinal(
            images[-1], all_masks[-1], bank, wm,
            alpha_low=alpha, alpha_high=alpha, rng=step_seed)
        images.append(x2)
        all_masks.append(all_t2)
        new_masks.append(new)
        vanishing_masks.append(vanishing)

    return PhantomSubject(
        subject_id=subject_id, images=tuple(images), wm=wm,
        all_masks=tuple(all_masks), new_masks=tuple(new_masks),
        vanishing_masks=tuple(vanishing_masks))


def write_subject(subject: PhantomSubject, out_dir, split: str = "train",
                  ) -> mf.SubjectRecord:
    """Write one subject's files and return its manifest record."""
    out_dir = Path(out_dir)
    subj_dir = out_dir / subject.subject_id
    subj_dir.mkdir(parents=True, exist_ok=True)
    wm_path = subj_dir / "wm.nii.gz"
    save_nifti(subject.wm, wm_path)
    tps = []
    T = subject.n_timepoints
    for k in range(T):
        image_path = subj_dir / f"t{k + 1}_image.nii.gz"
        all_path = subj_dir / f"t{k + 1}_all.nii.gz"
        save_nifti(subject.images[k], image_path)
        save_nifti(subject.all_masks[k], all_path)
        entry = {"image": str(image_path), "wm": str(wm_path),
                 "all": str(all_path)}
        if k > 0:
            new_path = subj_dir / f"t{k + 1}_new.nii.gz"
            van_path = subj_dir / f"t{k + 1}_vanishing.nii.gz"
            save_nifti(subject.new_masks[k - 1], new_path)
            save_nifti(subject.vanishing_masks[k - 1], van_path)
            entry["new"] = str(new_path)
            entry["vanishing"] = str(van_path)
        tps.append(mf.Timepoint(**entry))
    return mf.SubjectRecord(
        id=subject.subject_id,
        format="longitudinal" if T >= 2 else "cross_sectional",
        availability=mf.LabelAvailability(
            all_t1=True, all_t2=T >= 2, new_t2=T >= 2, vanishing_t2=T >= 2),
        split=split,
        timepoints=tuple(tps))


def write_dataset(spec: PhantomSpec, out_dir, n_train: int, n_test: int,
                  n_timepoints: int = 2, name: str = "phantoms",
                  seed: int | None = None) -> mf.DatasetManifest:
    """Generate a full dataset (files + validated manifest)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = make_rng(spec.seed if seed is None else seed)
    records = []
    for i in range(n_train + n_test):
        split = "train" if i < n_train else "test"
        subj_spec = PhantomSpec(**{**_spec_dict(spec), "seed": spawn_seed(rng)})
        sid = f"{name}_{split}{i:03d}"
        if n_timepoints >= 2:
            subject = make_longitudinal(subj_spec, n_timepoints,
                                        subject_id=sid)
        else:
            image, wm, all_mask = make_phantom(subj_spec)
            subject = PhantomSubject(sid, (image,), wm, (all_mask,))
        records.append(write_subject(subject, out_dir, split=split))
    manifest = mf.DatasetManifest(name=name, subjects=tuple(records))
    mf.validate_manifest(manifest)
    mf.serialize_manifest(manifest, out_dir / "manifest.json")
    return manifest


def _spec_dict(spec: PhantomSpec) -> dict:
    return {k: getattr(spec, k) for k in (
        "dims", "spacing", "background_intensity", "wm_intensity",
        "lesion_intensity_range", "n_lesions", "lesion_radius_range_mm",
        "noise_sigma", "seed", "n_distractors",
        "distractor_intensity_range", "distractor_radius_range_mm")}
