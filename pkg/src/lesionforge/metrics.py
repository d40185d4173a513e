"""Evaluation: Dice overlap, lesion-wise detection F1, timepoint
inversion, and volume-trajectory consistency.

Edge-case conventions are declared here because the formulas leave them
open: Dice of two empty masks is 1; detection scores with no ground-truth
and no predicted lesions are 1; sensitivity with no ground-truth lesions
is vacuously 1, precision with no predicted components likewise; F1 is 0
when sensitivity + precision is 0.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import UndefinedCorrelationError, ValidationError
from .manifest import LabelAvailability, SubjectRecord, Timepoint
from .volume import Mask, connected_components, filter_small_components

DETECTION_RULES = ("literal", "lower_only")


@dataclass(frozen=True)
class LesionMatch:
    component_id: int
    overlap_fraction: float
    detected: bool


@dataclass(frozen=True)
class DetectionReport:
    tp: int
    n_gt_lesions: int
    n_pred_lesions: int
    sensitivity: float
    precision: float
    f1: float
    per_lesion: tuple[LesionMatch, ...]

    def as_dict(self) -> dict:
        return {
            "tp": self.tp,
            "n_gt_lesions": self.n_gt_lesions,
            "n_pred_lesions": self.n_pred_lesions,
            "sensitivity": self.sensitivity,
            "precision": self.precision,
            "f1": self.f1,
            "per_lesion": [
                {"component_id": m.component_id,
                 "overlap_fraction": m.overlap_fraction,
                 "detected": m.detected}
                for m in self.per_lesion],
        }


@dataclass(frozen=True)
class VolumeTrajectory:
    subject_id: str
    predicted_mm3: tuple[float, ...]
    ground_truth_mm3: tuple[float, ...]

    def __post_init__(self):
        if len(self.predicted_mm3) != len(self.ground_truth_mm3):
            raise ValueError("trajectory lengths differ")
        if any(v < 0 for v in self.predicted_mm3 + self.ground_truth_mm3):
            raise ValueError("volumes must be >= 0")


def dice_score(a: Mask, g: Mask) -> float:
    """2|A∩G| / (|A| + |G|); both empty -> 1 by convention."""
    if not a.grid_compatible(g):
        raise ValidationError("masks are not grid compatible")
    a_arr = a.bool()
    g_arr = g.bool()
    denom = int(a_arr.sum()) + int(g_arr.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a_arr & g_arr).sum()) / denom


def f1_from_rates(sensitivity: float, precision: float) -> float:
    if sensitivity + precision == 0.0:
        return 0.0
    return 2.0 * sensitivity * precision / (sensitivity + precision)


def detection_f1(pred: Mask, gt: Mask, min_overlap: float = 0.10,
                 max_overlap: float = 0.70, min_volume_mm3: float = 3.0,
                 connectivity: int = 26,
                 rule: str = "lower_only") -> DetectionReport:
    """Lesion-wise detection report.

    Both masks are first filtered to components of at least
    ``min_volume_mm3``. A ground-truth lesion counts as detected when the
    prediction covers at least ``min_overlap`` of its volume; under
    ``rule="literal"`` the coverage must additionally not exceed
    ``max_overlap`` (the stated protocol, kept even though it excludes
    near-perfect segmentations). Precision counts predicted components
    that touch any ground-truth lesion.
    """
    if rule not in DETECTION_RULES:
        raise ValueError(f"rule must be one of {DETECTION_RULES}")
    if not pred.grid_compatible(gt):
        raise ValidationError("masks are not grid compatible")
    pred_f = filter_small_components(pred, min_volume_mm3, connectivity)
    gt_f = filter_small_components(gt, min_volume_mm3, connectivity)

    gt_comps = connected_components(gt_f, connectivity)
    pred_comps = connected_components(pred_f, connectivity)
    pred_fg = pred_f.bool()
    gt_fg = gt_f.bool()

    matches = []
    tp = 0
    for i, comp in enumerate(gt_comps):
        idx = np.array(sorted(comp.voxels))
        covered = int(pred_fg[idx[:, 0], idx[:, 1], idx[:, 2]].sum())
        frac = covered / comp.voxel_count
        detected = frac >= min_overlap
        if rule == "literal":
            detected = detected and frac <= max_overlap
        tp += int(detected)
        matches.append(LesionMatch(i, frac, detected))

    pred_hits = 0
    for comp in pred_comps:
        idx = np.array(sorted(comp.voxels))
        if gt_fg[idx[:, 0], idx[:, 1], idx[:, 2]].any():
            pred_hits += 1

    sensitivity = 1.0 if not gt_comps else tp / len(gt_comps)
    precision = 1.0 if not pred_comps else pred_hits / len(pred_comps)
    return DetectionReport(
        tp=tp, n_gt_lesions=len(gt_comps), n_pred_lesions=len(pred_comps),
        sensitivity=sensitivity, precision=precision,
        f1=f1_from_rates(sensitivity, precision),
        per_lesion=tuple(matches))


def invert_timepoints(subject: SubjectRecord) -> SubjectRecord:
    """Reverse a longitudinal subject's time axis.

    New-lesion labels become vanishing-lesion labels of the mirrored
    successor timepoint and vice versa (lesions that appear going forward
    disappear going backward). Applying this twice returns the original
    record.
    """
    if not subject.is_longitudinal or subject.n_timepoints < 2:
        raise ValueError(f"subject {subject.id}: timepoint inversion needs a "
                         f"longitudinal subject")
    T = subject.n_timepoints
    old = subject.timepoints
    new_tps = []
    for j in range(T):
        src = old[T - 1 - j]             # image/wm/all travel with their scan
        entry = {"image": src.image, "wm": src.wm, "all": src.all,
                 "new": None, "vanishing": None}
        if j > 0:
            # the mirrored predecessor's deltas describe this transition,
            # with roles swapped
            mirror = old[T - j]
            entry["new"] = mirror.vanishing
            entry["vanishing"] = mirror.new
        new_tps.append(Timepoint(**entry))

    # availability swaps roles with the time axis
    av = subject.availability
    new_av = LabelAvailability(
        all_t1=av.all_t2,
        all_t2=av.all_t1,
        new_t2=av.vanishing_t2,
        vanishing_t2=av.new_t2,
    )
    return replace(subject, timepoints=tuple(new_tps), availability=new_av)


def volume_trajectory(preds, gts, spacing, subject_id: str = "") -> VolumeTrajectory:
    """Per-timepoint lesion volumes in mm^3 for prediction and truth."""
    if len(preds) != len(gts):
        raise ValueError(f"length mismatch: {len(preds)} vs {len(gts)}")
    if len(preds) < 2:
        raise ValueError("trajectories need at least 2 timepoints")
    voxvol = float(spacing[0]) * float(spacing[1]) * float(spacing[2])
    return VolumeTrajectory(
        subject_id=subject_id,
        predicted_mm3=tuple(float(m.data.sum()) * voxvol for m in preds),
        ground_truth_mm3=tuple(float(m.data.sum()) * voxvol for m in gts))


def pearson(x, y) -> float:
    """Pearson correlation; raises for zero variance in either input."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1D sequences of equal length")
    if x.size < 2:
        raise ValueError("need at least 2 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = float((dx * dx).sum())
    sy = float((dy * dy).sum())
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError(
            "correlation undefined for a zero-variance sequence")
    return float((dx * dy).sum() / np.sqrt(sx * sy))
