"""Model-input assembly and the sliding temporal window.

The segmenter always sees four channels: images at two timepoints, the
all-lesion mask of the earlier timepoint as a prior, and the white-matter
mask of the later timepoint. Subjects that do not have all of these get
the substitution rules applied (duplicate the image, zero the prior) and
the substitutions are recorded in flags so downstream code never has to
guess where a channel came from.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ValidationError
from .manifest import SubjectRecord
from .rng import make_rng
from .volume import Mask, Volume, load_mask, load_nifti

PRIOR_SOURCES = ("ground_truth", "previous_prediction", "zero")


@dataclass(frozen=True)
class InputFlags:
    t2_duplicated: bool = False
    label_zero_substituted: bool = False
    label_from_prediction: bool = False

    def as_dict(self) -> dict:
        return {
            "t2_duplicated": self.t2_duplicated,
            "label_zero_substituted": self.label_zero_substituted,
            "label_from_prediction": self.label_from_prediction,
        }


@dataclass(frozen=True)
class ModelInput:
    """The four input channels plus a faithful record of substitutions."""

    image_t1: Volume
    image_t2: Volume
    prior_t1: Mask
    wm_t2: Mask
    flags: InputFlags = field(default_factory=InputFlags)

    def __post_init__(self):
        for name, grid in (("image_t2", self.image_t2),
                           ("prior_t1", self.prior_t1),
                           ("wm_t2", self.wm_t2)):
            if not self.image_t1.grid_compatible(grid):
                raise ValidationError(
                    f"{name} grid {grid.dims}/{grid.spacing} incompatible with "
                    f"image_t1 {self.image_t1.dims}/{self.image_t1.spacing}")
        if self.flags.t2_duplicated and not np.array_equal(
                self.image_t1.data, self.image_t2.data):
            raise ValidationError("t2_duplicated flag set but images differ")
        if self.flags.label_zero_substituted and self.prior_t1.data.any():
            raise ValidationError(
                "label_zero_substituted flag set but prior is not all zeros")


@dataclass(frozen=True)
class PredictionSet:
    """Probability maps for the four segmentation heads."""

    all_t1: Volume
    all_t2: Volume
    new_t2: Volume
    vanishing_t2: Volume

    def __post_init__(self):
        for name in ("all_t2", "new_t2", "vanishing_t2"):
            other = getattr(self, name)
            if not self.all_t1.grid_compatible(other):
                raise ValidationError(f"{name} grid incompatible with all_t1")
        for name in ("all_t1", "all_t2", "new_t2", "vanishing_t2"):
            data = getattr(self, name).data
            if data.min() < 0.0 or data.max() > 1.0:
                raise ContractError(
                    f"prediction map {name} has values outside [0, 1]")

    def maps(self) -> dict:
        return {"all_t1": self.all_t1, "all_t2": self.all_t2,
                "new_t2": self.new_t2, "vanishing_t2": self.vanishing_t2}


@dataclass(frozen=True)
class WindowStep:
    pair: tuple[int, int]           # 1-based timepoint indices (a, b), a <= b
    prior_source: str               # one of PRIOR_SOURCES


@dataclass(frozen=True)
class WindowPlan:
    steps: tuple[WindowStep, ...]

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)


def plan_windows(subject: SubjectRecord, with_prior: bool = True) -> WindowPlan:
    """Window schedule for a longitudinal subject.

    T timepoints yield T steps: (1,1), (1,2), ..., (T-1,T). The first
    step's prior is the stored t1 label when available and requested,
    otherwise zero; later steps feed the previous prediction forward.
    Degenerate single-timepoint subjects are handled by the
    cross-sectional path, not here.
    """
    if not subject.is_longitudinal or subject.n_timepoints < 2:
        raise ValueError(
            f"subject {subject.id}: plan_windows needs a longitudinal subject "
            f"with >= 2 timepoints (cross-sectional plans are the single "
            f"pair (1, 1))")
    first_source = "zero"
    if with_prior and subject.timepoints[0].all is not None:
        first_source = "ground_truth"
    steps = [WindowStep((1, 1), first_source)]
    for k in range(1, subject.n_timepoints):
        steps.append(WindowStep((k, k + 1), "previous_prediction"))
    return WindowPlan(tuple(steps))


def _zero_mask(like: Volume) -> Mask:
    return Mask(np.zeros(like.dims, dtype=np.uint8), like.spacing, like.affine)


def load_subject_volumes(subject: SubjectRecord):
    """Load every referenced image/mask once; returns per-timepoint dicts."""
    loaded = []
    for k, tp in enumerate(subject.timepoints, start=1):
        entry = {"image": load_nifti(tp.image)}
        for key in ("wm", "all", "new", "vanishing"):
            p = getattr(tp, key)
            entry[key] = load_mask(p) if p is not None else None
        loaded.append(entry)
    return loaded


def assemble(subject: SubjectRecord, pair: tuple[int, int] = (1, 1),
             label_source: str = "ground_truth",
             provide_prior_prob: float = 1.0, seed: int = 0,
             volumes=None, prior: Mask | None = None) -> ModelInput:
    """Build the four-channel input for one timepoint pair.

    ``pair`` uses 1-based timepoint indices (a, b) with a <= b. With
    ``label_source="ground_truth"`` the stored t1 label is included with
    probability ``provide_prior_prob`` (the training-time prior dropout);
    when the draw excludes it, or no label exists, a zero mask is
    substituted and flagged. ``label_source="previous_prediction"``
    requires ``prior``. ``volumes`` may carry preloaded data from
    ``load_subject_volumes`` to avoid re-reading files.
    """
    a, b = pair
    if not (1 <= a <= b <= subject.n_timepoints):
        raise ValueError(f"pair {pair} out of range for "
                         f"{subject.n_timepoints} timepoint(s)")
    if label_source not in PRIOR_SOURCES:
        raise ValueError(f"label_source must be one of {PRIOR_SOURCES}")
    if not (0.0 <= provide_prior_prob <= 1.0):
        raise ValueError("provide_prior_prob must be in [0, 1]")
    if volumes is None:
        volumes = load_subject_volumes(subject)

    image_t1 = volumes[a - 1]["image"]
    image_t2 = volumes[b - 1]["image"] if b != a else image_t1.with_data(
        image_t1.data)
    wm = volumes[b - 1]["wm"]
    if wm is None:
        raise ValidationError(
            f"subject {subject.id}: timepoint {b} has no white-matter mask")

    duplicated = a == b
    zero_sub = False
    from_pred = False
    if label_source == "zero" or subject.format == "cross_sectional":
        # the prior channel is never used for cross-sectional input
        prior_mask = _zero_mask(image_t1)
        zero_sub = True
    elif label_source == "previous_prediction":
        if prior is None:
            raise ValueError("label_source='previous_prediction' needs a prior")
        prior_mask = prior
        from_pred = True
    else:
        stored = volumes[a - 1]["all"]
        include = stored is not None
        if include and provide_prior_prob < 1.0:
            include = bool(make_rng(seed).random() < provide_prior_prob)
        if include:
            prior_mask = stored
        else:
            prior_mask = _zero_mask(image_t1)
            zero_sub = True

    return ModelInput(
        image_t1=image_t1,
        image_t2=image_t2,
        prior_t1=prior_mask,
        wm_t2=wm,
        flags=InputFlags(duplicated, zero_sub, from_pred),
    )


def binarize(prob: Volume, threshold: float = 0.5) -> Mask:
    """Probability map to mask; ties at the threshold go to foreground."""
    return Mask((prob.data >= threshold).astype(np.uint8), prob.spacing,
                prob.affine)


def run_subject(subject: SubjectRecord, model, with_prior: bool = True,
                binarize_threshold: float = 0.5,
                volumes=None) -> list[PredictionSet]:
    """Run ``model`` over every window; returns one PredictionSet per
    timepoint, ordered by timepoint.

    ``model`` maps ModelInput -> PredictionSet. Later windows receive the
    previous window's binarized all-lesion map as their prior. With
    ``with_prior=False`` the prior channel is zero everywhere, matching
    the inference variant that never sees a t1 label.
    """
    if volumes is None:
        volumes = load_subject_volumes(subject)

    def _call(model_input: ModelInput) -> PredictionSet:
        preds = model(model_input)
        if not isinstance(preds, PredictionSet):
            raise ContractError(
                f"model returned {type(preds).__name__}, expected PredictionSet")
        if not preds.all_t1.grid_compatible(model_input.image_t1):
            raise ContractError("model output grid incompatible with input")
        return preds

    if not subject.is_longitudinal or subject.n_timepoints < 2:
        inp = assemble(subject, (1, 1), "zero", volumes=volumes)
        return [_call(inp)]

    plan = plan_windows(subject, with_prior=with_prior)
    outputs: list[PredictionSet] = []
    prev: PredictionSet | None = None
    for step in plan.steps:
        if step.prior_source == "previous_prediction":
            if with_prior:
                prior = binarize(prev.all_t2, binarize_threshold)
                inp = assemble(subject, step.pair, "previous_prediction",
                               volumes=volumes, prior=prior)
            else:
                inp = assemble(subject, step.pair, "zero", volumes=volumes)
        else:
            inp = assemble(subject, step.pair, step.prior_source,
                           volumes=volumes)
        prev = _call(inp)
        outputs.append(prev)
    return outputs
