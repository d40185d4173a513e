"""Constraint losses with values and analytic gradients.

Four losses and their curriculum-weighted combination:

* soft Dice overlap,
* a longitudinal consistency penalty tying new/vanishing predictions to
  the all-lesion labels of both timepoints,
* a volumetric band penalty that fires only when the predicted total
  lesion volume at t2 leaves [alpha_low, alpha_high] times the t1 volume,
* a spatial penalty on predictions outside the white-matter mask.

Boolean operators on continuous maps use the soft relaxations
AND(a, b) = a*b and XOR(a, b) = a + b - 2ab, which coincide with the
logical operators on binary inputs. The squared norms are means over
voxels, so values are resolution independent; averaging over a batch is
the trainer's job.

Two of the penalties have an ``as_written`` XOR form and an ``intent``
containment form (the XOR form also punishes behaviour the constraint is
supposed to allow); both are implemented, ``intent`` is the default.

Every gradient here is exact, which is what makes the finite-difference
verification suite (`fd_check_*`) meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import make_rng

XOR_MODES = ("as_written", "intent")
HEAD_NAMES = ("all_t1", "all_t2", "new_t2", "vanishing_t2")


def _arr(x) -> np.ndarray:
    """Accept Volume/Mask objects or plain arrays."""
    data = getattr(x, "data", x)
    return np.asarray(data, dtype=np.float64)


@dataclass(frozen=True)
class LossConfig:
    lambda_long: float = 2.0
    lambda_vol: float = 1.0
    lambda_spat: float = 1.0
    alpha_high: float = 1.2
    alpha_low: float = 0.8
    curriculum_fraction: float = 0.5
    xor_mode: str = "intent"
    smooth_eps: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.curriculum_fraction <= 1.0):
            raise ValueError("curriculum_fraction must be in (0, 1]")
        if self.xor_mode not in XOR_MODES:
            raise ValueError(f"xor_mode must be one of {XOR_MODES}")
        if not (self.alpha_low <= 1.0 <= self.alpha_high):
            raise ValueError("need alpha_low <= 1 <= alpha_high")
        for name in ("lambda_long", "lambda_vol", "lambda_spat"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**{k: d[k] for k in d})

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "lambda_long", "lambda_vol", "lambda_spat", "alpha_high",
            "alpha_low", "curriculum_fraction", "xor_mode", "smooth_eps")}


@dataclass(frozen=True)
class LossBreakdown:
    dice: float
    longitudinal: float
    volumetric: float
    spatial: float
    total: float
    active_constraints: bool

    def as_dict(self) -> dict:
        return {"dice": self.dice, "longitudinal": self.longitudinal,
                "volumetric": self.volumetric, "spatial": self.spatial,
                "total": self.total,
                "active_constraints": self.active_constraints}


@dataclass(frozen=True)
class GradientSet:
    """Per-voxel partials of the total loss w.r.t. each prediction map."""

    d_all_t1: np.ndarray
    d_all_t2: np.ndarray
    d_new_t2: np.ndarray
    d_vanishing_t2: np.ndarray

    def __post_init__(self):
        for name in ("d_all_t1", "d_all_t2", "d_new_t2", "d_vanishing_t2"):
            g = getattr(self, name)
            if not np.isfinite(g).all():
                raise ValueError(f"non-finite gradient in {name}")

    def as_dict(self) -> dict:
        return {"all_t1": self.d_all_t1, "all_t2": self.d_all_t2,
                "new_t2": self.d_new_t2, "vanishing_t2": self.d_vanishing_t2}


# ---------------------------------------------------------------------------
# Individual losses
# ---------------------------------------------------------------------------

def dice_loss(p, y, smooth_eps: float = 1.0):
    """Soft Dice loss and its gradient w.r.t. ``p``.

    value = 1 - (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps)
    """
    p = _arr(p)
    y = _arr(y)
    num = 2.0 * float((p * y).sum()) + smooth_eps
    den = float(p.sum()) + float(y.sum()) + smooth_eps
    value = 1.0 - num / den
    grad = -(2.0 * y * den - num) / (den * den)
    return value, grad


def _xor(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a + b - 2.0 * a * b


def longitudinal_loss(p_new, p_vanishing, all_t1, all_t2,
                      mode: str = "intent"):
    """Consistency of new/vanishing predictions with both all-lesion labels.

    Four mean-squared terms: new predictions must avoid t1 lesions and
    (``intent``) lie inside t2 lesions; vanishing predictions must lie
    inside t1 lesions and avoid t2 lesions. ``as_written`` swaps the two
    containment terms for symmetric-difference (XOR) penalties.

    Returns (value, (d_new, d_vanishing)).
    """
    if mode not in XOR_MODES:
        raise ValueError(f"mode must be one of {XOR_MODES}")
    if all_t1 is None or all_t2 is None:
        raise ValueError("longitudinal loss needs all-lesion labels at both "
                         "timepoints; skip it for samples without them")
    q = _arr(p_new)
    r = _arr(p_vanishing)
    a = _arr(all_t1)
    b = _arr(all_t2)
    nvox = q.size

    and_t1_new = a * q
    t1 = float((and_t1_new ** 2).sum()) / nvox
    d_q = 2.0 * (a * a) * q / nvox

    and_t2_van = b * r
    t4 = float((and_t2_van ** 2).sum()) / nvox
    d_r = 2.0 * (b * b) * r / nvox

    if mode == "as_written":
        x2 = _xor(b, q)
        t2 = float((x2 ** 2).sum()) / nvox
        d_q = d_q + 2.0 * x2 * (1.0 - 2.0 * b) / nvox
        x3 = _xor(a, r)
        t3 = float((x3 ** 2).sum()) / nvox
        d_r = d_r + 2.0 * x3 * (1.0 - 2.0 * a) / nvox
    else:
        out2 = q * (1.0 - b)
        t2 = float((out2 ** 2).sum()) / nvox
        d_q = d_q + 2.0 * out2 * (1.0 - b) / nvox
        out3 = r * (1.0 - a)
        t3 = float((out3 ** 2).sum()) / nvox
        d_r = d_r + 2.0 * out3 * (1.0 - a) / nvox

    return t1 + t2 + t3 + t4, (d_q, d_r)


def volumetric_loss(p_t1, p_t2, alpha_high: float = 1.2,
                    alpha_low: float = 0.8,
                    voxel_volume_mm3: float | None = None):
    """Band penalty on total soft lesion volume change between timepoints.

    Volumes are soft voxel sums times the voxel volume (mm^3, read from
    the map when not given). The loss is exactly zero while v2 lies
    inside [alpha_low * v1, alpha_high * v1] and quadratic in the
    violation outside; the band boundaries themselves are inside (the
    violation is zero there). Gradient flows into both maps through the
    two sums. Returns (value, (d_t1, d_t2)).
    """
    if alpha_low > alpha_high:
        raise ValueError(f"alpha_low {alpha_low} > alpha_high {alpha_high}")
    if voxel_volume_mm3 is None:
        voxel_volume_mm3 = getattr(p_t1, "voxel_volume_mm3", 1.0)
    voxvol = float(voxel_volume_mm3)
    p1 = _arr(p_t1)
    p2 = _arr(p_t2)
    v1 = float(p1.sum()) * voxvol
    v2 = float(p2.sum()) * voxvol

    if v2 > alpha_high * v1:
        diff = v2 - alpha_high * v1
        alpha = alpha_high
    elif v2 < alpha_low * v1:
        diff = v2 - alpha_low * v1
        alpha = alpha_low
    else:
        return 0.0, (np.zeros_like(p1), np.zeros_like(p2))

    value = diff * diff
    d_t2 = np.full_like(p2, 2.0 * diff * voxvol)
    d_t1 = np.full_like(p1, -2.0 * alpha * diff * voxvol)
    return value, (d_t1, d_t2)


def spatial_loss(p, wm, mode: str = "intent"):
    """Penalty on predictions outside the white-matter mask.

    ``intent``: mean((p * (1 - wm))^2) — punishes exactly the
    out-of-white-matter predictions. ``as_written``: the XOR form
    mean(XOR(p, 1 - wm)^2), kept for literal fidelity even though it also
    rewards predicting lesion everywhere outside white matter.
    """
    if mode not in XOR_MODES:
        raise ValueError(f"mode must be one of {XOR_MODES}")
    p_arr = _arr(p)
    c = 1.0 - _arr(wm)
    nvox = p_arr.size
    if mode == "as_written":
        x = _xor(p_arr, c)
        value = float((x ** 2).sum()) / nvox
        grad = 2.0 * x * (1.0 - 2.0 * c) / nvox
    else:
        out = p_arr * c
        value = float((out ** 2).sum()) / nvox
        grad = 2.0 * out * (c * c) / nvox
    return value, grad


# ---------------------------------------------------------------------------
# Total loss
# ---------------------------------------------------------------------------

@dataclass
class SampleLabels:
    """The labels one training sample actually has; None means absent."""

    all_t1: np.ndarray | None = None
    all_t2: np.ndarray | None = None
    new_t2: np.ndarray | None = None
    vanishing_t2: np.ndarray | None = None

    def get(self, head: str):
        return getattr(self, head)


def curriculum_active(epoch: int, n_epochs: int,
                      curriculum_fraction: float = 0.5) -> bool:
    """Constraints switch on once ``epoch >= fraction * n_epochs``."""
    return epoch >= curriculum_fraction * n_epochs


def total_loss(preds, labels: SampleLabels, wm, cfg: LossConfig, epoch: int,
               n_epochs: int, sample_kind: str = "longitudinal",
               voxel_volume_mm3: float | None = None):
    """Curriculum-weighted combination of all loss terms.

    Before the curriculum switch the total is the Dice term alone;
    afterwards constraint terms are added with their lambda weights. The
    Dice term is the mean over heads that have labels. The longitudinal
    term needs both all-lesion labels and a longitudinal sample. The
    volumetric band collapses to alpha = 1 for cross-sectional samples,
    pushing the duplicated-timepoint outputs to agree. Spatial applies to
    all four heads.

    ``preds`` is a PredictionSet or any object with all_t1/all_t2/new_t2/
    vanishing_t2 attributes (Volumes or arrays).

    Returns (LossBreakdown, GradientSet).
    """
    if sample_kind not in ("cross_sectional", "longitudinal"):
        raise ValueError(f"unknown sample_kind {sample_kind!r}")
    maps = {h: _arr(getattr(preds, h)) for h in HEAD_NAMES}
    wm_arr = _arr(wm)
    if voxel_volume_mm3 is None:
        voxel_volume_mm3 = getattr(getattr(preds, "all_t1"),
                                   "voxel_volume_mm3", 1.0)
    grads = {h: np.zeros_like(maps[h]) for h in HEAD_NAMES}

    active = curriculum_active(epoch, n_epochs, cfg.curriculum_fraction)

    # Dice: mean over heads that have ground truth
    dice_heads = [h for h in HEAD_NAMES if labels.get(h) is not None]
    dice_value = 0.0
    if dice_heads:
        scale = 1.0 / len(dice_heads)
        for h in dice_heads:
            val, grad = dice_loss(maps[h], labels.get(h), cfg.smooth_eps)
            dice_value += scale * val
            grads[h] += scale * grad

    # longitudinal: needs both all-lesion labels on a longitudinal sample
    long_value = 0.0
    long_applicable = (sample_kind == "longitudinal"
                       and labels.all_t1 is not None
                       and labels.all_t2 is not None)
    if long_applicable:
        long_value, (d_new, d_van) = longitudinal_loss(
            maps["new_t2"], maps["vanishing_t2"], labels.all_t1,
            labels.all_t2, cfg.xor_mode)
        if active and cfg.lambda_long != 0.0:
            grads["new_t2"] += cfg.lambda_long * d_new
            grads["vanishing_t2"] += cfg.lambda_long * d_van

    # volumetric: cross-sectional samples override the band to alpha = 1
    if sample_kind == "cross_sectional":
        a_high = a_low = 1.0
    else:
        a_high, a_low = cfg.alpha_high, cfg.alpha_low
    vol_value, (d_v1, d_v2) = volumetric_loss(
        maps["all_t1"], maps["all_t2"], a_high, a_low, voxel_volume_mm3)
    if active and cfg.lambda_vol != 0.0:
        grads["all_t1"] += cfg.lambda_vol * d_v1
        grads["all_t2"] += cfg.lambda_vol * d_v2

    # spatial: every head, summed
    spat_value = 0.0
    for h in HEAD_NAMES:
        val, grad = spatial_loss(maps[h], wm_arr, cfg.xor_mode)
        spat_value += val
        if active and cfg.lambda_spat != 0.0:
            grads[h] += cfg.lambda_spat * grad

    if active:
        total = (dice_value + cfg.lambda_long * long_value
                 + cfg.lambda_vol * vol_value + cfg.lambda_spat * spat_value)
    else:
        total = dice_value

    breakdown = LossBreakdown(
        dice=dice_value, longitudinal=long_value, volumetric=vol_value,
        spatial=spat_value, total=total, active_constraints=active)
    gradient = GradientSet(grads["all_t1"], grads["all_t2"], grads["new_t2"],
                           grads["vanishing_t2"])
    return breakdown, gradient


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

def fd_gradient(fn, arrays: list[np.ndarray], step: float = 1e-3,
                coords=None):
    """Central finite differences of ``fn(*arrays)`` w.r.t. every entry.

    ``fn`` must return a scalar. Returns one gradient array per input,
    with NaN at coordinates that were not evaluated when ``coords``
    restricts the check to a flat-index subset per array. Brute force by
    construction; this is the oracle side of every gradient check, so it
    must stay independent of the analytic paths.
    """
    grads = []
    for ai, base in enumerate(arrays):
        work = [a.copy() for a in arrays]
        flat = work[ai].reshape(-1)
        indices = range(flat.size) if coords is None else coords[ai]
        g = np.full_like(base, np.nan) if coords is not None \
            else np.zeros_like(base)
        gflat = g.reshape(-1)
        for i in indices:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = fn(*work)
            flat[i] = orig - step
            f_minus = fn(*work)
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * step)
        grads.append(g)
    return grads


def relative_gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute difference over the larger gradient's max magnitude.

    NaN entries in ``numeric`` mark unevaluated coordinates and are
    skipped.
    """
    mask = ~np.isnan(numeric)
    if not mask.any():
        return 0.0
    a = analytic[mask]
    f = numeric[mask]
    denom = max(float(np.abs(a).max(initial=0.0)),
                float(np.abs(f).max(initial=0.0)), 1e-8)
    return float(np.abs(a - f).max(initial=0.0)) / denom


def _random_case(rng, shape):
    p = rng.uniform(0.0, 1.0, size=shape)
    q = rng.uniform(0.0, 1.0, size=shape)
    a = (rng.random(shape) < 0.3).astype(np.float64)
    b = (rng.random(shape) < 0.3).astype(np.float64)
    wm = (rng.random(shape) < 0.6).astype(np.float64)
    return p, q, a, b, wm


def fd_check_losses(n_instances: int = 100, shape=(8, 8, 8), step: float = 1e-3,
                    seed: int = 2024, coords_per_map: int = 128) -> dict:
    """Run the FD verification campaign for every loss; returns max
    relative error per named configuration.

    The individual losses are checked at every coordinate. The combined
    loss is checked at ``coords_per_map`` seeded random coordinates per
    prediction map (0 = all), which keeps the campaign inside its runtime
    budget without weakening the per-coordinate comparison.
    """
    rng = make_rng(seed)
    results = {
        "dice": 0.0,
        "longitudinal/as_written": 0.0, "longitudinal/intent": 0.0,
        "volumetric": 0.0,
        "spatial/as_written": 0.0, "spatial/intent": 0.0,
        "total": 0.0,
    }
    cfg = LossConfig()
    for _ in range(n_instances):
        p, q, a, b, wm = _random_case(rng, shape)

        _, g = dice_loss(p, a, 1.0)
        (fd,) = fd_gradient(lambda x: dice_loss(x, a, 1.0)[0], [p], step)
        results["dice"] = max(results["dice"], relative_gradient_error(g, fd))

        for mode in XOR_MODES:
            _, (gq, gr) = longitudinal_loss(p, q, a, b, mode)
            fdq, fdr = fd_gradient(
                lambda x, y: longitudinal_loss(x, y, a, b, mode)[0],
                [p, q], step)
            err = max(relative_gradient_error(gq, fdq),
                      relative_gradient_error(gr, fdr))
            key = f"longitudinal/{mode}"
            results[key] = max(results[key], err)

        # scale the second map so instances hit the lower, inside and
        # upper band branches rather than sitting inside the band
        band_scale = (0.5, 1.0, 1.6)[int(rng.integers(0, 3))]
        q_scaled = np.clip(q * band_scale, 0.0, 1.0)
        _, (g1, g2) = volumetric_loss(p, q_scaled, 1.2, 0.8, 1.0)
        fd1, fd2 = fd_gradient(
            lambda x, y: volumetric_loss(x, y, 1.2, 0.8, 1.0)[0],
            [p, q_scaled], step)
        err = max(relative_gradient_error(g1, fd1),
                  relative_gradient_error(g2, fd2))
        results["volumetric"] = max(results["volumetric"], err)

        for mode in XOR_MODES:
            _, g = spatial_loss(p, wm, mode)
            (fd,) = fd_gradient(lambda x: spatial_loss(x, wm, mode)[0], [p], step)
            key = f"spatial/{mode}"
            results[key] = max(results[key],
                               relative_gradient_error(g, fd))

        labels = SampleLabels(all_t1=a, all_t2=b,
                              new_t2=np.clip(b - a, 0, 1),
                              vanishing_t2=np.clip(a - b, 0, 1))
        p2 = rng.uniform(0.0, 1.0, size=shape)
        q2 = rng.uniform(0.0, 1.0, size=shape)

        class _P:
            all_t1, all_t2, new_t2, vanishing_t2 = p, p2, q, q2

        _, gset = total_loss(_P, labels, wm, cfg, epoch=60, n_epochs=100,
                             sample_kind="longitudinal", voxel_volume_mm3=1.0)

        def _tot(x1, x2, x3, x4):
            class _Q:
                all_t1, all_t2, new_t2, vanishing_t2 = x1, x2, x3, x4
            bd, _ = total_loss(_Q, labels, wm, cfg, epoch=60, n_epochs=100,
                               sample_kind="longitudinal",
                               voxel_volume_mm3=1.0)
            return bd.total

        nvox = p.size
        if coords_per_map and coords_per_map < nvox:
            coords = [rng.choice(nvox, size=coords_per_map, replace=False)
                      for _ in range(4)]
        else:
            coords = None
        fds = fd_gradient(_tot, [p, p2, q, q2], step, coords=coords)
        err = max(relative_gradient_error(an, fd) for an, fd in
                  zip((gset.d_all_t1, gset.d_all_t2, gset.d_new_t2,
                       gset.d_vanishing_t2), fds))
        results["total"] = max(results["total"], err)
    return results
