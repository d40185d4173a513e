"""A desk-scale per-voxel segmenter trained with the full loss suite.

The model is deliberately tiny: a fixed bank of local statistics per
voxel (intensities at both timepoints, their difference, 3x3x3
neighbourhood means, the white-matter indicator, the prior-label channel
and a bias) feeding four independent logistic heads, one per output map.
Each head owns a feature mask; the head for the first timepoint never
sees the prior channel, so its output is independent of it by
construction. Linear heads keep every gradient analytic, which lets the
whole training chain be verified against finite differences.

Training is plain full-batch (or mini-batch) gradient descent. The prior
channel is included with probability ``prior_prob`` per sample per epoch,
so the model cannot grow dependent on it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .assembly import ModelInput, PredictionSet, plan_windows
from .errors import ValidationError
from .losses import (HEAD_NAMES, LossBreakdown, LossConfig, SampleLabels,
                     total_loss)
from .manifest import DatasetManifest, SubjectRecord
from .rng import make_rng
from .volume import Mask, Volume, load_mask, load_nifti

FEATURE_BANK_ID = "local_stats_v1"
FEATURE_NAMES = ("intensity_t1", "intensity_t2", "difference",
                 "mean3_t1", "mean3_t2", "wm", "prior", "bias")
N_FEATURES = len(FEATURE_NAMES)
PRIOR_FEATURE = FEATURE_NAMES.index("prior")


def _head_masks() -> np.ndarray:
    masks = np.ones((4, N_FEATURES))
    masks[0, PRIOR_FEATURE] = 0.0  # the t1 head must not read the prior
    return masks


BIAS_INIT = -2.0  # start heads near the true foreground rate (lesions are rare)


def _initial_weights() -> np.ndarray:
    w = np.zeros((4, N_FEATURES))
    w[:, FEATURE_NAMES.index("bias")] = BIAS_INIT
    return w


@dataclass
class ToyModel:
    weights: np.ndarray = field(
        default_factory=lambda: np.zeros((4, N_FEATURES)))
    feature_bank: str = FEATURE_BANK_ID

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (4, N_FEATURES):
            raise ValidationError(
                f"weights must be (4, {N_FEATURES}), got {self.weights.shape}")
        if self.feature_bank != FEATURE_BANK_ID:
            raise ValidationError(f"unknown feature bank {self.feature_bank!r}")
        self.head_masks = _head_masks()
        self.weights = self.weights * self.head_masks

    def save(self, path) -> None:
        doc = {"feature_bank": self.feature_bank,
               "heads": {h: list(map(float, w)) for h, w in
                         zip(HEAD_NAMES, self.weights)}}
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ToyModel":
        with open(path) as fh:
            doc = json.load(fh)
        weights = np.array([doc["heads"][h] for h in HEAD_NAMES])
        return cls(weights=weights, feature_bank=doc["feature_bank"])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    learning_rate: float = 50.0
    batch_size: int = 0              # 0 = full batch
    loss: LossConfig = field(default_factory=LossConfig)
    patch_size: int = 32
    seed: int = 0
    prior_prob: float = 0.5
    max_step_norm: float = 0.5       # cap on ||lr * grad|| per update

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError("epochs must be > 0")
        if not (0.0 <= self.prior_prob <= 1.0):
            raise ValueError("prior_prob must be in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kwargs = dict(d)
        if "loss" in kwargs and isinstance(kwargs["loss"], dict):
            kwargs["loss"] = LossConfig.from_dict(kwargs["loss"])
        return cls(**kwargs)


@dataclass(frozen=True)
class Ensemble:
    models: tuple[ToyModel, ...]

    def __post_init__(self):
        if not self.models:
            raise ValidationError("ensemble must be nonempty")
        banks = {m.feature_bank for m in self.models}
        if len(banks) != 1:
            raise ValidationError("ensemble members use different feature banks")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def extract_features(x1: np.ndarray, x2: np.ndarray, wm: np.ndarray,
                     prior: np.ndarray) -> np.ndarray:
    """Per-voxel feature matrix, shape (n_voxels, n_features).

    Neighbourhood means use clamped (edge-replicated) windows.
    """
    mean1 = ndimage.uniform_filter(x1.astype(np.float64), size=3,
                                   mode="nearest")
    mean2 = ndimage.uniform_filter(x2.astype(np.float64), size=3,
                                   mode="nearest")
    feats = np.stack([
        x1.ravel(), x2.ravel(), (x2 - x1).ravel(),
        mean1.ravel(), mean2.ravel(),
        wm.astype(np.float64).ravel(), prior.astype(np.float64).ravel(),
        np.ones(x1.size),
    ], axis=1)
    return feats


def _forward_probs(model: ToyModel, features: np.ndarray) -> np.ndarray:
    """(4, n_voxels) probability rows, one per head."""
    w = model.weights * model.head_masks
    return _sigmoid(features @ w.T).T


def forward(model: ToyModel, model_input: ModelInput) -> PredictionSet:
    """Predict the four probability maps for one assembled input."""
    x1 = model_input.image_t1.data
    feats = extract_features(x1, model_input.image_t2.data,
                             model_input.wm_t2.data,
                             model_input.prior_t1.data)
    probs = _forward_probs(model, feats)
    dims = x1.shape
    spacing = model_input.image_t1.spacing
    affine = model_input.image_t1.affine
    vols = [Volume(p.reshape(dims), spacing, affine) for p in probs]
    return PredictionSet(*vols)


# ---------------------------------------------------------------------------
# Training samples
# ---------------------------------------------------------------------------

@dataclass
class _Sample:
    features: np.ndarray        # (n_voxels, n_features), prior column filled
    has_prior: bool             # whether the prior column holds a real label
    wm: np.ndarray
    labels: SampleLabels
    sample_kind: str
    dims: tuple
    voxel_volume_mm3: float


def _label_array(mask: Mask | None):
    return None if mask is None else mask.data.astype(np.float64)


def build_samples(dataset: DatasetManifest, split: str = "train") -> list[_Sample]:
    """One training sample per temporal window of each subject.

    Windows over a duplicated timepoint count as cross-sectional (the
    volume band collapses to equality and the longitudinal term is
    skipped); both all-lesion heads then share the single label.
    """
    samples = []
    subjects = [s for s in dataset.subjects if s.split == split]
    for subject in subjects:
        loaded = []
        for tp in subject.timepoints:
            loaded.append({
                "image": load_nifti(tp.image),
                "wm": load_mask(tp.wm) if tp.wm else None,
                "all": load_mask(tp.all) if tp.all else None,
                "new": load_mask(tp.new) if tp.new else None,
                "vanishing": load_mask(tp.vanishing) if tp.vanishing else None,
            })
        if subject.is_longitudinal and subject.n_timepoints >= 2:
            pairs = [step.pair for step in plan_windows(subject).steps]
        else:
            pairs = [(1, 1)]
        for a, b in pairs:
            ta, tb = loaded[a - 1], loaded[b - 1]
            if tb["wm"] is None:
                raise ValidationError(
                    f"subject {subject.id}: timepoint {b} lacks a wm mask")
            x1 = ta["image"].data
            x2 = tb["image"].data
            wm = tb["wm"].data.astype(np.float64)
            prior_mask = ta["all"]
            prior = (prior_mask.data.astype(np.float64) if prior_mask is not None
                     else np.zeros_like(x1))
            if a == b:
                labels = SampleLabels(all_t1=_label_array(ta["all"]),
                                      all_t2=_label_array(ta["all"]))
                kind = "cross_sectional"
            else:
                labels = SampleLabels(
                    all_t1=_label_array(ta["all"]),
                    all_t2=_label_array(tb["all"]),
                    new_t2=_label_array(tb["new"]),
                    vanishing_t2=_label_array(tb["vanishing"]))
                kind = "longitudinal"
            samples.append(_Sample(
                features=extract_features(x1, x2, wm, prior),
                has_prior=prior_mask is not None,
                wm=wm,
                labels=labels,
                sample_kind=kind,
                dims=x1.shape,
                voxel_volume_mm3=ta["image"].voxel_volume_mm3,
            ))
    if not samples:
        raise ValidationError(f"no {split} samples in dataset {dataset.name!r}")
    return samples


def _crop_slices(dims, patch: int, rng) -> tuple:
    starts = [0 if d <= patch else int(rng.integers(0, d - patch + 1))
              for d in dims]
    return tuple(slice(s, s + min(patch, d)) for s, d in zip(starts, dims))


def _sample_loss_and_grad(model: ToyModel, sample: _Sample, cfg: TrainConfig,
                          epoch: int, use_prior: bool, crop):
    """Loss breakdown and weight gradient for one (possibly cropped) sample."""
    dims = sample.dims
    if crop is not None:
        flat_idx = np.arange(int(np.prod(dims))).reshape(dims)[crop].ravel()
        feats = sample.features[flat_idx]
        cdims = tuple(s.stop - s.start for s in crop)
        wm = sample.wm[crop]
        labels = SampleLabels(**{
            h: (sample.labels.get(h)[crop] if sample.labels.get(h) is not None
                else None) for h in HEAD_NAMES})
    else:
        feats = sample.features
        cdims = dims
        wm = sample.wm
        labels = sample.labels
    if not use_prior:
        feats = feats.copy()
        feats[:, PRIOR_FEATURE] = 0.0

    probs = _forward_probs(model, feats)

    class _Preds:
        pass

    preds = _Preds()
    for h, p in zip(HEAD_NAMES, probs):
        setattr(preds, h, p.reshape(cdims))
    breakdown, gset = total_loss(
        preds, labels, wm, cfg.loss, epoch, cfg.epochs,
        sample_kind=sample.sample_kind,
        voxel_volume_mm3=sample.voxel_volume_mm3)

    grad_w = np.zeros_like(model.weights)
    dmaps = gset.as_dict()
    for i, h in enumerate(HEAD_NAMES):
        dz = dmaps[h].ravel() * probs[i] * (1.0 - probs[i])
        grad_w[i] = dz @ feats
    grad_w *= model.head_masks
    return breakdown, grad_w


def _mean_breakdown(parts: list[LossBreakdown]) -> dict:
    n = len(parts)
    out = {k: sum(getattr(p, k) for p in parts) / n
           for k in ("dice", "longitudinal", "volumetric", "spatial", "total")}
    out["active_constraints"] = parts[0].active_constraints
    return out


def train(dataset: DatasetManifest, cfg: TrainConfig,
          subjects_filter=None) -> tuple[ToyModel, list[dict]]:
    """Gradient-descent training on the train split; deterministic per seed.

    Returns the model and a per-epoch loss history (mean breakdown over
    samples). Aborts with the epoch index if the loss goes non-finite.
    """
    samples = build_samples(dataset, "train")
    if subjects_filter is not None:
        keep = set(subjects_filter)
        subj_ids = _sample_subjects(dataset)
        samples = [s for s, sid in zip(samples, subj_ids) if sid in keep]
        if not samples:
            raise ValidationError("subjects_filter removed every sample")
    model = ToyModel(weights=_initial_weights())
    rng = make_rng(cfg.seed)
    history = []
    full_batch = cfg.batch_size in (0, None) or cfg.batch_size >= len(samples)

    for epoch in range(cfg.epochs):
        use_prior = [s.has_prior and (cfg.prior_prob >= 1.0
                                      or rng.random() < cfg.prior_prob)
                     for s in samples]
        crops = [(_crop_slices(s.dims, cfg.patch_size, rng)
                  if any(d > cfg.patch_size for d in s.dims) else None)
                 for s in samples]
        order = list(range(len(samples)))
        if not full_batch:
            order = list(rng.permutation(len(samples)))

        parts = []
        if full_batch:
            grad = np.zeros_like(model.weights)
            for i in order:
                bd, g = _sample_loss_and_grad(model, samples[i], cfg, epoch,
                                              use_prior[i], crops[i])
                parts.append(bd)
                grad += g
            grad /= len(samples)
            _step(model, grad, cfg)
        else:
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                grad = np.zeros_like(model.weights)
                for i in batch:
                    bd, g = _sample_loss_and_grad(model, samples[i], cfg,
                                                  epoch, use_prior[i], crops[i])
                    parts.append(bd)
                    grad += g
                grad /= len(batch)
                _step(model, grad, cfg)

        record = _mean_breakdown(parts)
        record["epoch"] = epoch
        if not np.isfinite(record["total"]):
            raise RuntimeError(f"training diverged at epoch {epoch}")
        history.append(record)
    return model, history


def _sample_subjects(dataset: DatasetManifest) -> list[str]:
    """Subject id per sample, in build_samples order."""
    ids = []
    for s in dataset.subjects:
        if s.split != "train":
            continue
        n_windows = s.n_timepoints if (s.is_longitudinal
                                       and s.n_timepoints >= 2) else 1
        ids.extend([s.id] * n_windows)
    return ids


def _step(model: ToyModel, grad: np.ndarray, cfg: TrainConfig) -> None:
    step = cfg.learning_rate * grad
    norm = float(np.linalg.norm(step))
    if cfg.max_step_norm > 0 and norm > cfg.max_step_norm:
        step = step * (cfg.max_step_norm / norm)
    model.weights = (model.weights - step) * model.head_masks


def train_ensemble(dataset: DatasetManifest, cfg: TrainConfig,
                   k_folds: int = 2) -> Ensemble:
    """K-fold training: member i leaves fold i out (round-robin folds)."""
    train_ids = [s.id for s in dataset.train_subjects()]
    if k_folds < 1 or k_folds > len(train_ids):
        raise ValueError(f"k_folds must be in [1, {len(train_ids)}]")
    models = []
    for k in range(k_folds):
        fold = {sid for i, sid in enumerate(train_ids) if i % k_folds == k}
        keep = [sid for sid in train_ids if sid not in fold] or train_ids
        sub_cfg = TrainConfig(**{**_cfg_dict(cfg), "seed": cfg.seed + k})
        model, _ = train(dataset, sub_cfg, subjects_filter=keep)
        models.append(model)
    return Ensemble(tuple(models))


def _cfg_dict(cfg: TrainConfig) -> dict:
    return {k: getattr(cfg, k) for k in (
        "epochs", "learning_rate", "batch_size", "loss", "patch_size",
        "seed", "prior_prob", "max_step_norm")}


def ensemble_predict(ensemble: Ensemble, model_input: ModelInput) -> PredictionSet:
    """Voxelwise mean of the member probability maps."""
    preds = [forward(m, model_input) for m in ensemble.models]
    out = {}
    for h in HEAD_NAMES:
        stack = np.stack([getattr(p, h).data for p in preds])
        ref = getattr(preds[0], h)
        out[h] = Volume(stack.mean(axis=0), ref.spacing, ref.affine)
    return PredictionSet(**out)


def grad_check(model: ToyModel, model_input: ModelInput,
               labels: SampleLabels, cfg: LossConfig, epoch: int = 60,
               n_epochs: int = 100, sample_kind: str = "longitudinal",
               step: float = 1e-3) -> float:
    """Max relative error of the chained weight gradient vs central FD."""
    x1 = model_input.image_t1.data
    feats = extract_features(x1, model_input.image_t2.data,
                             model_input.wm_t2.data, model_input.prior_t1.data)
    dims = x1.shape
    wm = model_input.wm_t2.data.astype(np.float64)
    voxvol = model_input.image_t1.voxel_volume_mm3

    def loss_of(weights: np.ndarray) -> float:
        probs = _sigmoid(feats @ (weights * model.head_masks).T).T

        class _Preds:
            pass

        preds = _Preds()
        for h, p in zip(HEAD_NAMES, probs):
            setattr(preds, h, p.reshape(dims))
        bd, _ = total_loss(preds, labels, wm, cfg, epoch, n_epochs,
                           sample_kind=sample_kind, voxel_volume_mm3=voxvol)
        return bd.total

    probs = _forward_probs(model, feats)

    class _Preds:
        pass

    preds = _Preds()
    for h, p in zip(HEAD_NAMES, probs):
        setattr(preds, h, p.reshape(dims))
    _, gset = total_loss(preds, labels, wm, cfg, epoch, n_epochs,
                         sample_kind=sample_kind, voxel_volume_mm3=voxvol)
    analytic = np.zeros_like(model.weights)
    dmaps = gset.as_dict()
    for i, h in enumerate(HEAD_NAMES):
        dz = dmaps[h].ravel() * probs[i] * (1.0 - probs[i])
        analytic[i] = dz @ feats
    analytic *= model.head_masks

    numeric = np.zeros_like(model.weights)
    work = model.weights.copy()
    for i in range(work.shape[0]):
        for j in range(work.shape[1]):
            orig = work[i, j]
            work[i, j] = orig + step
            f_plus = loss_of(work)
            work[i, j] = orig - step
            f_minus = loss_of(work)
            work[i, j] = orig
            numeric[i, j] = (f_plus - f_minus) / (2.0 * step)

    denom = max(float(np.abs(analytic).max()), float(np.abs(numeric).max()),
                1e-8)
    return float(np.abs(analytic - numeric).max()) / denom


# ---------------------------------------------------------------------------
# Inference over manifests
# ---------------------------------------------------------------------------

def predict_subject(model_or_ensemble, subject: SubjectRecord,
                    with_prior: bool = True,
                    threshold: float = 0.5) -> list[PredictionSet]:
    """Sliding-window inference for one subject (see assembly.run_subject)."""
    from .assembly import run_subject

    if isinstance(model_or_ensemble, Ensemble):
        def fn(mi):
            return ensemble_predict(model_or_ensemble, mi)
    else:
        def fn(mi):
            return forward(model_or_ensemble, mi)
    return run_subject(subject, fn, with_prior=with_prior,
                       binarize_threshold=threshold)
