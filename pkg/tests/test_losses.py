import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lesionforge.losses import (LossConfig, SampleLabels, curriculum_active,
                                dice_loss, fd_gradient, longitudinal_loss,
                                relative_gradient_error, spatial_loss,
                                total_loss, volumetric_loss)
from lesionforge.rng import make_rng

SHAPE = (8, 8, 8)


def rand_case(seed, shape=SHAPE):
    rng = make_rng(seed)
    p = rng.uniform(0, 1, shape)
    q = rng.uniform(0, 1, shape)
    a = (rng.random(shape) < 0.3).astype(np.float64)
    b = (rng.random(shape) < 0.3).astype(np.float64)
    wm = (rng.random(shape) < 0.6).astype(np.float64)
    return p, q, a, b, wm


# ---------------------------------------------------------------------------
# Dice
# ---------------------------------------------------------------------------

def test_dice_perfect_match_zero():
    y = (make_rng(0).random(SHAPE) < 0.4).astype(np.float64)
    value, _ = dice_loss(y, y, smooth_eps=0.0)
    assert value == 0.0


def test_dice_all_zero_prediction():
    y = np.zeros(SHAPE)
    y[2:4, 2:4, 2:4] = 1.0           # |y| = 8
    value, _ = dice_loss(np.zeros(SHAPE), y, smooth_eps=1.0)
    assert value == pytest.approx(1.0 - 1.0 / 9.0)


def test_dice_gradient_matches_fd():
    p, _, a, _, _ = rand_case(11)
    _, grad = dice_loss(p, a, 1.0)
    (fd,) = fd_gradient(lambda x: dice_loss(x, a, 1.0)[0], [p])
    assert relative_gradient_error(grad, fd) <= 1e-4


# ---------------------------------------------------------------------------
# Longitudinal
# ---------------------------------------------------------------------------

def test_longitudinal_zero_predictions_as_written():
    _, _, a, b, _ = rand_case(12)
    zeros = np.zeros(SHAPE)
    value, _ = longitudinal_loss(zeros, zeros, a, b, mode="as_written")
    nvox = zeros.size
    # only the two XOR terms survive: mean(b^2) + mean(a^2)
    assert value == pytest.approx((b.sum() + a.sum()) / nvox)


def test_longitudinal_consistent_binary_config_is_zero():
    rng = make_rng(13)
    a = (rng.random(SHAPE) < 0.3).astype(np.float64)
    b = (rng.random(SHAPE) < 0.3).astype(np.float64)
    b[(a > 0) & (b > 0)] = 0.0       # force disjoint labels
    p_new = np.clip(b - a, 0, 1)     # exactly the appearing set
    p_van = np.clip(a - b, 0, 1)     # exactly the vanishing set
    for mode in ("as_written", "intent"):
        value, _ = longitudinal_loss(p_new, p_van, a, b, mode=mode)
        assert value == 0.0


@pytest.mark.parametrize("mode", ["as_written", "intent"])
def test_longitudinal_gradients_match_fd(mode):
    p, q, a, b, _ = rand_case(14)
    _, (gq, gr) = longitudinal_loss(p, q, a, b, mode=mode)
    fdq, fdr = fd_gradient(
        lambda x, y: longitudinal_loss(x, y, a, b, mode=mode)[0], [p, q])
    assert relative_gradient_error(gq, fdq) <= 1e-4
    assert relative_gradient_error(gr, fdr) <= 1e-4


def test_longitudinal_rejects_unknown_mode():
    z = np.zeros(SHAPE)
    with pytest.raises(ValueError):
        longitudinal_loss(z, z, z, z, mode="other")


def test_longitudinal_rejects_missing_labels():
    z = np.zeros(SHAPE)
    with pytest.raises(ValueError, match="both"):
        longitudinal_loss(z, z, None, z)


# ---------------------------------------------------------------------------
# Volumetric
# ---------------------------------------------------------------------------

def test_volumetric_inside_band_zero():
    p1 = np.full((10, 10, 1), 1.0)          # v1 = 100
    p2 = np.full((10, 11, 1), 1.0)          # v2 = 110
    value, (g1, g2) = volumetric_loss(p1, p2, 1.2, 0.8, 1.0)
    assert value == 0.0
    assert not g1.any() and not g2.any()


def test_volumetric_upper_branch_value():
    p1 = np.full((10, 10, 1), 1.0)          # v1 = 100
    p2 = np.full((10, 13, 1), 1.0)          # v2 = 130
    value, _ = volumetric_loss(p1, p2, 1.2, 0.8, 1.0)
    assert value == pytest.approx((130 - 120) ** 2)


def test_volumetric_cross_sectional_override():
    rng = make_rng(15)
    p = rng.uniform(0, 1, SHAPE)
    value, _ = volumetric_loss(p, p.copy(), 1.0, 1.0, 1.0)
    assert value == 0.0
    bumped = p.copy()
    bumped[0, 0, 0] = min(1.0, bumped[0, 0, 0] + 0.25)
    value, _ = volumetric_loss(p, bumped, 1.0, 1.0, 1.0)
    assert value > 0.0


def test_volumetric_band_sweep_exactness():
    base = np.ones((10, 10, 10))            # 1000 voxels
    v1 = float(base.sum())
    for m in range(400, 1601):              # ratio 0.4 .. 1.6 in 1/1000 steps
        p2 = np.zeros(1601)
        p2[:m] = 1.0
        value, _ = volumetric_loss(base, p2.reshape(1601, 1, 1), 1.2, 0.8, 1.0)
        ratio = m / v1
        if 0.8 <= ratio <= 1.2:
            assert value == 0.0, f"ratio {ratio}"
        else:
            assert value > 0.0, f"ratio {ratio}"


@pytest.mark.parametrize("scale", [0.5, 1.6])  # lower and upper branches
def test_volumetric_gradients_match_fd(scale):
    p, q, _, _, _ = rand_case(16)
    q = np.clip(q * scale, 0, 1)
    value, (g1, g2) = volumetric_loss(p, q, 1.2, 0.8, 1.0)
    assert value > 0.0                 # the branch under test is active
    fd1, fd2 = fd_gradient(
        lambda x, y: volumetric_loss(x, y, 1.2, 0.8, 1.0)[0], [p, q])
    assert relative_gradient_error(g1, fd1) <= 1e-4
    assert relative_gradient_error(g2, fd2) <= 1e-4


def test_volumetric_permutation_invariant():
    rng = make_rng(17)
    p1 = rng.uniform(0, 1, SHAPE)
    p2 = rng.uniform(0, 1, SHAPE)
    v_ref, _ = volumetric_loss(p1, p2, 1.05, 0.95, 1.0)
    perm = rng.permutation(p2.ravel()).reshape(SHAPE)
    # same multiset of voxels in a different order
    v_perm, _ = volumetric_loss(p1, perm, 1.05, 0.95, 1.0)
    assert v_perm == pytest.approx(v_ref, abs=1e-9)


def test_volumetric_rejects_inverted_band():
    z = np.zeros(SHAPE)
    with pytest.raises(ValueError):
        volumetric_loss(z, z, 0.8, 1.2)


# ---------------------------------------------------------------------------
# Spatial
# ---------------------------------------------------------------------------

def test_spatial_intent_zero_inside_wm():
    rng = make_rng(18)
    wm = (rng.random(SHAPE) < 0.5).astype(np.float64)
    p = rng.uniform(0, 1, SHAPE) * wm       # support inside wm only
    value, _ = spatial_loss(p, wm, mode="intent")
    assert value == 0.0


def test_spatial_intent_single_outside_voxel():
    wm = np.ones((10, 10, 10))
    wm[0, 0, 0] = 0.0
    p = np.zeros((10, 10, 10))
    p[0, 0, 0] = 1.0
    value, _ = spatial_loss(p, wm, mode="intent")
    assert value == pytest.approx(1.0 / 1000.0)


@pytest.mark.parametrize("mode", ["as_written", "intent"])
def test_spatial_gradients_match_fd(mode):
    p, _, _, _, wm = rand_case(19)
    _, grad = spatial_loss(p, wm, mode=mode)
    (fd,) = fd_gradient(lambda x: spatial_loss(x, wm, mode=mode)[0], [p])
    assert relative_gradient_error(grad, fd) <= 1e-4


def test_spatial_as_written_penalizes_inside_too():
    # the literal XOR form punishes confident lesions inside wm
    wm = np.ones(SHAPE)
    p = np.ones(SHAPE)
    value, _ = spatial_loss(p, wm, mode="as_written")
    assert value == pytest.approx(1.0)
    value, _ = spatial_loss(p, wm, mode="intent")
    assert value == 0.0


# ---------------------------------------------------------------------------
# Total loss / curriculum
# ---------------------------------------------------------------------------

class _Preds:
    def __init__(self, all_t1, all_t2, new_t2, vanishing_t2):
        self.all_t1 = all_t1
        self.all_t2 = all_t2
        self.new_t2 = new_t2
        self.vanishing_t2 = vanishing_t2


def full_setup(seed):
    rng = make_rng(seed)
    preds = _Preds(rng.uniform(0, 1, SHAPE), rng.uniform(0, 1, SHAPE),
                   rng.uniform(0, 1, SHAPE), rng.uniform(0, 1, SHAPE))
    a = (rng.random(SHAPE) < 0.3).astype(np.float64)
    b = (rng.random(SHAPE) < 0.3).astype(np.float64)
    labels = SampleLabels(all_t1=a, all_t2=b,
                          new_t2=np.clip(b - a, 0, 1),
                          vanishing_t2=np.clip(a - b, 0, 1))
    wm = (rng.random(SHAPE) < 0.6).astype(np.float64)
    return preds, labels, wm


def test_total_before_switch_is_dice_only():
    preds, labels, wm = full_setup(20)
    cfg = LossConfig()
    bd, _ = total_loss(preds, labels, wm, cfg, epoch=0, n_epochs=100,
                       voxel_volume_mm3=1.0)
    assert not bd.active_constraints
    assert bd.total == bd.dice


def test_total_after_switch_combines_with_lambdas():
    preds, labels, wm = full_setup(21)
    cfg = LossConfig(lambda_long=2.0, lambda_vol=1.0, lambda_spat=1.0)
    bd, _ = total_loss(preds, labels, wm, cfg, epoch=50, n_epochs=100,
                       voxel_volume_mm3=1.0)
    assert bd.active_constraints
    assert bd.total == bd.dice + 2.0 * bd.longitudinal + bd.volumetric + bd.spatial


def test_curriculum_switch_is_exact():
    preds, labels, wm = full_setup(22)
    cfg = LossConfig()
    before, _ = total_loss(preds, labels, wm, cfg, epoch=49, n_epochs=100,
                           voxel_volume_mm3=1.0)
    after, _ = total_loss(preds, labels, wm, cfg, epoch=50, n_epochs=100,
                          voxel_volume_mm3=1.0)
    # identical parts; only the combination changes
    assert before.dice == after.dice
    assert before.longitudinal == after.longitudinal
    assert before.volumetric == after.volumetric
    assert before.spatial == after.spatial
    assert before.total == before.dice
    assert after.total == (after.dice + 2.0 * after.longitudinal
                           + after.volumetric + after.spatial)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 199), st.integers(0, 2**32 - 1))
def test_total_with_zero_lambdas_equals_dice(epoch, seed):
    preds, labels, wm = full_setup(seed)
    cfg = LossConfig(lambda_long=0.0, lambda_vol=0.0, lambda_spat=0.0)
    bd, _ = total_loss(preds, labels, wm, cfg, epoch=epoch, n_epochs=200,
                       voxel_volume_mm3=1.0)
    dice, _ = dice_loss(preds.all_t1, labels.all_t1, cfg.smooth_eps)
    assert bd.total == bd.dice


def test_total_gradient_is_sum_of_parts():
    preds, labels, wm = full_setup(23)
    cfg = LossConfig()
    _, gset = total_loss(preds, labels, wm, cfg, epoch=60, n_epochs=100,
                         sample_kind="longitudinal", voxel_volume_mm3=1.0)

    heads = ("all_t1", "all_t2", "new_t2", "vanishing_t2")
    expected = {h: np.zeros(SHAPE) for h in heads}
    for h in heads:
        _, g = dice_loss(getattr(preds, h), getattr(labels, h), cfg.smooth_eps)
        expected[h] += 0.25 * g          # four labelled heads
    _, (gq, gr) = longitudinal_loss(preds.new_t2, preds.vanishing_t2,
                                    labels.all_t1, labels.all_t2, cfg.xor_mode)
    expected["new_t2"] += cfg.lambda_long * gq
    expected["vanishing_t2"] += cfg.lambda_long * gr
    _, (g1, g2) = volumetric_loss(preds.all_t1, preds.all_t2, cfg.alpha_high,
                                  cfg.alpha_low, 1.0)
    expected["all_t1"] += cfg.lambda_vol * g1
    expected["all_t2"] += cfg.lambda_vol * g2
    for h in heads:
        _, g = spatial_loss(getattr(preds, h), wm, cfg.xor_mode)
        expected[h] += cfg.lambda_spat * g

    actual = gset.as_dict()
    for h in heads:
        assert np.abs(actual[h] - expected[h]).max() <= 1e-10


def test_total_skips_longitudinal_for_cross_sectional():
    preds, labels, wm = full_setup(24)
    cfg = LossConfig()
    bd, gset = total_loss(preds, labels, wm, cfg, epoch=60, n_epochs=100,
                          sample_kind="cross_sectional", voxel_volume_mm3=1.0)
    assert bd.longitudinal == 0.0
    # cross-sectional override: volume band collapses to alpha = 1
    v_ref, _ = volumetric_loss(preds.all_t1, preds.all_t2, 1.0, 1.0, 1.0)
    assert bd.volumetric == v_ref


def test_total_dice_only_over_available_heads():
    preds, labels, wm = full_setup(25)
    labels.all_t2 = None
    labels.new_t2 = None
    labels.vanishing_t2 = None
    cfg = LossConfig()
    bd, gset = total_loss(preds, labels, wm, cfg, epoch=0, n_epochs=100,
                          voxel_volume_mm3=1.0)
    dice, grad = dice_loss(preds.all_t1, labels.all_t1, cfg.smooth_eps)
    assert bd.dice == dice
    assert np.array_equal(gset.d_all_t1, grad)
    assert not gset.d_all_t2.any()   # inactive epoch, no labels -> no grad


def test_total_rejects_bad_curriculum_fraction():
    with pytest.raises(ValueError):
        LossConfig(curriculum_fraction=0.0)
    with pytest.raises(ValueError):
        LossConfig(curriculum_fraction=1.5)


def test_curriculum_active_boundary():
    assert not curriculum_active(49, 100)
    assert curriculum_active(50, 100)
    assert curriculum_active(75, 100, 0.75)
    assert not curriculum_active(74, 100, 0.75)


def test_lossconfig_dict_roundtrip():
    cfg = LossConfig(lambda_long=3.0, xor_mode="as_written")
    assert LossConfig.from_dict(cfg.as_dict()) == cfg


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_every_loss_nonnegative(seed):
    p, q, a, b, wm = rand_case(seed, (6, 6, 6))
    assert dice_loss(p, a, 1.0)[0] >= 0.0
    for mode in ("as_written", "intent"):
        assert longitudinal_loss(p, q, a, b, mode)[0] >= 0.0
        assert spatial_loss(p, wm, mode)[0] >= 0.0
    assert volumetric_loss(p, q, 1.2, 0.8, 1.0)[0] >= 0.0
