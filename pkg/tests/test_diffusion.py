import numpy as np
import pytest
from scipy import stats

import groupdiff as gd
from groupdiff.diffusion import make_group_batch, to_signed, to_unit
from groupdiff.errors import DimensionError, NumericError, ValidationError
from groupdiff.tensor import Tensor


def test_schedule_alpha_bar_convention():
    sched = gd.NoiseSchedule(gd.ScheduleConfig(total_steps=50))
    assert sched.alpha_bars[0] == 1.0
    assert np.all(np.diff(sched.alpha_bars) < 0)
    assert sched.alpha_bars[-1] < 0.05


def test_schedule_rejects_bad_betas():
    with pytest.raises(ValidationError):
        gd.NoiseSchedule(betas=np.array([0.5, 1.5]))
    with pytest.raises(ValidationError):
        gd.NoiseSchedule(betas=np.array([0.0, 0.1]))


def test_forward_noising_t0_is_clean():
    sched = gd.NoiseSchedule()
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((4, 4, 3))
    eps = rng.standard_normal((4, 4, 3))
    assert np.array_equal(gd.forward_noising(x0, 0, eps, sched), x0)


def test_forward_noising_final_level_is_mostly_noise():
    sched = gd.NoiseSchedule()
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal((8, 8, 3))
    eps = rng.standard_normal((8, 8, 3))
    xt = gd.forward_noising(x0, sched.total_steps - 1, eps, sched)
    # sqrt(abar) < 0.05 at the last level, so x_t is eps within that leakage
    assert np.abs(xt - eps).max() <= 0.05 * np.abs(x0).max() + 0.05


def test_forward_noising_matches_cumprod_oracle():
    # linear betas 1e-4..0.02 over T=100, checked at t=10 elementwise
    betas = np.linspace(1e-4, 0.02, 100)
    sched = gd.NoiseSchedule(betas=betas)
    abar = 1.0
    for s in range(10):
        abar *= 1.0 - betas[s]
    assert sched.alpha_bars[10] == pytest.approx(abar, rel=1e-14)
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((5, 5, 3))
    eps = rng.standard_normal((5, 5, 3))
    expected = np.sqrt(abar) * x0 + np.sqrt(1 - abar) * eps
    assert np.allclose(gd.forward_noising(x0, 10, eps, sched), expected, atol=1e-14)


def test_forward_noising_validates():
    sched = gd.NoiseSchedule()
    x = np.zeros((2, 2, 3))
    with pytest.raises(ValidationError):
        gd.forward_noising(x, 100, x, sched)
    with pytest.raises(DimensionError):
        gd.forward_noising(x, 1, np.zeros((3, 3, 3)), sched)


def test_forward_noising_per_member_levels():
    sched = gd.NoiseSchedule()
    x0 = np.ones((2, 3, 4, 4, 3))
    eps = np.zeros_like(x0)
    t = np.array([[0, 50, 99], [10, 10, 10]])
    out = gd.forward_noising(x0, t, eps, sched)
    assert np.allclose(out[0, 0], 1.0)
    assert np.allclose(out[0, 1], np.sqrt(sched.alpha_bars[50]))


# -- group timesteps -----------------------------------------------------------

def test_sigma_zero_gives_identical_timesteps():
    sched = gd.NoiseSchedule()
    policy = gd.GroupNoisePolicy(sigma_tv=0)
    rng = np.random.default_rng(3)
    for _ in range(200):
        t = gd.sample_group_timesteps(4, policy, sched, rng)
        assert np.all(t == t[0])


def test_sigma_fifty_bounds_deviation():
    sched = gd.NoiseSchedule()
    policy = gd.GroupNoisePolicy(sigma_tv=50)
    rng = np.random.default_rng(4)
    for _ in range(2000):
        t = gd.sample_group_timesteps(3, policy, sched, rng)
        assert np.abs(t - t[0]).max() <= 50
        assert t.min() >= 0 and t.max() < sched.total_steps


def test_sigma_at_least_t_covers_range_uniformly():
    # with the radius >= T the member distribution is uniform over [0, T)
    sched = gd.NoiseSchedule()
    policy = gd.GroupNoisePolicy(sigma_tv=sched.total_steps)
    rng = np.random.default_rng(5)
    draws = np.concatenate([
        gd.sample_group_timesteps(2, policy, sched, rng)[1:] for _ in range(100_000)])
    counts = np.bincount(draws, minlength=sched.total_steps)
    chi2 = ((counts - draws.size / sched.total_steps) ** 2
            / (draws.size / sched.total_steps)).sum()
    assert chi2 < stats.chi2.ppf(0.999, sched.total_steps - 1)
    assert counts.min() > 0


# -- group loss ------------------------------------------------------------------

def test_group_loss_zero_iff_equal():
    eps = np.random.default_rng(6).standard_normal((3, 4, 4, 3))
    assert gd.group_loss(Tensor(eps), eps).item() == 0.0
    bumped = eps.copy()
    bumped[1, 0, 0, 0] += 1e-3
    assert gd.group_loss(Tensor(bumped), eps).item() > 0.0


def test_group_loss_n1_equals_plain_mse():
    rng = np.random.default_rng(7)
    pred = rng.standard_normal((1, 5, 5, 3))
    target = rng.standard_normal((1, 5, 5, 3))
    loss = gd.group_loss(Tensor(pred), target).item()
    assert loss == pytest.approx(np.mean((pred - target) ** 2), rel=1e-12)


def test_group_loss_hand_arithmetic():
    pred = np.array([[0.0, 0.0], [1.0, 1.0]])
    target = np.array([[1.0, 1.0], [1.0, 1.0]])
    # per-member mean squared errors are {1, 0}; the group loss is their sum
    assert gd.group_loss(Tensor(pred), target).item() == pytest.approx(1.0, abs=1e-15)


def test_group_loss_additive_over_member_concat():
    rng = np.random.default_rng(8)
    a_p, a_t = rng.standard_normal((2, 3, 3, 1)), rng.standard_normal((2, 3, 3, 1))
    b_p, b_t = rng.standard_normal((3, 3, 3, 1)), rng.standard_normal((3, 3, 3, 1))
    joint = gd.group_loss(Tensor(np.concatenate([a_p, b_p])),
                          np.concatenate([a_t, b_t])).item()
    split = gd.group_loss(Tensor(a_p), a_t).item() + gd.group_loss(Tensor(b_p), b_t).item()
    assert joint == pytest.approx(split, rel=1e-12)


def test_group_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        gd.group_loss(Tensor(np.zeros((2, 2))), np.zeros((3, 2)))


# -- label dropout ----------------------------------------------------------------

def test_label_dropout_p0_and_p1():
    labels = np.array([0, 1, 2])
    rng = np.random.default_rng(9)
    out, dropped = gd.label_dropout(labels, 0.0, rng, null_class=8)
    assert not dropped and np.array_equal(out, labels)
    out, dropped = gd.label_dropout(labels, 1.0, rng, null_class=8)
    assert dropped and np.all(out == 8)


def test_label_dropout_rate_monte_carlo():
    rng = np.random.default_rng(10)
    labels = np.array([1])
    hits = sum(gd.label_dropout(labels, 0.1, rng, 8)[1] for _ in range(100_000))
    assert abs(hits / 100_000 - 0.1) <= 0.005


def test_label_dropout_validates_p():
    with pytest.raises(ValidationError):
        gd.label_dropout(np.array([0]), 1.5, np.random.default_rng(0), 8)


# -- batch construction / pixel mapping --------------------------------------------

def test_make_group_batch_respects_sigma():
    sched = gd.NoiseSchedule()
    policy = gd.GroupNoisePolicy(sigma_tv=5)
    rng = np.random.default_rng(11)
    images = rng.standard_normal((4, 8, 8, 3))
    batch = make_group_batch(images, np.array([0, 1, 2, 3]), policy, sched, rng)
    assert np.abs(batch.timesteps - batch.timesteps[0]).max() <= 5
    assert batch.noise.shape == images.shape
    assert batch.group_size == 4


def test_signed_unit_round_trip():
    pix = np.random.default_rng(12).random((4, 4, 3)).astype(np.float32)
    assert np.allclose(to_unit(to_signed(pix)), pix, atol=1e-7)
    assert to_unit(np.array([-3.0, 3.0])).tolist() == [0.0, 1.0]
