import math

import numpy as np
import pytest

from fedcast import attacks as A
from fedcast import autodiff as ad
from fedcast import data as D
from fedcast import protocol as P
from fedcast.vna import DpConfig


# -- infoleak -----------------------------------------------------------------

def test_infoleak_perfect_reconstruction():
    x = np.random.default_rng(0).normal(size=(4, 3, 6, 1))
    assert A.infoleak(x, x) == 1.0


def test_infoleak_unit_distance():
    x = np.zeros((1, 1, 4, 1))
    recon = x.copy()
    recon[0, 0, 0, 0] = 1.0   # L2 distance exactly 1
    assert A.infoleak(x, recon) == pytest.approx(0.5)


def test_infoleak_vanishes_with_distance():
    x = np.zeros((1, 1, 4, 1))
    far = np.full_like(x, 1e9)
    assert A.infoleak(x, far) < 1e-8


def test_infoleak_strictly_decreasing_in_distance():
    x = np.zeros((1, 1, 8, 1))
    lams = []
    for scale in (0.1, 0.5, 1.0, 2.0, 10.0):
        recon = np.full_like(x, scale)
        lams.append(A.infoleak(x, recon))
    assert all(a > b for a, b in zip(lams, lams[1:]))


# -- total variation -----------------------------------------------------------

def test_tv_constant_series_is_zero():
    from fedcast.autodiff import Tape
    tape = Tape()
    x = tape.leaf(np.full((6, 2), 3.0))   # 3 steps x 2 series, constant
    tv = A.total_variation_time(x, n_series=2, n_steps=3, beta=2.0)
    assert tv.values[0, 0] == 0.0


def test_tv_hand_value():
    from fedcast.autodiff import Tape
    tape = Tape()
    # one series, one feature, values 0, 1, 3 -> TV = 1 + 4 = 5
    x = tape.leaf(np.array([[0.0], [1.0], [3.0]]))
    tv = A.total_variation_time(x, n_series=1, n_steps=3, beta=2.0)
    assert tv.values[0, 0] == pytest.approx(5.0)


# -- white-box on a linear map ---------------------------------------------------

def test_whitebox_recovers_identity_map_exactly():
    rng = np.random.default_rng(1)
    truth = [rng.normal(size=(2, 4, 1)) for _ in range(3)]

    def identity_fn(tape, x_leaf, window_shape):
        return x_leaf

    targets = [(i, A._time_major(t)) for i, t in enumerate(truth)]
    report = A.whitebox_attack(targets, None, (2, 4, 1), truth,
                               forward_fn=identity_fn, steps=500, lam=1e-4)
    assert report.infoleak >= 0.99
    assert report.scaled_mae < 0.01


def test_whitebox_invertible_linear_map():
    rng = np.random.default_rng(2)
    n, t, f = 2, 4, 2   # 16 unknowns per window
    w = rng.normal(size=(f, 8))
    truth = [rng.normal(size=(n, t, f)) for _ in range(2)]

    def linear_fn(tape, x_leaf, window_shape):
        return ad.matmul(x_leaf, tape.constant(w))

    # publish W-transformed windows (no noise), attack must invert
    targets = [(i, A._time_major(x) @ w) for i, x in enumerate(truth)]
    report = A.whitebox_attack(targets, None, (n, t, f), truth,
                               forward_fn=linear_fn, steps=500, lam=0.0)
    assert report.infoleak >= 0.99


def test_whitebox_lambda_zero_is_pure_embedding_distance():
    rng = np.random.default_rng(3)
    truth = [rng.normal(size=(1, 3, 1))]

    def identity_fn(tape, x_leaf, window_shape):
        return x_leaf

    targets = [(0, A._time_major(truth[0]))]
    r1 = A.whitebox_attack(targets, None, (1, 3, 1), truth,
                           forward_fn=identity_fn, steps=200, lam=0.0)
    assert r1.infoleak > 0.99


# -- baselines -------------------------------------------------------------------

def test_mean_attack_distance_equals_sample_norm():
    rng = np.random.default_rng(4)
    truth = [rng.normal(size=(3, 5, 1)) for _ in range(2)]
    report = A.baseline_attack("mean", truth)
    expect = np.linalg.norm(np.stack(truth).reshape(-1, 5), axis=1)
    np.testing.assert_allclose(report.per_sample_l2, expect)


def test_random_guess_reproducible():
    truth = [np.zeros((2, 4, 1))]
    r1 = A.baseline_attack("random-guess", truth, seed=7)
    r2 = A.baseline_attack("random-guess", truth, seed=7)
    assert r1.infoleak == r2.infoleak
    np.testing.assert_array_equal(r1.reconstruction, r2.reconstruction)


def test_random_guess_uniform_option_recorded():
    truth = [np.zeros((2, 4, 1))]
    report = A.baseline_attack("random-guess", truth, seed=1, distribution="uniform")
    assert report.settings["distribution"] == "uniform"
    assert abs(report.reconstruction).max() <= math.sqrt(3.0)


def test_baselines_ignore_published_data():
    # reports depend only on the dataset and seed, never on any model
    truth = [np.ones((2, 3, 1))]
    r1 = A.baseline_attack("mean", truth, seed=0)
    r2 = A.baseline_attack("mean", truth, seed=0)
    assert r1.infoleak == r2.infoleak


def test_baseline_rejects_unknown_kind():
    with pytest.raises(ValueError):
        A.baseline_attack("oracle", [np.zeros((1, 2, 1))])


# -- bound check ------------------------------------------------------------------

def test_bound_identity_matrix():
    noise = np.zeros(3)
    noise[0] = 0.1
    res = A.bound_check(DpConfig(epsilon=8.0), trials=1, matrix=np.eye(3), noise=noise)
    assert res.pass_rate == 1.0
    assert res.deviations[0] >= 0.1 - 1e-12
    assert res.bounds[0] == pytest.approx(0.1)


def test_bound_scaled_identity_halves_bound():
    noise = np.zeros(3)
    noise[0] = 0.1
    res = A.bound_check(DpConfig(epsilon=8.0), trials=1, matrix=2 * np.eye(3), noise=noise)
    assert res.bounds[0] == pytest.approx(0.05)
    assert res.pass_rate == 1.0


def test_bound_random_full_rank_always_holds():
    res = A.bound_check(DpConfig(epsilon=8.0, delta=1e-4, clip=1.0),
                        trials=300, dim=6, seed=0)
    assert res.skipped == 0
    assert res.pass_rate == 1.0


def test_bound_inconsistent_system_skipped():
    # rank-deficient tall map: noise leaves the image, trial must be skipped
    w = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    noise = np.array([0.0, 0.0, 0.5])
    res = A.bound_check(DpConfig(epsilon=8.0), trials=1, matrix=w, noise=noise)
    assert res.skipped == 1


# -- target selection ---------------------------------------------------------------

def test_select_targets_returns_subset_of_windows():
    rng = np.random.default_rng(5)
    data = {w: rng.normal(size=(3, 4, 1)) for w in range(40)}
    chosen = A.select_attack_targets(np.arange(40), lambda w: data[w], count=8, seed=0)
    assert len(chosen) == 8
    assert all(w in data for w in chosen)
    again = A.select_attack_targets(np.arange(40), lambda w: data[w], count=8, seed=0)
    assert chosen == again


def test_select_targets_small_pool_passthrough():
    chosen = A.select_attack_targets(np.array([3, 9]), lambda w: np.zeros((1, 2, 1)),
                                     count=16)
    assert chosen == [3, 9]


# -- end-to-end attack harness -------------------------------------------------------

def small_trained_federation(seed=0, dp=None, epochs=2):
    a, p = D.generate_synthetic(seed, 3, 4, 160, 2, 0.8)
    ds = D.build_dataset(a, [p], window=6, horizon=2)
    cfg = P.FederationConfig(hidden=8, temporal_layers=1, spatial_layers=2,
                             neighbors=2, heads=2, adaptive_rank=4)
    fed = P.Federation(ds, cfg, dp or DpConfig(), seed=seed)
    fed.train(P.TrainSettings(batch_size=8, max_epochs=epochs, patience=5))
    return fed


def test_collect_published_and_whitebox_beats_random_guess():
    fed = small_trained_federation()
    windows = fed.dataset.windows["test"][:4]
    targets, truth = A.collect_published(fed, windows)
    shape = truth[0].shape
    wb = A.whitebox_attack(targets, fed.passives[0], shape, truth,
                           clip=fed.dp.clip, steps=300)
    rg = A.baseline_attack("random-guess", truth, seed=0)
    assert wb.infoleak > rg.infoleak


def test_queryfree_with_zero_budget_near_baseline():
    fed = small_trained_federation()
    windows = fed.dataset.windows["test"][:2]
    targets, truth = A.collect_published(fed, windows)
    shape = truth[0].shape
    qf = A.queryfree_attack(targets, fed, shape, truth, budget_epochs=0,
                            steps=150, seed=3)
    wb = A.whitebox_attack(targets, fed.passives[0], shape, truth,
                           clip=fed.dp.clip, steps=150)
    assert qf.kind == "query-free"
    # an untrained surrogate cannot out-reconstruct the true prior
    assert qf.infoleak <= wb.infoleak + 0.05


def test_noise_reduces_whitebox_leakage():
    fed = small_trained_federation(dp=DpConfig(epsilon=math.inf, clip=1.0))
    windows = fed.dataset.windows["test"][:3]
    targets_clean, truth = A.collect_published(fed, windows)
    shape = truth[0].shape
    clean = A.whitebox_attack(targets_clean, fed.passives[0], shape, truth,
                              clip=1.0, steps=200)
    fed.dp = DpConfig(epsilon=2.0, delta=1e-4, clip=1.0)
    targets_noisy, _ = A.collect_published(
        fed, windows, noise_rng=np.random.default_rng(0))
    noisy = A.whitebox_attack(targets_noisy, fed.passives[0], shape, truth,
                              clip=1.0, steps=200)
    assert noisy.infoleak < clean.infoleak
