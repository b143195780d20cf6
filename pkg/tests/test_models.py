import numpy as np
import pytest

from fedcast import autodiff as ad
from fedcast.autodiff import Tape
from fedcast import models as M


def make_temporal(n_features=2, hidden=32, layers=2, seed=0):
    return M.TemporalStack(n_features, hidden, layers, rng=np.random.default_rng(seed))


def run_temporal(stack, window):
    tape = Tape()
    leaves = M.leaf_params(tape, stack.params, "p")
    return tape, leaves, stack.forward(tape, window, leaves)


def test_temporal_zero_weights_fixed_point():
    stack = make_temporal(n_features=1, hidden=4, layers=1)
    for name in stack.params:
        stack.params[name] = np.zeros_like(stack.params[name])
    _, _, h = run_temporal(stack, np.ones((3, 1, 1)))
    np.testing.assert_array_equal(h.values, np.zeros((3, 4)))


def test_temporal_shape_contract():
    stack = make_temporal(n_features=2, hidden=32)
    _, _, h = run_temporal(stack, np.random.default_rng(1).normal(size=(5, 12, 2)))
    assert h.shape == (5, 32)


def test_temporal_feature_mismatch_rejected():
    stack = make_temporal(n_features=2, hidden=8)
    with pytest.raises(ad.ShapeError, match="features"):
        run_temporal(stack, np.zeros((3, 4, 5)))


def test_temporal_embedding_gradient_matches_fd():
    stack = make_temporal(n_features=2, hidden=6, layers=2, seed=3)
    window = np.random.default_rng(4).uniform(-1, 1, size=(3, 5, 2))
    names = list(stack.params)

    def fn(tape, *tensors):
        leaves = dict(zip(names, tensors))
        return ad.sum_all(stack.forward(tape, window, leaves))

    res = ad.gradient_check(fn, [stack.params[n] for n in names])
    assert res.passed, res.failures[:5]
    assert res.max_rel_err <= 1e-4


@pytest.mark.parametrize("hidden", [32, 64, 128])
def test_shapes_hold_across_hidden_widths(hidden):
    stack = make_temporal(n_features=1, hidden=hidden, layers=1)
    _, _, h = run_temporal(stack, np.zeros((4, 3, 1)))
    assert h.shape == (4, hidden)


def coords(n, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, size=(n, 2))


def test_adjacency_rows_sum_to_one():
    adj = M.intra_adjacency(coords(7))
    np.testing.assert_allclose(adj.sum(axis=1), np.ones(7), atol=1e-9)


def test_spatial_passthrough_configuration():
    rng = np.random.default_rng(0)
    stack = M.SpatialStack(4, np.eye(3), n_layers=1, rng=rng, activation="linear")
    stack.params["spatial.layer0.w_self"] = np.zeros((4, 4))
    stack.params["spatial.layer0.w_skip"] = np.eye(4)
    h_in = rng.normal(size=(3, 4))
    tape = Tape()
    leaves = M.leaf_params(tape, stack.params, "p")
    out = stack.layer_forward(tape, tape.leaf(h_in), 0, leaves)
    np.testing.assert_allclose(out.values, h_in)


def test_spatial_permutation_equivariance():
    rng = np.random.default_rng(5)
    adj = np.array([[0.0, 1.0], [1.0, 0.0]])
    stack = M.SpatialStack(4, adj, n_layers=1, rng=rng)
    h_in = rng.normal(size=(2, 4))

    def run(a, h):
        stack.adjacency = a
        tape = Tape()
        leaves = M.leaf_params(tape, stack.params, "p")
        return stack.layer_forward(tape, tape.leaf(h), 0, leaves).values

    base = run(adj, h_in)
    swapped = run(adj[::-1, ::-1].copy(), h_in[::-1].copy())
    np.testing.assert_allclose(swapped, base[::-1])


def test_spatial_shape_contract():
    rng = np.random.default_rng(6)
    stack = M.SpatialStack(32, M.intra_adjacency(coords(5)), n_layers=2, rng=rng)
    tape = Tape()
    leaves = M.leaf_params(tape, stack.params, "p")
    out = stack.layer_forward(tape, tape.leaf(rng.normal(size=(5, 32))), 1, leaves)
    assert out.shape == (5, 32)


def test_multilevel_length_shapes_and_isolation():
    rng = np.random.default_rng(7)
    temporal = make_temporal(n_features=1, hidden=8, layers=1, seed=8)
    spatial = M.SpatialStack(8, M.intra_adjacency(coords(4)), n_layers=2, rng=rng,
                             prefix="spatial")
    window = rng.normal(size=(4, 6, 1))
    tape = Tape()
    leaves = M.leaf_params(tape, {**temporal.params, **spatial.params}, "passive-0")
    levels = M.multilevel(tape, temporal, spatial, window, leaves)
    assert len(levels) == 3
    for lv in levels:
        assert lv.shape == (4, 8)
    # passive forward is fusion-free: provenance only holds this party's leaves
    for lv in levels:
        assert all(lbl.startswith(("param:passive-0", "input:")) for lbl in lv.provenance)


def test_head_zero_weights_zero_prediction():
    rng = np.random.default_rng(9)
    head = M.PredictionHead(8, horizon=3, n_outputs=2, rng=rng)
    for name in head.params:
        head.params[name] = np.zeros_like(head.params[name])
    tape = Tape()
    leaves = M.leaf_params(tape, head.params, "p")
    out = head.forward(tape, tape.leaf(rng.normal(size=(5, 8))), leaves)
    np.testing.assert_array_equal(out.values, np.zeros((5, 6)))


def test_head_shape_contract():
    rng = np.random.default_rng(10)
    head = M.PredictionHead(64, horizon=12, n_outputs=2, rng=rng)
    tape = Tape()
    leaves = M.leaf_params(tape, head.params, "p")
    out = head.forward(tape, tape.leaf(rng.normal(size=(5, 64))), leaves)
    assert out.values.reshape(5, 12, 2).shape == (5, 12, 2)


def test_head_gradient_check():
    rng = np.random.default_rng(11)
    head = M.PredictionHead(4, horizon=2, n_outputs=1, rng=rng)
    h_final = rng.uniform(-1, 1, size=(3, 4))
    names = list(head.params)

    def fn(tape, *tensors):
        leaves = dict(zip(names, tensors))
        return ad.sum_all(ad.square(head.forward(tape, tape.leaf(h_final), leaves)))

    res = ad.gradient_check(fn, [head.params[n] for n in names])
    assert res.passed, res.failures[:5]
    assert res.max_rel_err <= 1e-4
