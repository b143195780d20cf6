import math

import numpy as np
import pytest

from fedcast import autodiff as ad
from fedcast.autodiff import Tape
from fedcast import data as D
from fedcast import protocol as P
from fedcast.vna import DpConfig


def tiny_dataset(seed=0, n_active=3, n_passive=4, steps=120, window=6, horizon=2,
                 coupling=0.6, n_passives=1):
    a, p = D.generate_synthetic(seed, n_active, n_passive, steps, horizon, coupling)
    passives = []
    for j in range(n_passives):
        pj = D.TimeSeriesPanel(party_id=f"passive-{j}", role="passive",
                               values=p.values, coordinates=p.coordinates + 0.01 * j,
                               sampling_minutes=p.sampling_minutes)
        passives.append(pj)
    return D.build_dataset(a, passives, window=window, horizon=horizon)


def make_federation(dataset=None, hidden=8, spatial_layers=2, dp=None, seed=0, **kw):
    dataset = dataset or tiny_dataset()
    cfg = P.FederationConfig(hidden=hidden, temporal_layers=1,
                             spatial_layers=spatial_layers, neighbors=2, heads=2,
                             adaptive_rank=4, **kw)
    return P.Federation(dataset, cfg, dp or DpConfig(), seed=seed)


# -- wiring -------------------------------------------------------------------

def test_wire_levels_two_layers():
    plan = P.wire_levels(2)
    assert plan.n_levels == 2
    assert plan.levels == [(0, 1), (1, 2)]


def test_wire_levels_single_layer():
    assert P.wire_levels(1).levels == [(0, 1)]


def test_wire_levels_rejects_zero():
    with pytest.raises(ValueError):
        P.wire_levels(0)


# -- transcript accounting ------------------------------------------------------

def test_forward_transcript_value_accounting():
    ds = tiny_dataset(n_active=5, steps=200, window=6, horizon=2)
    fed = make_federation(ds, hidden=32)
    fed.forward_round([int(ds.windows["train"][0])])
    fwd = fed.transcript.forward_messages()
    assert len(fwd) == 2                      # L = M_s = 2 levels
    assert all(m.value_count == 160 for m in fwd)   # 5 * 32
    report = P.audit(fed.transcript)
    assert report.forward_values == 320
    assert report.expected_values_per_window == 320


def test_two_passive_parties_double_messages():
    ds = tiny_dataset(n_passives=2)
    fed = make_federation(ds, hidden=8)
    fed.forward_round([int(ds.windows["train"][0])])
    assert len(fed.transcript.forward_messages()) == 4


def test_message_bijection_after_backward():
    ds = tiny_dataset()
    fed = make_federation(ds)
    batch = [int(w) for w in ds.windows["train"][:2]]
    fed.forward_round(batch)
    opts = [P.Adam(p.params) for p in fed.passives]
    fed.backward_round([ds.labels(w) for w in batch], P.Adam(fed.active.params), opts)
    report = P.audit(fed.transcript)
    assert report.ok, report.violations
    assert report.n_forward == report.n_backward == 4   # 2 windows x 2 levels


def test_conservation_checker_flags_missing_backward():
    ds = tiny_dataset()
    fed = make_federation(ds)
    fed.forward_round([int(ds.windows["train"][0])])
    problems = P.check_message_conservation(fed.transcript.messages)
    assert problems and "missing backward" in problems[0]


def test_payload_shape_mismatch_aborts():
    ds = tiny_dataset()
    fed = make_federation(ds)
    original = fed.dataset.active.panel.values.shape[0]
    fed.transcript.n_active = original  # declared
    # sabotage one generator so its output width disagrees with the declaration
    gen = fed.passives[0].generators[0]
    for name in list(gen.params):
        if name.endswith("dis.w"):
            gen.params[name] = np.zeros((8, 8))
    fed.passives[0].params.update(gen.params)
    fed.transcript.hidden = 99
    fed.forward_round([int(ds.windows["train"][0])])
    assert fed.transcript.violations


# -- gates and local equivalence ----------------------------------------------

def saturate_gates(fed, high=True):
    for gate in fed.active.gates.values():
        for name in gate.params:
            if name.endswith(".b"):
                gate.params[name][...] = 100.0 if high else -100.0
            else:
                gate.params[name][...] = 0.0
    for gate in fed.active.gates.values():
        fed.active.params.update(gate.params)


def test_saturated_gates_reproduce_local_prediction_exactly():
    ds = tiny_dataset()
    fed = make_federation(ds, seed=3)
    saturate_gates(fed, high=True)
    local_ds = D.FederatedDataset(active=ds.active, passives=[], window=ds.window,
                                  horizon=ds.horizon, windows=ds.windows)
    local = make_federation(local_ds, seed=3)
    w = int(ds.windows["train"][0])
    pred_fed = fed.forward_round([w], log=False)
    pred_local = local.forward_round([w], log=False)
    np.testing.assert_array_equal(pred_fed, pred_local)


def test_local_only_mode_runs_without_passives():
    ds = tiny_dataset()
    local_ds = D.FederatedDataset(active=ds.active, passives=[], window=ds.window,
                                  horizon=ds.horizon, windows=ds.windows)
    fed = make_federation(local_ds)
    history = fed.train(P.TrainSettings(batch_size=8, max_epochs=2, patience=5))
    assert len(history["train_loss"]) == 2
    assert P.audit(fed.transcript).ok


# -- losses and gradients -------------------------------------------------------

def test_zero_loss_zero_gradients_when_predictions_match_labels():
    ds = tiny_dataset()
    fed = make_federation(ds)
    w = int(ds.windows["train"][0])
    preds = fed.forward_round([w], log=False)
    fed.round = None
    # overwrite the labels with the model's own prediction
    n_out = ds.active.panel.output_features
    target = preds[0].reshape(ds.active.panel.n_series, ds.horizon, n_out)
    end = w + ds.window
    ds.active.scaled[:, end:end + ds.horizon, :n_out] = target
    loss, active_grads, passive_grads = fed.loss_and_grads([w])
    assert loss == 0.0
    assert all(np.all(g == 0.0) for g in active_grads.values())
    assert all(np.all(g == 0.0) for g in passive_grads[0].values())


def test_mae_subgradient_scale():
    tape = Tape()
    pred = tape.leaf(np.array([[2.0, 3.0]]))
    loss = ad.mean_abs_error(pred, np.array([[1.0, 5.0]]))
    grads = tape.backward(loss)
    np.testing.assert_allclose(tape.grad(grads, pred), [[0.5, -0.5]])


def protocol_fd_check(fed, batch, coords_per_array=3, step=1e-4, seed=0):
    """Sampled central differences of the batch loss vs protocol gradients.

    Coordinates whose one-sided slopes disagree (relu/abs kinks crossed by the
    perturbation) are excluded, mirroring the per-op gradient checker.
    """
    base, active_grads, passive_grads = fed.loss_and_grads(batch)
    rng = np.random.default_rng(seed)
    checked, excluded, worst = 0, 0, 0.0
    party_grads = [(fed.active.params, active_grads)] + [
        (p.params, g) for p, g in zip(fed.passives, passive_grads)]
    for params, grads in party_grads:
        for name, arr in params.items():
            flat = arr.reshape(-1)
            for idx in rng.choice(flat.size, size=min(coords_per_array, flat.size),
                                  replace=False):
                old = flat[idx]
                flat[idx] = old + step
                up, _, _ = fed.loss_and_grads(batch)
                flat[idx] = old - step
                down, _, _ = fed.loss_and_grads(batch)
                flat[idx] = old
                right = (up - base) / step
                left = (base - down) / step
                if abs(right - left) > 0.05 * max(abs(right), abs(left), 1e-3):
                    excluded += 1
                    continue
                fd = (up - down) / (2 * step)
                an = grads[name].reshape(-1)[idx]
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-3))
                checked += 1
    return checked, excluded, worst


def test_end_to_end_gradient_matches_finite_differences():
    # tiny instance, noise off, clip inert
    ds = tiny_dataset(n_active=3, n_passive=4, steps=120, window=6)
    fed = make_federation(ds, hidden=8, dp=DpConfig(epsilon=math.inf, clip=50.0))
    batch = [int(ds.windows["train"][0])]
    checked, excluded, worst = protocol_fd_check(fed, batch)
    assert checked > 50
    assert excluded < checked // 4
    assert worst <= 1e-3, worst


# -- training loop ---------------------------------------------------------------

def test_training_deterministic_across_runs():
    curves = []
    for _ in range(2):
        ds = tiny_dataset(seed=5)
        fed = make_federation(ds, seed=5)
        history = fed.train(P.TrainSettings(batch_size=8, max_epochs=2, patience=10))
        curves.append(history["train_loss"])
    assert curves[0] == curves[1]


def test_training_improves_validation():
    ds = tiny_dataset(seed=2, steps=240)
    fed = make_federation(ds, seed=2)
    history = fed.train(P.TrainSettings(batch_size=8, max_epochs=6, patience=10))
    assert history["valid_mae"][-1] < history["valid_mae"][0] * 1.2
    assert history["best_epoch"] >= 0


def test_divergence_aborts_with_location():
    ds = tiny_dataset()
    fed = make_federation(ds)
    fed.active.params["head.w2"][...] = np.nan
    with pytest.raises(P.TrainingDiverged, match="epoch 0"):
        fed.train(P.TrainSettings(batch_size=4, max_epochs=1, patience=5))


def test_dp_path_inert_when_epsilon_infinite():
    ds = tiny_dataset()
    fed = make_federation(ds, dp=DpConfig(epsilon=math.inf, clip=1e6), seed=9)
    w = int(ds.windows["train"][0])
    out1 = fed.forward_round([w], log=False)
    for p in fed.passives:
        p.dp_rng = np.random.default_rng(12345)  # different noise stream
    out2 = fed.forward_round([w], log=False)
    np.testing.assert_array_equal(out1, out2)


def test_noise_changes_forward_when_epsilon_finite():
    ds = tiny_dataset()
    fed = make_federation(ds, dp=DpConfig(epsilon=8.0, delta=1e-4, clip=1.0), seed=9)
    w = int(ds.windows["train"][0])
    out1 = fed.forward_round([w], log=False)
    out2 = fed.forward_round([w], log=False)
    assert not np.array_equal(out1, out2)


# -- metrics ---------------------------------------------------------------------

def test_metric_hand_values():
    m = P.metrics(np.array([1.0, 2.0]), np.array([2.0, 4.0]))
    assert m["MAE"] == pytest.approx(1.5)
    assert m["RMSE"] == pytest.approx(math.sqrt(2.5))


def test_smape_hand_value():
    m = P.metrics(np.array([100.0]), np.array([110.0]))
    assert m["SMAPE"] == pytest.approx(10.0 / 105.0)


def test_perfect_prediction_all_metrics_zero():
    m = P.metrics(np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.0, 3.0]))
    assert m == {"MAE": 0.0, "RMSE": 0.0, "SMAPE": 0.0}


def test_smape_zero_denominator_contributes_zero():
    m = P.metrics(np.array([0.0, 1.0]), np.array([0.0, 1.0]))
    assert m["SMAPE"] == 0.0


# -- audit: parameter isolation ----------------------------------------------------

def test_standard_run_has_zero_violations():
    ds = tiny_dataset()
    fed = make_federation(ds)
    fed.train(P.TrainSettings(batch_size=8, max_epochs=1, patience=5))
    report = P.audit(fed.transcript)
    assert report.ok, report.violations


def test_injected_raw_features_are_flagged():
    ds = tiny_dataset(n_active=3, n_passive=4, steps=120, window=8)
    fed = make_federation(ds, hidden=8)
    w = int(ds.windows["train"][0])
    fed.forward_round([w])
    # adversarial fixture: a payload built verbatim from the passive raw window
    raw = fed.dataset.passive_window(0, w)
    n_active, hidden = 3, 8
    payload = raw.reshape(-1)[:n_active * hidden].reshape(n_active, hidden)
    fed.transcript.record("forward-vn", 0, "passive-0", "active", w, fed._step,
                          "train", payload, "leaf", fed.registry.forbidden)
    report = P.audit(fed.transcript)
    assert not report.ok
    assert any("forbidden" in v or "leaf" in v for v in report.violations)


def test_payloads_never_match_parameter_bytes_during_training():
    ds = tiny_dataset()
    fed = make_federation(ds)
    fed.train(P.TrainSettings(batch_size=8, max_epochs=1, patience=5))
    assert not [v for v in fed.transcript.violations if "forbidden" in v]


# -- transcript serialization -----------------------------------------------------

def test_transcript_round_trip(tmp_path):
    ds = tiny_dataset()
    fed = make_federation(ds)
    fed.forward_round([int(ds.windows["train"][0])])
    path = tmp_path / "transcript.json"
    fed.transcript.save(path)
    loaded = P.Transcript.load(path)
    assert len(loaded.messages) == len(fed.transcript.messages)
    assert loaded.messages[0].sha256 == fed.transcript.messages[0].sha256
    # accounting violations are reproducible from the file alone
    report = P.audit(loaded)
    assert report.forward_values == P.audit(fed.transcript).forward_values
