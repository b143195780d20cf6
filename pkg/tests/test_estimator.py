import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fedcast import FederatedForecaster, generate_synthetic
from fedcast.estimator import check_panel


def small_fit(**kw):
    a, p = generate_synthetic(0, 3, 4, 160, 2, 0.6)
    defaults = dict(hidden=8, temporal_layers=1, spatial_layers=2, neighbors=2,
                    heads=2, adaptive_rank=4, window=6, horizon=2,
                    batch_size=8, max_epochs=2, patience=5, random_state=0)
    defaults.update(kw)
    model = FederatedForecaster(**defaults)
    return model.fit(a, [p])


def test_get_params_round_trip():
    model = FederatedForecaster(hidden=16, epsilon=8.0)
    params = model.get_params()
    assert params["hidden"] == 16
    assert params["epsilon"] == 8.0
    cloned = clone(model)
    assert cloned.get_params() == params


def test_set_params_chains():
    model = FederatedForecaster().set_params(hidden=64, neighbors=3)
    assert model.hidden == 64 and model.neighbors == 3


def test_predict_before_fit_raises():
    with pytest.raises(NotFittedError):
        FederatedForecaster().predict()


def test_fit_predict_shapes_and_score():
    model = small_fit()
    preds = model.predict("test")
    n_windows = len(model.federation_.dataset.windows["test"])
    assert preds.shape == (n_windows, 3, 2, 1)
    assert np.isfinite(preds).all()
    assert model.score("test") == -model.evaluate("test")["MAE"]


def test_fit_validates_roles():
    a, p = generate_synthetic(0, 3, 4, 60, 2, 0.5)
    with pytest.raises(ValueError, match="role"):
        FederatedForecaster(window=6, horizon=2).fit(p, [a])


def test_check_panel_type_error():
    with pytest.raises(TypeError, match="TimeSeriesPanel"):
        check_panel(np.zeros((2, 3, 1)))


def test_local_only_fit_without_passives():
    a, _ = generate_synthetic(1, 3, 4, 160, 2, 0.5)
    model = FederatedForecaster(hidden=8, temporal_layers=1, spatial_layers=1,
                                window=6, horizon=2, batch_size=8, max_epochs=2,
                                patience=5)
    model.fit(a)
    assert "MAE" in model.evaluate("test")
