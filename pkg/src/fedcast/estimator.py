"""sklearn-style facade over the federated forecaster.

``FederatedForecaster`` wraps dataset preparation and protocol training
behind fit/predict/score with ``get_params``/``set_params`` from
:class:`sklearn.base.BaseEstimator`, so the model drops into pipelines,
grid search, and cross-validation tooling.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from fedcast.data import TimeSeriesPanel, build_dataset
from fedcast.protocol import Federation, FederationConfig, TrainSettings
from fedcast.vna import DpConfig


def check_panel(panel, role: Optional[str] = None) -> TimeSeriesPanel:
    if not isinstance(panel, TimeSeriesPanel):
        raise TypeError(f"expected a TimeSeriesPanel, got {type(panel).__name__}")
    if role and panel.role != role:
        raise ValueError(f"panel {panel.party_id!r} has role {panel.role!r}, expected {role!r}")
    if not np.isfinite(panel.coordinates).all():
        raise ValueError("panel coordinates must be finite")
    return panel


class FederatedForecaster(BaseEstimator):
    """Multi-party spatiotemporal forecaster trained by split learning.

    Parameters mirror the experiment config: model widths and depths, the
    k-nearest-neighbour fan-in, attention heads, publication privacy
    (``epsilon=None`` disables noise), and optimizer settings.
    """

    def __init__(self, hidden=32, temporal_layers=2, spatial_layers=2,
                 neighbors=5, heads=2, adaptive_rank=10, window=12, horizon=12,
                 epsilon=None, delta=1e-4, clip_bound=1.0, train_noise=True,
                 learning_rate=1e-3, weight_decay=1e-4, batch_size=32,
                 max_epochs=250, patience=25, predict_from_fused=True,
                 random_state=0):
        self.hidden = hidden
        self.temporal_layers = temporal_layers
        self.spatial_layers = spatial_layers
        self.neighbors = neighbors
        self.heads = heads
        self.adaptive_rank = adaptive_rank
        self.window = window
        self.horizon = horizon
        self.epsilon = epsilon
        self.delta = delta
        self.clip_bound = clip_bound
        self.train_noise = train_noise
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.predict_from_fused = predict_from_fused
        self.random_state = random_state

    def fit(self, active: TimeSeriesPanel, passives: Sequence[TimeSeriesPanel] = ()):
        """Prepare panels, build the federation, and train to early stopping."""
        check_panel(active, "active")
        passives = [check_panel(p, "passive") for p in passives]
        dataset = build_dataset(active, passives, window=self.window,
                                horizon=self.horizon)
        eps = math.inf if self.epsilon is None else float(self.epsilon)
        self.federation_ = Federation(
            dataset,
            FederationConfig(hidden=self.hidden,
                             temporal_layers=self.temporal_layers,
                             spatial_layers=self.spatial_layers,
                             neighbors=self.neighbors, heads=self.heads,
                             adaptive_rank=self.adaptive_rank,
                             predict_from_fused=self.predict_from_fused),
            DpConfig(epsilon=eps, delta=self.delta, clip=self.clip_bound,
                     train_noise=self.train_noise),
            seed=self.random_state,
        )
        self.history_ = self.federation_.train(TrainSettings(
            lr=self.learning_rate, weight_decay=self.weight_decay,
            batch_size=self.batch_size, max_epochs=self.max_epochs,
            patience=self.patience,
        ))
        return self

    def _check_fitted(self) -> Federation:
        if not hasattr(self, "federation_"):
            raise NotFittedError("FederatedForecaster is not fitted yet")
        return self.federation_

    def predict(self, split: str = "test") -> np.ndarray:
        """Forecasts in the raw data space, (n_windows, n_series, horizon, f_out)."""
        fed = self._check_fitted()
        ds = fed.dataset
        scaled = fed.predict_split(split)
        out_scaler = ds.active.scaler.slice_features(ds.active.panel.output_features)
        return out_scaler.inverse_transform(scaled)

    def evaluate(self, split: str = "test") -> dict:
        return self._check_fitted().evaluate(split)

    def score(self, split: str = "test") -> float:
        """Negative test MAE, so greater is better as sklearn expects."""
        return -self.evaluate(split)["MAE"]
