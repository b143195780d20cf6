"""fedcast: cross-silo federated spatiotemporal forecasting lab.

Geographically misaligned parties (an active party holding forecast targets
and passive parties holding related series) train a joint forecaster by
exchanging only small aligned representation matrices, optionally under
differential privacy. An attack harness quantifies how much of the passive
data those published matrices leak.
"""

from fedcast.data import PanelScaler, TimeSeriesPanel, generate_synthetic
from fedcast.estimator import FederatedForecaster
from fedcast.vna import DpConfig

__all__ = [
    "DpConfig",
    "FederatedForecaster",
    "PanelScaler",
    "TimeSeriesPanel",
    "generate_synthetic",
]

__version__ = "0.1.0"
