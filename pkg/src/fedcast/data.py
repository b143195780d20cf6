"""Panels of geo-distributed time series: synthesis, CSV ingestion, preprocessing.

A :class:`TimeSeriesPanel` is one party's data: values of shape
``(n_series, n_steps, n_features)`` plus planar coordinates per series.
The synthetic generator produces a pair of panels whose coupling is
controllable, standing in for real multi-source city datasets.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from fedcast.seeding import stream


class DataError(ValueError):
    """Malformed panel input (CSV defects, bad shapes, missing series)."""


@dataclass
class TimeSeriesPanel:
    """One party's geo-distributed multivariate time series."""

    party_id: str
    role: str                      # "active" | "passive"
    values: np.ndarray             # (n_series, n_steps, n_features)
    coordinates: np.ndarray        # (n_series, 2) planar x, y
    sampling_minutes: int = 30
    output_features: int = 0       # active party: how many leading features are targets

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.coordinates = np.asarray(self.coordinates, dtype=np.float64)
        if self.values.ndim != 3:
            raise DataError(f"panel values must be (series, steps, features), got {self.values.shape}")
        if self.coordinates.shape != (self.values.shape[0], 2):
            raise DataError(
                f"coordinates shape {self.coordinates.shape} does not match "
                f"{self.values.shape[0]} series"
            )
        if len(np.unique(self.coordinates, axis=0)) != self.coordinates.shape[0]:
            raise DataError("coordinates must be unique per series")

    @property
    def n_series(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    @property
    def n_features(self) -> int:
        return self.values.shape[2]


@dataclass
class GeoIndex:
    """Pairwise Euclidean distances from passive series to active series."""

    delta: np.ndarray              # (n_passive, n_active)
    k: int = 5


def distance_matrix(active_coords: np.ndarray, passive_coords: np.ndarray, k: int = 5) -> GeoIndex:
    """Distances Δ[i, j] between passive series i and active series j."""
    active_coords = np.asarray(active_coords, dtype=np.float64)
    passive_coords = np.asarray(passive_coords, dtype=np.float64)
    if not (np.isfinite(active_coords).all() and np.isfinite(passive_coords).all()):
        raise DataError("coordinates must be finite")
    # dx*dx + dy*dy keeps rounding identical to a scalar pairwise loop
    dx = passive_coords[:, None, 0] - active_coords[None, :, 0]
    dy = passive_coords[:, None, 1] - active_coords[None, :, 1]
    return GeoIndex(delta=np.sqrt(dx * dx + dy * dy), k=k)


class PanelScaler:
    """Per-feature standard scaler fitted on the training slice only.

    sklearn-style transformer: ``fit`` / ``transform`` / ``inverse_transform``
    over arrays whose last axis is the feature axis.
    """

    def __init__(self):
        self.mean_: Optional[np.ndarray] = None
        self.std_: Optional[np.ndarray] = None

    def fit(self, values: np.ndarray, y=None) -> "PanelScaler":
        flat = np.asarray(values, dtype=np.float64).reshape(-1, values.shape[-1])
        self.mean_ = flat.mean(axis=0)
        # degenerate features divide by the floor instead of zero
        self.std_ = np.maximum(flat.std(axis=0), 1e-8)
        return self

    def transform(self, values: np.ndarray) -> np.ndarray:
        if self.mean_ is None:
            raise RuntimeError("PanelScaler used before fit")
        return (values - self.mean_) / self.std_

    def fit_transform(self, values: np.ndarray, y=None) -> np.ndarray:
        return self.fit(values).transform(values)

    def inverse_transform(self, values: np.ndarray) -> np.ndarray:
        if self.mean_ is None:
            raise RuntimeError("PanelScaler used before fit")
        return values * self.std_ + self.mean_

    def slice_features(self, count: int) -> "PanelScaler":
        """Scaler restricted to the leading ``count`` features (target columns)."""
        out = PanelScaler()
        out.mean_ = self.mean_[:count].copy()
        out.std_ = self.std_[:count].copy()
        return out

    def to_dict(self) -> dict:
        return {"mean": self.mean_.tolist(), "std": self.std_.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PanelScaler":
        out = cls()
        out.mean_ = np.asarray(d["mean"], dtype=np.float64)
        out.std_ = np.asarray(d["std"], dtype=np.float64)
        return out


@dataclass
class PreparedPanel:
    """Panel after interpolation, chronological split, and scaling."""

    panel: TimeSeriesPanel
    scaled: np.ndarray             # same shape as panel.values, z-scored
    scaler: PanelScaler
    split_bounds: tuple[int, int]  # (train_end, valid_end); test runs to n_steps

    def split_range(self, split: str) -> tuple[int, int]:
        train_end, valid_end = self.split_bounds
        ranges = {"train": (0, train_end), "valid": (train_end, valid_end),
                  "test": (valid_end, self.panel.n_steps)}
        if split not in ranges:
            raise ValueError(f"unknown split {split!r}")
        return ranges[split]


def _interpolate_series(series: np.ndarray, series_id: str) -> np.ndarray:
    # series: (n_steps, n_features); NaNs filled by linear interpolation per feature
    out = series.copy()
    steps = np.arange(series.shape[0], dtype=np.float64)
    for f in range(series.shape[1]):
        col = out[:, f]
        good = np.isfinite(col)
        if not good.any():
            raise DataError(f"series {series_id!r}: feature {f} entirely missing")
        if not good.all():
            out[:, f] = np.interp(steps, steps[good], col[good])
    return out


def preprocess(panel: TimeSeriesPanel, ratios: tuple[int, int, int] = (8, 1, 1)) -> PreparedPanel:
    """Interpolate missing values, split chronologically, z-score on the train slice."""
    values = np.empty_like(panel.values)
    for i in range(panel.n_series):
        values[i] = _interpolate_series(panel.values[i], str(i))
    total = sum(ratios)
    train_end = panel.n_steps * ratios[0] // total
    valid_end = panel.n_steps * (ratios[0] + ratios[1]) // total
    scaler = PanelScaler().fit(values[:, :train_end, :])
    scaled = scaler.transform(values)
    clean = replace(panel, values=values)
    return PreparedPanel(panel=clean, scaled=scaled, scaler=scaler,
                         split_bounds=(train_end, valid_end))


# ---------------------------------------------------------------------------
# synthetic multi-source generator
# ---------------------------------------------------------------------------

def _latent_factors(rng, n_factors: int, n_steps: int) -> np.ndarray:
    """Smooth, partly unpredictable factor signals (seasonal + AR(1) drift)."""
    t = np.arange(n_steps)
    period = rng.uniform(24, 64, size=n_factors)
    phase = rng.uniform(0, 2 * math.pi, size=n_factors)
    seasonal = np.sin(2 * math.pi * t[None, :] / period[:, None] + phase[:, None])
    drift = np.empty((n_factors, n_steps))
    innov = rng.normal(0.0, 1.0, size=(n_factors, n_steps))
    drift[:, 0] = innov[:, 0]
    phi = 0.97
    scale = math.sqrt(1 - phi * phi)
    for s in range(1, n_steps):
        drift[:, s] = phi * drift[:, s - 1] + scale * innov[:, s]
    return 0.6 * seasonal + 0.8 * drift


def _field_weights(coords: np.ndarray, anchors: np.ndarray, width: float) -> np.ndarray:
    d2 = ((coords[:, None, :] - anchors[None, :, :]) ** 2).sum(axis=2)
    w = np.exp(-d2 / (2 * width * width))
    return w / np.maximum(w.sum(axis=1, keepdims=True), 1e-12)


def generate_synthetic(
    seed: int,
    n_active: int,
    n_passive: int,
    n_steps: int,
    horizon: int,
    coupling: float,
    n_features_active: int = 1,
    n_features_passive: int = 1,
    n_output_features: int = 1,
    passive_rate_factor: int = 1,
    active_noise: float = 0.4,
    passive_noise: float = 0.05,
    coordinate_shift: float = 0.1,
    field_lag: int = 0,
) -> tuple[TimeSeriesPanel, TimeSeriesPanel]:
    """Two coupled panels over one planar region.

    Passive series observe a smooth latent factor field at their own
    coordinates (nearly clean). Each active series mixes its own AR process
    with the factor field sampled at its (shifted) coordinates, weighted by
    ``coupling``; coupling 0 makes the panels statistically independent.
    ``field_lag`` delays the active party's response to the field, so the
    passive party observes the active party's near-future driver (the
    taxi-leads-bike style of cross-domain coupling). The passive panel may
    run at a finer sampling rate so both cover the same wall-clock span.
    """
    if n_active < 2 or n_passive < 2:
        raise DataError("need at least 2 series per party")
    if n_steps <= horizon:
        raise DataError(f"n_steps {n_steps} must exceed horizon {horizon}")
    if not 0.0 <= coupling <= 1.0:
        raise DataError(f"coupling must be in [0, 1], got {coupling}")
    if n_output_features > n_features_active:
        raise DataError("output features cannot exceed active feature count")
    rng = stream(seed, "data")

    active_coords = rng.uniform(0, 1, size=(n_active, 2))
    passive_coords = rng.uniform(0, 1, size=(n_passive, 2))
    n_factors = max(4, n_passive // 2)
    anchors = rng.uniform(0, 1, size=(n_factors, 2))
    width = 0.35

    steps_passive = n_steps * passive_rate_factor
    passive_values = np.empty((n_passive, steps_passive, n_features_passive))
    active_values = np.empty((n_active, n_steps, n_features_active))

    w_passive = _field_weights(passive_coords, anchors, width)
    w_active = _field_weights(active_coords + coordinate_shift, anchors, width)

    for f in range(max(n_features_active, n_features_passive)):
        factors_fine = _latent_factors(rng, n_factors, steps_passive)
        # active party samples the same field at its coarser rate
        factors_coarse = factors_fine[:, ::passive_rate_factor]
        if f < n_features_passive:
            field_p = w_passive @ factors_fine
            passive_values[:, :, f] = field_p + rng.normal(0, passive_noise, size=field_p.shape)
        if f < n_features_active:
            if field_lag:
                lagged = np.empty_like(factors_coarse)
                lagged[:, field_lag:] = factors_coarse[:, :-field_lag]
                lagged[:, :field_lag] = factors_coarse[:, :1]
            else:
                lagged = factors_coarse
            field_a = w_active @ lagged
            own = np.empty((n_active, n_steps))
            innov = rng.normal(0, 1, size=(n_active, n_steps))
            own[:, 0] = innov[:, 0]
            for s in range(1, n_steps):
                own[:, s] = 0.8 * own[:, s - 1] + 0.6 * innov[:, s]
            signal = coupling * field_a + (1 - coupling) * own
            active_values[:, :, f] = signal + rng.normal(0, active_noise, size=signal.shape)

    active = TimeSeriesPanel(
        party_id="active", role="active", values=active_values,
        coordinates=active_coords, sampling_minutes=30,
        output_features=n_output_features,
    )
    passive = TimeSeriesPanel(
        party_id="passive-0", role="passive", values=passive_values,
        coordinates=passive_coords, sampling_minutes=30 // passive_rate_factor,
    )
    return active, passive


# ---------------------------------------------------------------------------
# CSV interchange: series file + locations file per party
# ---------------------------------------------------------------------------

def save_csv(panel: TimeSeriesPanel, series_path, locations_path) -> None:
    """Write the interchange pair: series rows and one location row per series."""
    with open(series_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["series_id", "timestamp"] +
                        [f"feat_{i + 1}" for i in range(panel.n_features)])
        for i in range(panel.n_series):
            for t in range(panel.n_steps):
                ts = t * panel.sampling_minutes
                writer.writerow([f"s{i}", ts] + [repr(float(v)) for v in panel.values[i, t]])
    with open(locations_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["series_id", "x", "y"])
        for i in range(panel.n_series):
            writer.writerow([f"s{i}", repr(float(panel.coordinates[i, 0])),
                             repr(float(panel.coordinates[i, 1]))])


def load_csv(
    series_path,
    locations_path,
    party_id: str = "party",
    role: str = "active",
    sampling_minutes: Optional[int] = None,
    output_features: int = 0,
) -> TimeSeriesPanel:
    """Assemble a panel from the CSV pair, validating timestamps and shapes."""
    rows: dict[str, list[tuple[int, list[float]]]] = {}
    n_feats: Optional[int] = None
    with open(series_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["series_id", "timestamp"]:
            raise DataError(f"{series_path}: expected header series_id,timestamp,feat_1,...")
        expected = len(header) - 2
        for line_no, row in enumerate(reader, start=2):
            if len(row) - 2 != expected:
                raise DataError(
                    f"{series_path}:{line_no}: ragged feature count "
                    f"({len(row) - 2} values, expected {expected})"
                )
            sid, ts = row[0], int(row[1])
            feats = []
            for v in row[2:]:
                v = v.strip()
                feats.append(math.nan if v in ("", "nan", "NaN") else float(v))
            rows.setdefault(sid, []).append((ts, feats))
        n_feats = expected

    coords: dict[str, tuple[float, float]] = {}
    with open(locations_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header != ["series_id", "x", "y"]:
            raise DataError(f"{locations_path}: expected header series_id,x,y")
        for row in reader:
            if row[0] in coords:
                raise DataError(f"{locations_path}: duplicate series_id {row[0]!r}")
            coords[row[0]] = (float(row[1]), float(row[2]))

    unknown = set(coords) - set(rows)
    if unknown:
        raise DataError(f"location rows for unknown series_id: {sorted(unknown)}")
    missing = set(rows) - set(coords)
    if missing:
        raise DataError(f"missing location row for series_id: {sorted(missing)}")

    series_ids = sorted(rows)
    lengths = {len(rows[sid]) for sid in series_ids}
    if len(lengths) != 1:
        raise DataError(f"series lengths differ: {sorted(lengths)}")

    # validate timestamps: strictly increasing, uniform spacing per declared rate
    first = rows[series_ids[0]]
    rate = sampling_minutes
    if rate is None:
        if len(first) < 2:
            raise DataError("cannot infer sampling rate from a single step")
        rate = first[1][0] - first[0][0]
        if rate <= 0:
            raise DataError(f"non-monotone timestamps: {first[1][0]} after {first[0][0]}")
    for sid in series_ids:
        stamps = [ts for ts, _ in rows[sid]]
        for prev, cur in zip(stamps, stamps[1:]):
            if cur <= prev:
                raise DataError(f"series {sid!r}: non-monotone timestamp {cur}")
            if cur - prev != rate:
                raise DataError(
                    f"series {sid!r}: gap at timestamp {cur} "
                    f"(expected spacing {rate} minutes)"
                )

    n_steps = len(first)
    values = np.empty((len(series_ids), n_steps, n_feats))
    for i, sid in enumerate(series_ids):
        for t, (_, feats) in enumerate(rows[sid]):
            values[i, t] = feats
    coordinates = np.array([coords[sid] for sid in series_ids])
    return TimeSeriesPanel(
        party_id=party_id, role=role, values=values, coordinates=coordinates,
        sampling_minutes=int(rate), output_features=output_features,
    )


# ---------------------------------------------------------------------------
# windowing: aligned (history, horizon) samples across parties
# ---------------------------------------------------------------------------

@dataclass
class FederatedDataset:
    """Prepared panels plus aligned window start indices per split."""

    active: PreparedPanel
    passives: list[PreparedPanel]
    window: int                    # active history steps per sample
    horizon: int                   # future steps to predict
    windows: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def rate_factors(self) -> list[int]:
        out = []
        for p in self.passives:
            factor = self.active.panel.sampling_minutes / p.panel.sampling_minutes
            if factor != int(factor) or factor < 1:
                raise DataError(
                    f"passive sampling rate {p.panel.sampling_minutes} must divide "
                    f"active rate {self.active.panel.sampling_minutes}"
                )
            out.append(int(factor))
        return out

    def active_window(self, start: int) -> np.ndarray:
        return self.scaled_window(self.active, start, self.window, 1)

    def passive_window(self, idx: int, start: int) -> np.ndarray:
        return self.scaled_window(self.passives[idx], start, self.window, self.rate_factors[idx])

    @staticmethod
    def scaled_window(prepared: PreparedPanel, start: int, window: int, factor: int) -> np.ndarray:
        return prepared.scaled[:, start * factor:(start + window) * factor, :]

    def labels(self, start: int) -> np.ndarray:
        """Scaled future values of the active target features, (n_series, horizon, f_out)."""
        f_out = self.active.panel.output_features
        end = start + self.window
        return self.active.scaled[:, end:end + self.horizon, :f_out]

    def raw_labels(self, start: int) -> np.ndarray:
        f_out = self.active.panel.output_features
        end = start + self.window
        return self.active.panel.values[:, end:end + self.horizon, :f_out]


def build_dataset(
    active: TimeSeriesPanel,
    passives: Sequence[TimeSeriesPanel],
    window: int,
    horizon: int,
    stride: int = 1,
) -> FederatedDataset:
    """Preprocess all panels and enumerate aligned windows inside each split."""
    if active.output_features < 1:
        raise DataError("active panel must declare at least one output feature")
    prepared_active = preprocess(active)
    prepared_passives = [preprocess(p) for p in passives]
    ds = FederatedDataset(active=prepared_active, passives=prepared_passives,
                          window=window, horizon=horizon)
    factors = ds.rate_factors
    for p, f in zip(prepared_passives, factors):
        if p.panel.n_steps != active.n_steps * f:
            raise DataError(
                f"passive panel {p.panel.party_id!r} covers a different wall-clock span "
                f"({p.panel.n_steps} steps at factor {f} vs {active.n_steps} active steps)"
            )
    for split in ("train", "valid", "test"):
        lo, hi = prepared_active.split_range(split)
        starts = [s for s in range(lo, hi - window - horizon + 1, stride)]
        ds.windows[split] = np.array(starts, dtype=int)
    if len(ds.windows["train"]) == 0:
        raise DataError("train split too short for the requested window/horizon")
    return ds
