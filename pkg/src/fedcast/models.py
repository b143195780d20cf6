"""Per-party private models: temporal recurrent stack + spatial diffusion stack.

Each party embeds its raw window per time step, runs stacked gated recurrent
cells left-to-right, and takes the final-step hidden state per series as the
temporal representation (n_series x hidden). Spatial layers then diffuse over
a row-normalized intra-client adjacency. The active party additionally owns a
two-layer perceptron head that maps its final representation to the forecast.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from fedcast import autodiff as ad
from fedcast.autodiff import Tape, Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def intra_adjacency(coordinates: np.ndarray, threshold: float = 0.1) -> np.ndarray:
    """Gaussian-kernel sensor graph: bandwidth = median pairwise distance,
    small weights dropped, rows normalized to sum to 1."""
    n = coordinates.shape[0]
    if n == 1:
        return np.ones((1, 1))
    dx = coordinates[:, None, 0] - coordinates[None, :, 0]
    dy = coordinates[:, None, 1] - coordinates[None, :, 1]
    dist = np.sqrt(dx * dx + dy * dy)
    off_diag = dist[~np.eye(n, dtype=bool)]
    bandwidth = max(float(np.median(off_diag)), 1e-12)
    weights = np.exp(-((dist / bandwidth) ** 2))
    weights[weights < threshold] = 0.0
    return weights / weights.sum(axis=1, keepdims=True)


class TemporalStack:
    """Embedding layer plus stacked gated recurrent cells, one model per party."""

    def __init__(self, n_features: int, hidden: int, n_layers: int = 2, *,
                 rng: np.random.Generator, prefix: str = "temporal"):
        self.n_features = n_features
        self.hidden = hidden
        self.n_layers = n_layers
        self.prefix = prefix
        h = hidden
        self.params: dict[str, np.ndarray] = {
            f"{prefix}.embed.w": uniform_init(rng, (n_features, h), n_features),
            f"{prefix}.embed.b": np.zeros((1, h)),
        }
        for m in range(n_layers):
            in_dim = h
            self.params[f"{prefix}.cell{m}.w_ih"] = uniform_init(rng, (in_dim, 3 * h), in_dim)
            self.params[f"{prefix}.cell{m}.w_hh"] = uniform_init(rng, (h, 3 * h), h)
            self.params[f"{prefix}.cell{m}.b_ih"] = np.zeros((1, 3 * h))
            self.params[f"{prefix}.cell{m}.b_hh"] = np.zeros((1, 3 * h))

    def forward(self, tape: Tape, window: np.ndarray, leaves: dict[str, Tensor],
                input_leaf: Optional[Tensor] = None) -> Tensor:
        """window: (n_series, n_steps, n_features) -> temporal representation (n_series, hidden).

        ``input_leaf`` (rows = time-major flattened window) lets callers make
        the raw input differentiable, e.g. for reconstruction attacks.
        """
        n, t_steps, f = window.shape
        if f != self.n_features:
            raise ad.ShapeError(
                f"temporal stack expects {self.n_features} features, window has {f}"
            )
        h = self.hidden
        p = self.prefix
        if input_leaf is None:
            flat = window.transpose(1, 0, 2).reshape(t_steps * n, f)  # time-major rows
            x = tape.leaf(flat, label="input:window", requires_grad=False)
        else:
            x = input_leaf
        emb = ad.add(ad.matmul(x, leaves[f"{p}.embed.w"]), leaves[f"{p}.embed.b"])
        steps = [ad.slice2d(emb, (t * n, (t + 1) * n)) for t in range(t_steps)]
        for m in range(self.n_layers):
            w_ih, w_hh = leaves[f"{p}.cell{m}.w_ih"], leaves[f"{p}.cell{m}.w_hh"]
            b_ih, b_hh = leaves[f"{p}.cell{m}.b_ih"], leaves[f"{p}.cell{m}.b_hh"]
            state = tape.constant(np.zeros((n, h)))
            outputs = []
            for x_t in steps:
                gi = ad.add(ad.matmul(x_t, w_ih), b_ih)
                gh = ad.add(ad.matmul(state, w_hh), b_hh)
                r = ad.sigmoid(ad.add(ad.slice2d(gi, (0, n), (0, h)),
                                      ad.slice2d(gh, (0, n), (0, h))))
                z = ad.sigmoid(ad.add(ad.slice2d(gi, (0, n), (h, 2 * h)),
                                      ad.slice2d(gh, (0, n), (h, 2 * h))))
                cand = ad.tanh(ad.add(ad.slice2d(gi, (0, n), (2 * h, 3 * h)),
                                      ad.mul(r, ad.slice2d(gh, (0, n), (2 * h, 3 * h)))))
                state = ad.add(ad.sub(cand, ad.mul(z, cand)), ad.mul(z, state))
                outputs.append(state)
            steps = outputs
        return steps[-1]


class SpatialStack:
    """Stacked one-hop diffusion layers over the intra-client graph.

    Each layer computes act(A @ h @ w_self + h @ w_skip + b) with the party's
    fixed row-normalized adjacency A.
    """

    def __init__(self, hidden: int, adjacency: np.ndarray, n_layers: int = 2, *,
                 rng: np.random.Generator, prefix: str = "spatial",
                 activation: str = "relu"):
        if not np.allclose(adjacency.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("adjacency rows must sum to 1")
        self.hidden = hidden
        self.adjacency = adjacency
        self.n_layers = n_layers
        self.prefix = prefix
        self.activation = activation
        self.params: dict[str, np.ndarray] = {}
        for m in range(n_layers):
            self.params[f"{prefix}.layer{m}.w_self"] = uniform_init(rng, (hidden, hidden), hidden)
            self.params[f"{prefix}.layer{m}.w_skip"] = uniform_init(rng, (hidden, hidden), hidden)
            self.params[f"{prefix}.layer{m}.b"] = np.zeros((1, hidden))

    def layer_forward(self, tape: Tape, h_in: Tensor, m: int, leaves: dict[str, Tensor],
                      adjacency: Optional[np.ndarray] = None) -> Tensor:
        """One diffusion step; ``adjacency`` overrides the party graph, e.g.
        with a block-diagonal copy when windows are stacked into one batch."""
        p = self.prefix
        adj = tape.constant(self.adjacency if adjacency is None else adjacency)
        mixed = ad.matmul(ad.matmul(adj, h_in), leaves[f"{p}.layer{m}.w_self"])
        skipped = ad.matmul(h_in, leaves[f"{p}.layer{m}.w_skip"])
        pre = ad.add(ad.add(mixed, skipped), leaves[f"{p}.layer{m}.b"])
        if self.activation == "relu":
            return ad.relu(pre)
        if self.activation == "tanh":
            return ad.tanh(pre)
        return pre  # linear


class PredictionHead:
    """Two-layer perceptron from the final representation to the forecast."""

    def __init__(self, hidden: int, horizon: int, n_outputs: int, *,
                 rng: np.random.Generator, prefix: str = "head"):
        self.horizon = horizon
        self.n_outputs = n_outputs
        self.prefix = prefix
        out = horizon * n_outputs
        self.params: dict[str, np.ndarray] = {
            f"{prefix}.w1": uniform_init(rng, (hidden, hidden), hidden),
            f"{prefix}.b1": np.zeros((1, hidden)),
            f"{prefix}.w2": uniform_init(rng, (hidden, out), hidden),
            f"{prefix}.b2": np.zeros((1, out)),
        }

    def forward(self, tape: Tape, h_final: Tensor, leaves: dict[str, Tensor]) -> Tensor:
        p = self.prefix
        hid = ad.relu(ad.add(ad.matmul(h_final, leaves[f"{p}.w1"]), leaves[f"{p}.b1"]))
        return ad.add(ad.matmul(hid, leaves[f"{p}.w2"]), leaves[f"{p}.b2"])


def multilevel(tape: Tape, temporal: TemporalStack, spatial: SpatialStack,
               window: np.ndarray, leaves: dict[str, Tensor],
               input_leaf: Optional[Tensor] = None) -> list[Tensor]:
    """Fusion-free multi-level representation [h_T, o_1, ..., o_Ms] for a passive party."""
    h_t = temporal.forward(tape, window, leaves, input_leaf=input_leaf)
    levels = [h_t]
    current = h_t
    for m in range(spatial.n_layers):
        current = spatial.layer_forward(tape, current, m, leaves)
        levels.append(current)
    return levels


def leaf_params(tape: Tape, params: dict[str, np.ndarray], party_id: str,
                requires_grad: bool = True) -> dict[str, Tensor]:
    """Attach every parameter array to the tape as a labelled leaf."""
    return {name: tape.leaf(arr, label=f"param:{party_id}:{name}", requires_grad=requires_grad)
            for name, arr in params.items()}
