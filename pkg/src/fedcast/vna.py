"""Virtual node alignment: cross-party aggregation, DP protection, gated fusion.

A passive party turns one level of its representation (n_passive x hidden)
into virtual nodes (n_active x hidden), one per active-party series, through
three aggregation routes that are summed and rectified:

  * distance-based: binary k-nearest-neighbour mixing from the precomputed
    geography, then a linear map;
  * adaptive: a learned low-rank score matrix, rectified and row-softmaxed so
    each virtual node holds a convex mixture over passive series;
  * dynamic: multi-head cross attention from virtual-node position queries to
    the passive representations (plus positions).

Published batches are row-clipped and optionally carry Gaussian noise
calibrated to (epsilon, delta); the active party merges them into its own
representation with a learned sigmoid gate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from fedcast import autodiff as ad
from fedcast.autodiff import Tape, Tensor
from fedcast.models import uniform_init


@dataclass
class DpConfig:
    """Per-publication Gaussian mechanism settings.

    ``sigma = sqrt(2 ln(1.25/delta)) / epsilon``; per-coordinate noise std is
    ``sigma * clip``. ``epsilon = inf`` disables noise (clipping only).
    """

    epsilon: float = math.inf
    delta: float = 1e-4
    clip: float = 1.0
    train_noise: bool = True       # add noise during training forwards too

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must be in (0, 1), got {self.delta}")
        if self.clip <= 0:
            raise ValueError(f"clip bound must be positive, got {self.clip}")

    @property
    def sigma(self) -> float:
        if math.isinf(self.epsilon):
            return 0.0
        return math.sqrt(2.0 * math.log(1.25 / self.delta)) / self.epsilon

    @property
    def noise_std(self) -> float:
        return self.sigma * self.clip


@dataclass
class VirtualNodeBatch:
    """One published batch at one alignment level (raw / clipped / noised)."""

    level: int
    raw: np.ndarray
    clipped: np.ndarray
    noised: np.ndarray


def knn_matrix(delta: np.ndarray, k: int) -> np.ndarray:
    """Binary (n_active x n_passive) matrix: row j marks the k passive series
    nearest to active series j; distance ties go to the lower passive index."""
    n_passive, n_active = delta.shape
    if not 1 <= k <= n_passive:
        raise ValueError(f"k={k} out of range for {n_passive} passive series")
    out = np.zeros((n_active, n_passive))
    for j in range(n_active):
        nearest = np.argsort(delta[:, j], kind="stable")[:k]
        out[j, nearest] = 1.0
    return out


class VnaGenerator:
    """Passive-party half of one alignment level: generates virtual nodes."""

    def __init__(self, n_passive: int, n_active: int, hidden: int, *,
                 n_heads: int = 2, rank: int = 10, rng: np.random.Generator,
                 prefix: str = "vna0"):
        if n_heads < 1:
            raise ValueError("need at least one attention head")
        self.n_passive = n_passive
        self.n_active = n_active
        self.hidden = hidden
        self.n_heads = n_heads
        self.head_dim = math.ceil((n_passive + n_active) / n_heads)
        self.prefix = prefix
        h = hidden
        p = prefix
        self.params: dict[str, np.ndarray] = {
            f"{p}.dis.w": uniform_init(rng, (h, h), h),
            f"{p}.dis.b": np.zeros((1, h)),
            f"{p}.adp.w": uniform_init(rng, (h, h), h),
            f"{p}.adp.b": np.zeros((1, h)),
            f"{p}.adp.a1": uniform_init(rng, (n_passive, rank), rank),
            f"{p}.adp.a2": uniform_init(rng, (n_active, rank), rank),
            f"{p}.dyn.pos_in": uniform_init(rng, (n_passive, h), h),
            f"{p}.dyn.pos_out": uniform_init(rng, (n_active, h), h),
            f"{p}.dyn.w1": uniform_init(rng, (n_heads * self.head_dim, h),
                                        n_heads * self.head_dim),
            f"{p}.dyn.b1": np.zeros((1, h)),
            f"{p}.dyn.w2": uniform_init(rng, (h, h), h),
            f"{p}.dyn.b2": np.zeros((1, h)),
        }
        for i in range(n_heads):
            self.params[f"{p}.dyn.head{i}.wq"] = uniform_init(rng, (h, self.head_dim), h)
            self.params[f"{p}.dyn.head{i}.wk"] = uniform_init(rng, (h, self.head_dim), h)
            self.params[f"{p}.dyn.head{i}.wv"] = uniform_init(rng, (h, self.head_dim), h)

    # -- aggregation routes -------------------------------------------------

    def distance_aggregate(self, tape: Tape, z: Tensor, knn: np.ndarray,
                           leaves: dict[str, Tensor]) -> Tensor:
        p = self.prefix
        mixed = ad.matmul(tape.constant(knn), z)
        return ad.add(ad.matmul(mixed, leaves[f"{p}.dis.w"]), leaves[f"{p}.dis.b"])

    def adaptive_scores(self, leaves: dict[str, Tensor]) -> Tensor:
        """Row-stochastic (n_active x n_passive) mixing matrix."""
        p = self.prefix
        scores = ad.relu(ad.matmul(leaves[f"{p}.adp.a1"],
                                   ad.transpose(leaves[f"{p}.adp.a2"])))
        return ad.softmax_rows(ad.transpose(scores))

    def adaptive_aggregate(self, tape: Tape, z: Tensor, leaves: dict[str, Tensor]) -> Tensor:
        p = self.prefix
        mix = self.adaptive_scores(leaves)
        mixed = ad.matmul(mix, z)
        return ad.add(ad.matmul(mixed, leaves[f"{p}.adp.w"]), leaves[f"{p}.adp.b"])

    def dynamic_aggregate(self, tape: Tape, z: Tensor, leaves: dict[str, Tensor],
                          return_attention: bool = False):
        p = self.prefix
        x_in = ad.concat_rows([ad.add(z, leaves[f"{p}.dyn.pos_in"]),
                               leaves[f"{p}.dyn.pos_out"]])
        x_out = leaves[f"{p}.dyn.pos_out"]
        heads = []
        attentions = []
        scale = 1.0 / math.sqrt(self.head_dim)
        for i in range(self.n_heads):
            q = ad.matmul(x_out, leaves[f"{p}.dyn.head{i}.wq"])
            k = ad.matmul(x_in, leaves[f"{p}.dyn.head{i}.wk"])
            v = ad.matmul(x_in, leaves[f"{p}.dyn.head{i}.wv"])
            att = ad.softmax_rows(ad.smul(ad.matmul(q, ad.transpose(k)), scale))
            attentions.append(att)
            heads.append(ad.matmul(att, v))
        joined = ad.concat_cols(heads) if len(heads) > 1 else heads[0]
        hid = ad.relu(ad.add(ad.matmul(joined, leaves[f"{p}.dyn.w1"]), leaves[f"{p}.dyn.b1"]))
        out = ad.add(ad.matmul(hid, leaves[f"{p}.dyn.w2"]), leaves[f"{p}.dyn.b2"])
        if return_attention:
            return out, attentions
        return out

    def generate(self, tape: Tape, z: Tensor, knn: np.ndarray,
                 leaves: dict[str, Tensor]) -> Tensor:
        """Fused virtual nodes: relu(distance + adaptive + dynamic)."""
        v_dis = self.distance_aggregate(tape, z, knn, leaves)
        v_adp = self.adaptive_aggregate(tape, z, leaves)
        v_dyn = self.dynamic_aggregate(tape, z, leaves)
        return fuse_virtual_node(v_dis, v_adp, v_dyn)


def fuse_virtual_node(v_dis: Tensor, v_adp: Tensor, v_dyn: Tensor) -> Tensor:
    if not (v_dis.shape == v_adp.shape == v_dyn.shape):
        raise ad.ShapeError(
            f"fuse: shapes differ: {v_dis.shape}, {v_adp.shape}, {v_dyn.shape}"
        )
    return ad.relu(ad.add(ad.add(v_dis, v_adp), v_dyn))


def dp_protect(tape: Tape, v: Tensor, cfg: DpConfig,
               rng: Optional[np.random.Generator] = None,
               add_noise: bool = True) -> tuple[Tensor, VirtualNodeBatch]:
    """Row-clip to the bound, then add fresh Gaussian noise if epsilon is finite.

    The noise enters the tape as an additive constant, so backward treats it
    as such while clipping uses its exact Jacobian.
    """
    clipped = ad.clip_rows(v, cfg.clip)
    if math.isinf(cfg.epsilon) or not add_noise:
        protected = clipped
    else:
        if rng is None:
            raise ValueError("finite epsilon requires a noise rng")
        noise = rng.normal(0.0, cfg.noise_std, size=clipped.shape)
        protected = ad.add(clipped, tape.constant(noise))
    batch = VirtualNodeBatch(level=-1, raw=v.detach(), clipped=clipped.detach(),
                             noised=protected.detach())
    return protected, batch


class GateFusion:
    """Active-party half of one alignment level: sigmoid-gated merge."""

    def __init__(self, hidden: int, *, rng: np.random.Generator, prefix: str = "gate0"):
        p = prefix
        self.prefix = prefix
        self.params: dict[str, np.ndarray] = {
            f"{p}.w_vn": uniform_init(rng, (hidden, hidden), hidden),
            f"{p}.w_own": uniform_init(rng, (hidden, hidden), hidden),
            f"{p}.b": np.zeros((1, hidden)),
        }

    def fuse(self, tape: Tape, v_phi: Tensor, own: Tensor,
             leaves: dict[str, Tensor], return_gate: bool = False):
        if v_phi.shape != own.shape:
            raise ad.ShapeError(f"gated fusion: shapes differ: {v_phi.shape} vs {own.shape}")
        p = self.prefix
        gate = ad.sigmoid(ad.add(ad.add(ad.matmul(v_phi, leaves[f"{p}.w_vn"]),
                                        ad.matmul(own, leaves[f"{p}.w_own"])),
                                 leaves[f"{p}.b"]))
        ones = tape.constant(np.ones(gate.shape))
        fused = ad.add(ad.mul(gate, own), ad.mul(ad.sub(ones, gate), v_phi))
        if return_gate:
            return fused, gate
        return fused
