"""Split-learning collaboration between the active party and passive parties.

Only two kinds of payload ever cross a party boundary: published virtual-node
matrices (forward) and their loss gradients (backward), both exactly
``n_active x hidden``. Parameters and raw series never leave their owner; the
transcript logs every payload with content hashes so that claim is checkable
after the fact.

Alignment wiring: with ``M_s`` spatial layers there are ``L = M_s`` levels;
the passive representation at level ``l-1`` (level 0 is the temporal
representation) is fused into the active party's spatial output ``o_l``. The
prediction head reads the final fused state (configurable to read the raw
spatial output instead).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional, Sequence

import numpy as np

from fedcast import autodiff as ad
from fedcast.autodiff import Tape, Tensor
from fedcast.data import FederatedDataset, distance_matrix
from fedcast.models import (PredictionHead, SpatialStack, TemporalStack,
                            intra_adjacency, leaf_params)
from fedcast.seeding import stream
from fedcast.vna import DpConfig, GateFusion, VnaGenerator, dp_protect, knn_matrix


class ProtocolError(RuntimeError):
    """Protocol-level contract violation (bad payload shape, missing message)."""


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


# ---------------------------------------------------------------------------
# alignment plan
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AlignmentPlan:
    """Level wiring: passive level l-1 feeds the fusion applied to o_l."""

    n_levels: int

    @property
    def levels(self) -> list[tuple[int, int]]:
        # (passive representation index, active spatial layer index), 1-based layer
        return [(m, m + 1) for m in range(self.n_levels)]


def wire_levels(spatial_layers: int) -> AlignmentPlan:
    if spatial_layers < 1:
        raise ValueError("need at least one spatial layer")
    return AlignmentPlan(n_levels=spatial_layers)


# ---------------------------------------------------------------------------
# transcript
# ---------------------------------------------------------------------------

def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass
class Message:
    direction: str                 # "forward-vn" | "backward-grad"
    level: int
    sender: str
    receiver: str
    window: int
    step: int                      # forward-round counter
    phase: str                     # "train" | "eval"
    shape: tuple[int, int]
    value_count: int
    nbytes: int
    sha256: str
    origin_op: str                 # op kind that produced the payload
    payload: Optional[np.ndarray] = None


class Transcript:
    """Ordered log of every cross-party payload plus audit bookkeeping."""

    def __init__(self, n_active: int, hidden: int, n_levels: int,
                 passive_ids: Sequence[str], retain_payloads: bool = False):
        self.n_active = n_active
        self.hidden = hidden
        self.n_levels = n_levels
        self.passive_ids = list(passive_ids)
        self.retain_payloads = retain_payloads
        self.messages: list[Message] = []
        self.violations: list[str] = []

    def record(self, direction: str, level: int, sender: str, receiver: str,
               window: int, step: int, phase: str, payload: np.ndarray,
               origin_op: str, forbidden: Optional[set] = None) -> Message:
        payload = np.ascontiguousarray(payload, dtype=np.float64)
        msg = Message(
            direction=direction, level=level, sender=sender, receiver=receiver,
            window=window, step=step, phase=phase, shape=payload.shape,
            value_count=payload.size, nbytes=payload.nbytes,
            sha256=_sha(payload.tobytes()), origin_op=origin_op,
            payload=payload.copy() if self.retain_payloads else None,
        )
        idx = len(self.messages)
        self.messages.append(msg)
        if payload.shape != (self.n_active, self.hidden):
            self.violations.append(
                f"message {idx}: payload shape {payload.shape} is not "
                f"({self.n_active}, {self.hidden})"
            )
        if origin_op == "leaf" and direction == "forward-vn":
            self.violations.append(
                f"message {idx}: forward payload is a raw tape leaf, not a published value"
            )
        if forbidden:
            hits = sum(1 for row in payload if hash(row.tobytes()) in forbidden)
            if hits:
                self.violations.append(
                    f"message {idx}: payload rows match {hits} forbidden "
                    f"(parameter or raw-feature) slices"
                )
        return msg

    def forward_messages(self, phase: str = "train") -> list[Message]:
        return [m for m in self.messages if m.direction == "forward-vn" and m.phase == phase]

    def backward_messages(self, phase: str = "train") -> list[Message]:
        return [m for m in self.messages if m.direction == "backward-grad" and m.phase == phase]

    def to_dict(self) -> dict:
        return {
            "n_active": self.n_active,
            "hidden": self.hidden,
            "n_levels": self.n_levels,
            "passive_ids": self.passive_ids,
            "violations": self.violations,
            "messages": [
                {k: (list(v) if isinstance(v, tuple) else v)
                 for k, v in asdict(m).items() if k != "payload"}
                for m in self.messages
            ],
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "Transcript":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        t = cls(raw["n_active"], raw["hidden"], raw["n_levels"], raw["passive_ids"])
        t.violations = list(raw["violations"])
        for m in raw["messages"]:
            t.messages.append(Message(
                direction=m["direction"], level=m["level"], sender=m["sender"],
                receiver=m["receiver"], window=m["window"], step=m["step"],
                phase=m["phase"], shape=tuple(m["shape"]),
                value_count=m["value_count"], nbytes=m["nbytes"],
                sha256=m["sha256"], origin_op=m["origin_op"],
            ))
        return t


@dataclass
class AuditReport:
    ok: bool
    violations: list[str]
    n_forward: int
    n_backward: int
    forward_values: int
    backward_values: int
    expected_values_per_window: int
    windows_audited: int

    def to_dict(self) -> dict:
        return asdict(self)


def check_message_conservation(messages: Sequence[Message]) -> list[str]:
    """Forward and backward messages must be in bijection per
    (passive party, level, window, step)."""
    problems = []
    fwd = {}
    bwd = {}
    for m in messages:
        party = m.sender if m.direction == "forward-vn" else m.receiver
        key = (party, m.level, m.window, m.step)
        bucket = fwd if m.direction == "forward-vn" else bwd
        bucket[key] = bucket.get(key, 0) + 1
    for key, count in fwd.items():
        if bwd.get(key, 0) != count:
            problems.append(
                f"missing backward message for forward message {key} "
                f"({count} forward, {bwd.get(key, 0)} backward)"
            )
    for key, count in bwd.items():
        if key not in fwd:
            problems.append(f"backward message {key} without a forward message")
    return problems


def audit(transcript: Transcript) -> AuditReport:
    """Verify payload shapes, the L*N*H value law, bijection, and content flags."""
    violations = list(transcript.violations)
    expected = transcript.n_levels * transcript.n_active * transcript.hidden
    fwd = transcript.forward_messages("train")
    bwd = transcript.backward_messages("train")
    per_pass: dict[tuple[str, int, int], int] = {}
    for m in fwd:
        key = (m.sender, m.step, m.window)
        per_pass[key] = per_pass.get(key, 0) + m.value_count
    for (sender, step, window), count in sorted(per_pass.items()):
        if count != expected:
            violations.append(
                f"forward values from {sender} at step {step}, window {window}: "
                f"{count} != L*N*H = {expected}"
            )
    violations.extend(check_message_conservation(fwd + bwd))
    return AuditReport(
        ok=not violations,
        violations=violations,
        n_forward=len(fwd),
        n_backward=len(bwd),
        forward_values=sum(m.value_count for m in fwd),
        backward_values=sum(m.value_count for m in bwd),
        expected_values_per_window=expected,
        windows_audited=len(per_pass),
    )


# ---------------------------------------------------------------------------
# forbidden-content registry: parameter bytes and raw features must not appear
# ---------------------------------------------------------------------------

class ContentRegistry:
    """Hashes of every width-``hidden`` float slice of parameters and raw inputs.

    A payload row whose bytes equal any such slice means parameter or
    raw-feature values crossed the boundary verbatim. Membership uses the
    builtin bytes hash (process-local); persisted transcripts carry sha256
    of whole payloads instead.
    """

    def __init__(self, hidden: int):
        self.hidden = hidden
        self._param_hashes: set[int] = set()
        self._input_hashes: set[int] = set()

    @staticmethod
    def _slice_hashes(arr: np.ndarray, width: int) -> set[int]:
        flat = np.ascontiguousarray(arr, dtype=np.float64).ravel()
        if flat.size < width:
            return set()
        # all-zero slices are skipped: zero biases and rectified-to-zero payload
        # rows would otherwise collide without any information crossing
        windows = np.lib.stride_tricks.sliding_window_view(flat, width)
        starts = np.nonzero(windows.any(axis=1))[0]
        buf = flat.tobytes()
        nbytes = width * 8
        return {hash(buf[8 * s: 8 * s + nbytes]) for s in starts}

    @staticmethod
    def row_hash(row: np.ndarray) -> int:
        return hash(np.ascontiguousarray(row, dtype=np.float64).tobytes())

    def refresh_params(self, param_sets: Sequence[dict[str, np.ndarray]]) -> None:
        hashes: set[int] = set()
        for params in param_sets:
            for arr in params.values():
                hashes |= self._slice_hashes(arr, self.hidden)
        self._param_hashes = hashes

    def note_input(self, window: np.ndarray) -> None:
        n = window.shape[0]
        per_series = window.reshape(n, -1)
        width = min(self.hidden, per_series.shape[1])
        for row in per_series:
            self._input_hashes |= self._slice_hashes(row, width)

    def reset_inputs(self) -> None:
        self._input_hashes = set()

    def __contains__(self, h: int) -> bool:
        return h in self._param_hashes or h in self._input_hashes

    @property
    def forbidden(self) -> "ContentRegistry":
        return self


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adaptive moment estimation with coupled weight decay (grad += wd * p)."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 weight_decay: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * (g * g)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# parties
# ---------------------------------------------------------------------------

class PassiveParty:
    def __init__(self, party_id: str, idx: int, n_features: int, n_active: int,
                 n_series: int, coordinates: np.ndarray, geo_delta: np.ndarray,
                 cfg: "FederationConfig", seed: int):
        self.party_id = party_id
        rng = stream(seed, f"init:{party_id}")
        self.temporal = TemporalStack(n_features, cfg.hidden, cfg.temporal_layers,
                                      rng=rng, prefix="temporal")
        self.spatial = SpatialStack(cfg.hidden, intra_adjacency(coordinates),
                                    cfg.spatial_layers, rng=rng, prefix="spatial")
        k = min(cfg.neighbors, n_series)
        self.knn = knn_matrix(geo_delta, k)
        self.generators = [
            VnaGenerator(n_series, n_active, cfg.hidden, n_heads=cfg.heads,
                         rank=cfg.adaptive_rank, rng=rng, prefix=f"vna{lvl}")
            for lvl in range(cfg.spatial_layers)
        ]
        self.params: dict[str, np.ndarray] = {}
        self.params.update(self.temporal.params)
        self.params.update(self.spatial.params)
        for gen in self.generators:
            self.params.update(gen.params)
        self.dp_rng = stream(seed, f"dp-noise:{party_id}")
        self.tape: Optional[Tape] = None
        self.leaves: Optional[dict[str, Tensor]] = None

    def begin_round(self) -> None:
        self.tape = Tape()
        self.leaves = leaf_params(self.tape, self.params, self.party_id)


class ActiveParty:
    def __init__(self, party_id: str, n_features: int, coordinates: np.ndarray,
                 horizon: int, n_outputs: int, passive_ids: Sequence[str],
                 cfg: "FederationConfig", seed: int):
        self.party_id = party_id
        rng = stream(seed, f"init:{party_id}")
        self.temporal = TemporalStack(n_features, cfg.hidden, cfg.temporal_layers,
                                      rng=rng, prefix="temporal")
        self.spatial = SpatialStack(cfg.hidden, intra_adjacency(coordinates),
                                    cfg.spatial_layers, rng=rng, prefix="spatial")
        self.head = PredictionHead(cfg.hidden, horizon, n_outputs, rng=rng)
        self.gates = {
            (pid, lvl): GateFusion(cfg.hidden, rng=rng, prefix=f"gate.{pid}.l{lvl}")
            for pid in passive_ids for lvl in range(cfg.spatial_layers)
        }
        self.params: dict[str, np.ndarray] = {}
        self.params.update(self.temporal.params)
        self.params.update(self.spatial.params)
        self.params.update(self.head.params)
        for gate in self.gates.values():
            self.params.update(gate.params)
        self.tape: Optional[Tape] = None
        self.leaves: Optional[dict[str, Tensor]] = None

    def begin_round(self) -> None:
        self.tape = Tape()
        self.leaves = leaf_params(self.tape, self.params, self.party_id)


# ---------------------------------------------------------------------------
# federation
# ---------------------------------------------------------------------------

@dataclass
class FederationConfig:
    hidden: int = 32
    temporal_layers: int = 2
    spatial_layers: int = 2
    neighbors: int = 5
    heads: int = 2
    adaptive_rank: int = 10
    predict_from_fused: bool = True


@dataclass
class TrainSettings:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 250
    patience: int = 25


@dataclass
class PublishedRecord:
    passive_idx: int
    level: int
    window: int
    passive_node: Tensor           # node on the passive tape (pre-detach)
    payload: np.ndarray
    active_leaf: Optional[Tensor] = None
    cotangent: Optional[np.ndarray] = None


@dataclass
class RoundContext:
    windows: list[int]
    published: list[PublishedRecord]
    predictions: list[Tensor]      # on the active tape, (n_active, horizon*f_out)
    gate_means: list[float]


class Federation:
    """All parties plus the deterministic single-threaded scheduler."""

    def __init__(self, dataset: FederatedDataset, config: FederationConfig,
                 dp: DpConfig, seed: int, retain_payloads: bool = False):
        self.dataset = dataset
        self.config = config
        self.dp = dp
        self.seed = seed
        self.plan = wire_levels(config.spatial_layers)
        active_panel = dataset.active.panel
        passive_panels = [p.panel for p in dataset.passives]
        self.active = ActiveParty(
            "active", active_panel.n_features, active_panel.coordinates,
            dataset.horizon, active_panel.output_features,
            [p.party_id for p in passive_panels], config, seed,
        )
        self.passives = [
            PassiveParty(
                panel.party_id, j, panel.n_features, active_panel.n_series,
                panel.n_series, panel.coordinates,
                distance_matrix(active_panel.coordinates, panel.coordinates).delta,
                config, seed,
            )
            for j, panel in enumerate(passive_panels)
        ]
        self.transcript = Transcript(
            active_panel.n_series, config.hidden, self.plan.n_levels,
            [p.party_id for p in passive_panels], retain_payloads=retain_payloads,
        )
        self.registry = ContentRegistry(config.hidden)
        self.round: Optional[RoundContext] = None
        self._params_dirty = True
        self._log_round = True
        self._step = 0
        self._adjacency_cache: dict[tuple[str, int], np.ndarray] = {}

    # -- forward ------------------------------------------------------------

    def forward_round(self, batch: Sequence[int], train_mode: bool = True,
                      log: bool = True) -> np.ndarray:
        """Run the protocol forward for each window in the batch.

        Returns scaled predictions of shape (B, n_active, horizon * f_out);
        tapes stay intact on every party for the matching backward_round.
        ``log=False`` (evaluation-only traffic) skips transcript recording.
        """
        phase = "train" if train_mode else "eval"
        for party in (self.active, *self.passives):
            party.begin_round()
        self._log_round = log
        self._step += 1
        if log:
            if self._params_dirty:
                self.registry.refresh_params(
                    [self.active.params] + [p.params for p in self.passives])
                self._params_dirty = False
            self.registry.reset_inputs()
        ctx = RoundContext(windows=list(batch), published=[], predictions=[],
                           gate_means=[])
        add_noise = self.dp.train_noise if train_mode else True
        n_active = self.dataset.active.panel.n_series
        hidden = self.config.hidden

        n_windows = len(ctx.windows)
        # windows are stacked into one panel so temporal and spatial passes run
        # batched; publication, fusion, and all messages remain per window
        records_by: dict[tuple[int, int, int], PublishedRecord] = {}
        for j, party in enumerate(self.passives):
            raw_windows = [self.dataset.passive_window(j, w) for w in ctx.windows]
            n_series = raw_windows[0].shape[0]
            if log:
                for rw in raw_windows:
                    self.registry.note_input(rw)
            stacked = np.concatenate(raw_windows, axis=0)
            adj = self._block_adjacency(party.party_id, party.spatial, n_windows)
            rep = party.temporal.forward(party.tape, stacked, party.leaves)
            levels = [rep]
            for m in range(party.spatial.n_layers):
                rep = party.spatial.layer_forward(party.tape, rep, m, party.leaves,
                                                  adjacency=adj)
                levels.append(rep)
            for b, window in enumerate(ctx.windows):
                for lvl in range(self.plan.n_levels):
                    z = ad.slice2d(levels[lvl], (b * n_series, (b + 1) * n_series))
                    v = party.generators[lvl].generate(party.tape, z, party.knn,
                                                       party.leaves)
                    v_phi, _ = dp_protect(party.tape, v, self.dp, party.dp_rng,
                                          add_noise=add_noise)
                    payload = v_phi.detach()
                    if log:
                        self.transcript.record(
                            "forward-vn", lvl, party.party_id, "active", window,
                            self._step, phase, payload,
                            party.tape.nodes[v_phi.nid].op, self.registry.forbidden)
                    rec = PublishedRecord(passive_idx=j, level=lvl, window=window,
                                          passive_node=v_phi, payload=payload)
                    records_by[(j, b, lvl)] = rec
                    ctx.published.append(rec)

        active_windows = [self.dataset.active_window(w) for w in ctx.windows]
        if log:
            for aw in active_windows:
                self.registry.note_input(aw)
        tape = self.active.tape
        adj = self._block_adjacency("active", self.active.spatial, n_windows)
        state = self.active.temporal.forward(tape, np.concatenate(active_windows, axis=0),
                                             self.active.leaves)
        for m in range(self.config.spatial_layers):
            o_m = self.active.spatial.layer_forward(tape, state, m, self.active.leaves,
                                                    adjacency=adj)
            if not self.passives:
                state = o_m
                continue
            fused_parts = []
            for b, window in enumerate(ctx.windows):
                fused = ad.slice2d(o_m, (b * n_active, (b + 1) * n_active))
                for j, party in enumerate(self.passives):
                    rec = records_by[(j, b, m)]
                    if rec.payload.shape != (n_active, hidden):
                        raise ProtocolError(
                            f"level {m}: payload shape {rec.payload.shape} does not "
                            f"match declared ({n_active}, {hidden})"
                        )
                    leaf = tape.leaf(rec.payload,
                                     label=f"published:{party.party_id}:l{m}:w{window}")
                    rec.active_leaf = leaf
                    gate = self.active.gates[(party.party_id, m)]
                    fused, gate_t = gate.fuse(tape, leaf, fused,
                                              self.active.leaves, return_gate=True)
                    ctx.gate_means.append(float(gate_t.values.mean()))
                fused_parts.append(fused)
            fused_all = ad.concat_rows(fused_parts) if n_windows > 1 else fused_parts[0]
            is_last = m == self.config.spatial_layers - 1
            state = o_m if (is_last and not self.config.predict_from_fused) else fused_all
        preds = self.active.head.forward(tape, state, self.active.leaves)
        ctx.predictions = [ad.slice2d(preds, (b * n_active, (b + 1) * n_active))
                           for b in range(n_windows)]
        self.round = ctx
        return np.stack([p.values for p in ctx.predictions])

    def _block_adjacency(self, party_id: str, spatial, n_windows: int) -> Optional[np.ndarray]:
        if n_windows == 1:
            return None
        key = (party_id, n_windows)
        if key not in self._adjacency_cache:
            self._adjacency_cache[key] = np.kron(np.eye(n_windows), spatial.adjacency)
        return self._adjacency_cache[key]

    # -- backward -----------------------------------------------------------

    def backward_round(self, labels: Sequence[np.ndarray],
                       active_opt: Adam, passive_opts: Sequence[Adam],
                       phase: str = "train") -> float:
        """MAE loss, local backward on every party, gradient messages in between."""
        ctx = self.round
        if ctx is None:
            raise ProtocolError("backward_round without a forward tape")
        tape = self.active.tape
        total = None
        for pred, label in zip(ctx.predictions, labels):
            flat = label.reshape(pred.shape)
            term = ad.mean_abs_error(pred, tape.constant(flat))
            total = term if total is None else ad.add(total, term)
        loss = ad.smul(total, 1.0 / len(ctx.predictions))
        loss_value = float(loss.values[0, 0])

        grads = tape.backward(loss)
        for rec in ctx.published:
            cot = tape.grad(grads, rec.active_leaf)
            rec.cotangent = cot
            party = self.passives[rec.passive_idx]
            if self._log_round:
                self.transcript.record(
                    "backward-grad", rec.level, "active", party.party_id,
                    rec.window, self._step, phase, cot, "loss-backward",
                    self.registry.forbidden)

        active_grads = {name: tape.grad(grads, leaf)
                        for name, leaf in self.active.leaves.items()}
        active_opt.step(active_grads)

        for j, party in enumerate(self.passives):
            records = [r for r in ctx.published if r.passive_idx == j]
            missing = [r for r in records if r.cotangent is None]
            if missing:
                raise ProtocolError(
                    f"missing backward message for level {missing[0].level}, "
                    f"window {missing[0].window}")
            seeds = [(r.passive_node, r.cotangent) for r in records]
            pgrads = party.tape.backward(seeds)
            passive_opts[j].step({name: party.tape.grad(pgrads, leaf)
                                  for name, leaf in party.leaves.items()})
        self._params_dirty = True
        self.round = None
        return loss_value

    def loss_and_grads(self, batch: Sequence[int]) -> tuple[float, dict, list[dict]]:
        """Batch MAE loss and raw gradients for every party, no updates applied."""
        self.forward_round(batch, train_mode=True, log=False)
        ctx = self.round
        tape = self.active.tape
        total = None
        for pred, window in zip(ctx.predictions, ctx.windows):
            label = self.dataset.labels(window).reshape(pred.shape)
            term = ad.mean_abs_error(pred, tape.constant(label))
            total = term if total is None else ad.add(total, term)
        loss = ad.smul(total, 1.0 / len(ctx.predictions))
        grads = tape.backward(loss)
        active_grads = {name: tape.grad(grads, leaf)
                        for name, leaf in self.active.leaves.items()}
        passive_grads = []
        for j, party in enumerate(self.passives):
            records = [r for r in ctx.published if r.passive_idx == j]
            seeds = [(r.passive_node, tape.grad(grads, r.active_leaf)) for r in records]
            pg = party.tape.backward(seeds)
            passive_grads.append({name: party.tape.grad(pg, leaf)
                                  for name, leaf in party.leaves.items()})
        self.round = None
        return float(loss.values[0, 0]), active_grads, passive_grads

    # -- training loop --------------------------------------------------------

    def train(self, settings: TrainSettings,
              progress: Optional[Callable[[int, dict], None]] = None) -> dict:
        ds = self.dataset
        shuffle_rng = stream(self.seed, "train-order")
        active_opt = Adam(self.active.params, settings.lr, settings.weight_decay)
        passive_opts = [Adam(p.params, settings.lr, settings.weight_decay)
                        for p in self.passives]
        history = {"train_loss": [], "valid_mae": [], "gate_mean": []}
        best = {"mae": math.inf, "epoch": -1, "params": None}
        stale = 0
        for epoch in range(settings.max_epochs):
            order = shuffle_rng.permutation(ds.windows["train"])
            losses = []
            gate_means = []
            for b in range(0, len(order), settings.batch_size):
                batch = order[b:b + settings.batch_size].tolist()
                self.forward_round(batch, train_mode=True)
                gate_means.extend(self.round.gate_means)
                labels = [ds.labels(w) for w in batch]
                loss = self.backward_round(labels, active_opt, passive_opts)
                if not math.isfinite(loss):
                    raise TrainingDiverged(epoch, b // settings.batch_size)
                losses.append(loss)
            valid = self.evaluate("valid")
            history["train_loss"].append(float(np.mean(losses)))
            history["valid_mae"].append(valid["MAE"])
            history["gate_mean"].append(float(np.mean(gate_means)) if gate_means else 1.0)
            if progress:
                progress(epoch, {"train_loss": history["train_loss"][-1],
                                 "valid_mae": valid["MAE"]})
            if valid["MAE"] < best["mae"] - 1e-12:
                best = {"mae": valid["MAE"], "epoch": epoch,
                        "params": self.snapshot_params()}
                stale = 0
            else:
                stale += 1
                if stale >= settings.patience:
                    break
        if best["params"] is not None:
            self.restore_params(best["params"])
        history["best_epoch"] = best["epoch"]
        history["best_valid_mae"] = best["mae"]
        return history

    def snapshot_params(self) -> dict:
        snap = {"active": {k: v.copy() for k, v in self.active.params.items()}}
        for p in self.passives:
            snap[p.party_id] = {k: v.copy() for k, v in p.params.items()}
        return snap

    def restore_params(self, snap: dict) -> None:
        for k, v in snap["active"].items():
            self.active.params[k][...] = v
        for p in self.passives:
            for k, v in snap[p.party_id].items():
                p.params[k][...] = v

    # -- evaluation -----------------------------------------------------------

    def predict_split(self, split: str, log_transcript: bool = False,
                      chunk: int = 32) -> np.ndarray:
        """Scaled predictions for every window of a split, (B, n_active, horizon, f_out)."""
        ds = self.dataset
        preds = []
        starts = [int(w) for w in ds.windows[split]]
        for i in range(0, len(starts), chunk):
            out = self.forward_round(starts[i:i + chunk], train_mode=False,
                                     log=log_transcript)
            self.round = None
            preds.extend(out)
        n_out = ds.active.panel.output_features
        arr = np.stack(preds)
        return arr.reshape(arr.shape[0], arr.shape[1], ds.horizon, n_out)

    def evaluate(self, split: str) -> dict:
        """MAE / RMSE / SMAPE on de-normalized predictions for the split."""
        ds = self.dataset
        scaled = self.predict_split(split)
        out_scaler = ds.active.scaler.slice_features(ds.active.panel.output_features)
        y_pred = out_scaler.inverse_transform(scaled)
        y_true = np.stack([ds.raw_labels(int(w)) for w in ds.windows[split]])
        return metrics(y_true, y_pred)


def metrics(y_true: np.ndarray, y_pred: np.ndarray) -> dict:
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"metric shapes differ: {y_true.shape} vs {y_pred.shape}")
    err = y_pred - y_true
    denom = (np.abs(y_true) + np.abs(y_pred)) / 2.0
    smape_terms = np.where(denom > 0.0, np.abs(err) / np.where(denom > 0.0, denom, 1.0), 0.0)
    return {
        "MAE": float(np.abs(err).mean()),
        "RMSE": float(np.sqrt((err * err).mean())),
        "SMAPE": float(smape_terms.mean()),
    }
