"""Inference attacks against published virtual nodes, plus leakage scoring.

The attacker is the active party trying to reconstruct a passive party's raw
(scaled) windows from the matrices it received. The white-box route assumes
the passive model parameters as prior knowledge and inverts by gradient
descent with a 1-D total-variation smoother; the query-free route first fits
a surrogate passive model through the frozen active model, then runs the
white-box attack against the surrogate. Mean and random-guess baselines need
no published data at all and calibrate what "no information" looks like.

Leakage is scored as InfoLeak = 1 / (1 + mean per-sample L2 distance), 1
meaning perfect reconstruction, together with the scaled MAE.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from sklearn.cluster import KMeans

from fedcast import autodiff as ad
from fedcast.autodiff import Tape, Tensor
from fedcast.models import leaf_params
from fedcast.protocol import Adam, Federation
from fedcast.vna import DpConfig


class AttackError(RuntimeError):
    pass


@dataclass
class AttackPrior:
    kind: str                     # "white-box" | "query-free" | "none"
    has_scaler: bool = True


@dataclass
class AttackReport:
    kind: str
    level: Optional[int]
    reconstruction: np.ndarray     # scaled space, (n_windows, n_series, steps, feats)
    per_sample_l2: np.ndarray
    infoleak: float
    scaled_mae: float
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "level": self.level,
            "infoleak": self.infoleak,
            "scaled_mae": self.scaled_mae,
            "n_samples": int(self.per_sample_l2.size),
            "mean_distance": float(self.per_sample_l2.mean()),
            "settings": self.settings,
        }


def infoleak(x_true: np.ndarray, x_recon: np.ndarray) -> float:
    """1 / (1 + mean over samples of L2 distance); a sample is one series window."""
    lam, _ = _leak_terms(x_true, x_recon)
    return lam


def _leak_terms(x_true, x_recon) -> tuple[float, np.ndarray]:
    x_true = np.asarray(x_true, dtype=np.float64)
    x_recon = np.asarray(x_recon, dtype=np.float64)
    if x_true.shape != x_recon.shape:
        raise ValueError(f"shapes differ: {x_true.shape} vs {x_recon.shape}")
    flat_t = x_true.reshape(-1, x_true.shape[-2] * x_true.shape[-1])
    flat_r = x_recon.reshape(-1, x_recon.shape[-2] * x_recon.shape[-1])
    dists = np.linalg.norm(flat_t - flat_r, axis=1)
    return 1.0 / (1.0 + dists.mean()), dists


def select_attack_targets(windows: np.ndarray, window_data: Callable[[int], np.ndarray],
                          count: int = 16, seed: int = 0) -> list[int]:
    """Representative test windows via k-means over their flattened contents."""
    windows = [int(w) for w in windows]
    if len(windows) <= count:
        return windows
    stacked = np.stack([window_data(w).reshape(-1) for w in windows])
    km = KMeans(n_clusters=count, n_init=4, random_state=seed).fit(stacked)
    chosen = []
    for c in range(count):
        dists = np.linalg.norm(stacked - km.cluster_centers_[c], axis=1)
        order = np.argsort(dists)
        for idx in order:
            if windows[idx] not in chosen:
                chosen.append(windows[idx])
                break
    return sorted(chosen)


# ---------------------------------------------------------------------------
# white-box reconstruction
# ---------------------------------------------------------------------------

def passive_forward_fn(party, level: int, clip: float) -> Callable[[Tape, Tensor, tuple], Tensor]:
    """The published map f: raw scaled window -> clipped virtual nodes at a level.

    Returns a closure usable on an attacker-owned tape; parameters enter as
    frozen constants.
    """

    def fn(tape: Tape, x_leaf: Tensor, window_shape: tuple[int, int, int]) -> Tensor:
        leaves = leaf_params(tape, party.params, party.party_id, requires_grad=False)
        rep = party.temporal.forward(tape, np.zeros(window_shape), leaves,
                                     input_leaf=x_leaf)
        for m in range(level):
            rep = party.spatial.layer_forward(tape, rep, m, leaves)
        v = party.generators[level].generate(tape, rep, party.knn, leaves)
        return ad.clip_rows(v, clip)

    return fn


def total_variation_time(x: Tensor, n_series: int, n_steps: int, beta: float) -> Tensor:
    """1-D TV over time for a time-major (n_steps * n_series, feats) window."""
    if n_steps < 2:
        return ad.sum_all(ad.smul(x, 0.0))
    later = ad.slice2d(x, (n_series, n_steps * n_series))
    earlier = ad.slice2d(x, (0, (n_steps - 1) * n_series))
    sq = ad.square(ad.sub(later, earlier))
    if beta == 2.0:
        return ad.sum_all(sq)
    return ad.sum_all(ad.powc(sq, beta / 2.0))


def _run_reconstruction(targets: Sequence[np.ndarray], window_shape, forward_fn,
                        lam: float, beta: float, steps: int, lr: float,
                        weight_decay: float, init: Sequence[np.ndarray]) -> list[np.ndarray]:
    n_series, n_steps, n_feats = window_shape
    xs = {f"x{i}": a.copy() for i, a in enumerate(init)}
    opt = Adam(xs, lr=lr, weight_decay=weight_decay)
    for _ in range(steps):
        tape = Tape()
        total = None
        leaves = {name: tape.leaf(arr) for name, arr in xs.items()}
        for i, v_target in enumerate(targets):
            x_leaf = leaves[f"x{i}"]
            v_hat = forward_fn(tape, x_leaf, window_shape)
            embed_dist = ad.sum_all(ad.square(ad.sub(tape.constant(v_target), v_hat)))
            obj = embed_dist
            if lam:
                tv = total_variation_time(x_leaf, n_series, n_steps, beta)
                obj = ad.add(obj, ad.smul(tv, lam))
            total = obj if total is None else ad.add(total, obj)
        if not math.isfinite(total.values[0, 0]):
            raise AttackError("non-finite attack objective")
        grads = tape.backward(total)
        opt.step({name: tape.grad(grads, leaf) for name, leaf in leaves.items()})
    return [xs[f"x{i}"] for i in range(len(targets))]


def _time_major(window: np.ndarray) -> np.ndarray:
    n, t, f = window.shape
    return window.transpose(1, 0, 2).reshape(t * n, f)


def _series_major(flat: np.ndarray, shape) -> np.ndarray:
    n, t, f = shape
    return flat.reshape(t, n, f).transpose(1, 0, 2)


def whitebox_attack(targets: Sequence[tuple[int, np.ndarray]], party,
                    window_shape: tuple[int, int, int],
                    true_windows: Sequence[np.ndarray], *,
                    level: int = 0, clip: float = 1.0, lam: float = 1e-4,
                    beta: float = 2.0, steps: int = 500, lr: float = 0.1,
                    weight_decay: float = 1e-5, seed: int = 0,
                    forward_fn: Optional[Callable] = None,
                    kind: str = "white-box") -> AttackReport:
    """Reconstruct passive windows from published virtual nodes by inversion.

    ``targets`` pairs window ids with the published (noised) matrices; the
    optimization starts from zeros and restarts once from a small random
    point if the objective turns non-finite.
    """
    fn = forward_fn if forward_fn is not None else passive_forward_fn(party, level, clip)
    n_series, n_steps, n_feats = window_shape
    flat_shape = (n_steps * n_series, n_feats)
    v_targets = [v for _, v in targets]
    zero_init = [np.zeros(flat_shape) for _ in v_targets]
    try:
        flats = _run_reconstruction(v_targets, window_shape, fn, lam, beta,
                                    steps, lr, weight_decay, zero_init)
    except AttackError:
        rng = np.random.default_rng(seed)
        small = [rng.normal(0.0, 0.01, size=flat_shape) for _ in v_targets]
        flats = _run_reconstruction(v_targets, window_shape, fn, lam, beta,
                                    steps, lr, weight_decay, small)
    recon = np.stack([_series_major(f, window_shape) for f in flats])
    truth = np.stack(list(true_windows))
    lam_score, dists = _leak_terms(truth, recon)
    return AttackReport(
        kind=kind, level=level, reconstruction=recon, per_sample_l2=dists,
        infoleak=lam_score, scaled_mae=float(np.abs(truth - recon).mean()),
        settings={"lambda": lam, "beta": beta, "steps": steps, "lr": lr,
                  "weight_decay": weight_decay, "windows": [w for w, _ in targets]},
    )


# ---------------------------------------------------------------------------
# query-free attack: surrogate passive model through the frozen active model
# ---------------------------------------------------------------------------

def train_surrogate(fed: Federation, passive_idx: int, budget_epochs: int,
                    seed: int, batch_size: int = 8, lr: float = 1e-3):
    """Fit a fresh passive model against the frozen, trained active model.

    Uses the shadow data (the dataset's train split, validated on the valid
    split) and only ever updates the surrogate's parameters.
    """
    surrogate = Federation(fed.dataset, fed.config,
                           DpConfig(epsilon=math.inf, delta=fed.dp.delta,
                                    clip=fed.dp.clip),
                           seed=seed)
    surrogate.active.params = {k: v.copy() for k, v in fed.active.params.items()}
    ds = fed.dataset
    opt = Adam(surrogate.passives[passive_idx].params, lr=lr, weight_decay=1e-4)
    rng = np.random.default_rng(seed)
    best = {"mae": math.inf, "params": None}
    for _ in range(budget_epochs):
        order = rng.permutation(ds.windows["train"])
        for b in range(0, len(order), batch_size):
            batch = order[b:b + batch_size].tolist()
            loss, _, passive_grads = surrogate.loss_and_grads(batch)
            if not math.isfinite(loss):
                raise AttackError("surrogate training diverged")
            opt.step(passive_grads[passive_idx])
        valid = surrogate.evaluate("valid")
        if valid["MAE"] < best["mae"]:
            best = {"mae": valid["MAE"],
                    "params": {k: v.copy()
                               for k, v in surrogate.passives[passive_idx].params.items()}}
    if best["params"] is not None:
        for k, v in best["params"].items():
            surrogate.passives[passive_idx].params[k][...] = v
    return surrogate.passives[passive_idx]


def queryfree_attack(targets, fed: Federation, window_shape, true_windows, *,
                     passive_idx: int = 0, budget_epochs: int = 5,
                     level: int = 0, seed: int = 0, **whitebox_kw) -> AttackReport:
    surrogate_party = train_surrogate(fed, passive_idx, budget_epochs, seed)
    report = whitebox_attack(targets, surrogate_party, window_shape, true_windows,
                             level=level, clip=fed.dp.clip, seed=seed,
                             kind="query-free", **whitebox_kw)
    report.settings["budget_epochs"] = budget_epochs
    return report


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def baseline_attack(kind: str, true_windows: Sequence[np.ndarray], *,
                    seed: int = 0, distribution: str = "normal") -> AttackReport:
    """Guessing attacks that ignore published data entirely.

    ``mean`` reconstructs the per-feature mean (all zeros in scaled space);
    ``random-guess`` draws i.i.d. values, standard normal by default with a
    variance-matched uniform option.
    """
    truth = np.stack(list(true_windows))
    rng = np.random.default_rng(seed)
    if kind == "mean":
        recon = np.zeros_like(truth)
    elif kind == "random-guess":
        if distribution == "normal":
            recon = rng.standard_normal(truth.shape)
        elif distribution == "uniform":
            half = math.sqrt(3.0)   # unit variance
            recon = rng.uniform(-half, half, size=truth.shape)
        else:
            raise ValueError(f"unknown distribution {distribution!r}")
    else:
        raise ValueError(f"unknown baseline kind {kind!r}")
    lam_score, dists = _leak_terms(truth, recon)
    return AttackReport(
        kind=kind, level=None, reconstruction=recon, per_sample_l2=dists,
        infoleak=lam_score, scaled_mae=float(np.abs(truth - recon).mean()),
        settings={"distribution": distribution if kind == "random-guess" else None,
                  "seed": seed},
    )


# ---------------------------------------------------------------------------
# deviation lower bound for ideal attacks on linear models under noise
# ---------------------------------------------------------------------------

@dataclass
class LipschitzCertificate:
    matrix: np.ndarray
    constant: float                # largest singular value
    noise_norm: float


@dataclass
class BoundCheckResult:
    trials: int
    passed: int
    skipped: int
    deviations: np.ndarray
    bounds: np.ndarray

    @property
    def pass_rate(self) -> float:
        done = self.trials - self.skipped
        return self.passed / done if done else 0.0


def bound_check(dp: DpConfig, trials: int = 1000, dim: int = 8,
                seed: int = 0, matrix: Optional[np.ndarray] = None,
                noise: Optional[np.ndarray] = None) -> BoundCheckResult:
    """Empirical check that an ideal least-squares attacker deviates by at
    least ||noise|| / L on a full-rank linear publication map.

    Draws x, publishes W x + noise, reconstructs the minimum-norm least-squares
    pre-image, and compares ||x - x*|| against the bound. Trials where the
    noised output leaves the image of W (inconsistent system) are skipped and
    counted separately.
    """
    rng = np.random.default_rng(seed)
    deviations, bounds = [], []
    passed = skipped = 0
    for _ in range(trials):
        w = matrix if matrix is not None else _full_rank(rng, dim)
        cert = LipschitzCertificate(
            matrix=w, constant=float(np.linalg.svd(w, compute_uv=False)[0]),
            noise_norm=0.0)
        x = rng.normal(size=w.shape[1])
        n = noise if noise is not None else rng.normal(0.0, dp.noise_std, size=w.shape[0])
        cert.noise_norm = float(np.linalg.norm(n))
        y = w @ x + n
        x_star, _, rank, _ = np.linalg.lstsq(w, y, rcond=None)
        residual = np.linalg.norm(w @ x_star - y)
        if residual > 1e-8 * max(1.0, np.linalg.norm(y)):
            skipped += 1
            continue
        deviation = float(np.linalg.norm(x - x_star))
        bound = cert.noise_norm / cert.constant
        deviations.append(deviation)
        bounds.append(bound)
        if deviation >= bound - 1e-12:
            passed += 1
    return BoundCheckResult(trials=trials, passed=passed, skipped=skipped,
                            deviations=np.array(deviations), bounds=np.array(bounds))


def _full_rank(rng: np.random.Generator, dim: int) -> np.ndarray:
    while True:
        w = rng.normal(size=(dim, dim))
        if np.linalg.cond(w) < 1e6:
            return w


# ---------------------------------------------------------------------------
# harness: collect published targets from a trained federation
# ---------------------------------------------------------------------------

def collect_published(fed: Federation, windows: Sequence[int], *,
                      passive_idx: int = 0, level: int = 0,
                      noise_rng: Optional[np.random.Generator] = None):
    """Published (possibly noised) virtual nodes plus the true scaled windows."""
    from fedcast.vna import dp_protect
    from fedcast.models import multilevel

    party = fed.passives[passive_idx]
    if noise_rng is not None:
        party.dp_rng = noise_rng
    targets, truth = [], []
    for w in windows:
        w = int(w)
        party.begin_round()
        window = fed.dataset.passive_window(passive_idx, w)
        levels = multilevel(party.tape, party.temporal, party.spatial, window,
                            party.leaves)
        v = party.generators[level].generate(party.tape, levels[level],
                                             party.knn, party.leaves)
        v_phi, _ = dp_protect(party.tape, v, fed.dp, party.dp_rng, add_noise=True)
        targets.append((w, v_phi.detach()))
        truth.append(window.copy())
        party.tape = None
        party.leaves = None
    return targets, truth
