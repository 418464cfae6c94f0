"""Trajectory-level DP ensemble training.

Each round Poisson-samples trajectories, runs a local gradient-descent
pass per trajectory whose cumulative displacement is re-projected through
an ensemble clip after every batch (so the concatenated update norm never
exceeds the clipping norm C), averages the clipped updates with the fixed
denominator q*K, and perturbs the result with Gaussian noise of scale
z*C/(q*K) drawn once over the concatenated parameter vector.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import accountant, model, nn
from .data import poisson_sample
from .errors import DomainError, LayoutError, NumericalError

__all__ = [
    "PrivacyConfig",
    "TrainingRoundLog",
    "flat_ensemble_clip",
    "per_layer_ensemble_clip",
    "ensemble_clip",
    "ens_clip_gd",
    "gaussian_mechanism",
    "gaussian_sigma",
    "tdp_train",
    "CLIPPING_STRATEGIES",
]

CLIPPING_STRATEGIES = ("flat", "per_layer")


@dataclass
class PrivacyConfig:
    """Knobs of one private training run (defaults follow the small tasks)."""

    q: float = 1e-3
    z: float = 0.0
    clip_norm: float = 1.0
    delta: float = 1e-5
    clipping: str = "flat"
    local_epochs: int = 1
    batch_size: int = 16
    lr: float = 1e-3
    max_rounds: int = 1000
    early_stop_patience: int = 10
    eval_every: int = 10

    def __post_init__(self):
        if not 0.0 < self.q <= 1.0:
            raise DomainError(f"q must be in (0, 1], got {self.q}")
        if self.z < 0.0:
            raise DomainError(f"z must be non-negative, got {self.z}")
        if self.clip_norm <= 0.0:
            raise DomainError(f"clip_norm must be positive, got {self.clip_norm}")
        if not 0.0 < self.delta < 1.0:
            raise DomainError(f"delta must be in (0, 1), got {self.delta}")
        if self.clipping not in CLIPPING_STRATEGIES:
            raise DomainError(f"clipping must be one of {CLIPPING_STRATEGIES}")
        for name in ("local_epochs", "batch_size", "max_rounds",
                     "early_stop_patience", "eval_every"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be a positive integer")
        if self.lr <= 0.0:
            raise DomainError(f"lr must be positive, got {self.lr}")


@dataclass
class TrainingRoundLog:
    """Observability record for one round."""

    round: int
    sampled: int
    update_norm: float
    test_nll: float  # nan on rounds without an evaluation
    epsilon: float


def flat_ensemble_clip(deltas, clip_norm):
    """Scale each member's update to norm <= C / sqrt(N).

    The concatenation over N members then has norm <= C.
    """
    if clip_norm <= 0.0:
        raise DomainError("clip_norm must be positive")
    n = len(deltas)
    member_cap = clip_norm / math.sqrt(n)
    out = []
    for d in deltas:
        norm = float(np.linalg.norm(d.values))
        scale = min(1.0, member_cap / norm) if norm > 0.0 else 1.0
        out.append(nn.ParamVector(d.values * scale, d.layout))
    return out


def per_layer_ensemble_clip(deltas, clip_norm, layer_count):
    """Scale each layer segment to norm <= C / sqrt(N * L)."""
    if clip_norm <= 0.0:
        raise DomainError("clip_norm must be positive")
    n = len(deltas)
    for d in deltas:
        if d.layout.layer_count != layer_count:
            raise LayoutError(
                f"member has {d.layout.layer_count} layer segments, expected {layer_count}")
    seg_cap = clip_norm / math.sqrt(n * layer_count)
    out = []
    for d in deltas:
        values = d.values.copy()
        clipped = nn.ParamVector(values, d.layout)
        for l in range(layer_count):
            seg = clipped.layer_segment(l)
            norm = float(np.linalg.norm(seg))
            if norm > seg_cap:
                seg *= seg_cap / norm
        out.append(clipped)
    return out


def ensemble_clip(deltas, strategy, clip_norm):
    if strategy == "flat":
        return flat_ensemble_clip(deltas, clip_norm)
    if strategy == "per_layer":
        return per_layer_ensemble_clip(deltas, clip_norm, deltas[0].layout.layer_count)
    raise DomainError(f"unknown clipping strategy {strategy!r}")


def _local_update(X, Y, theta_start, cfg, arch, log_var_bounds):
    """Batched local GD with per-batch clip re-projection of the displacement."""
    thetas = [p.copy() for p in theta_start]
    n = X.shape[0]
    B = cfg.batch_size
    n_batches = (n + B - 1) // B
    for _ in range(cfg.local_epochs):
        for b in range(n_batches):
            xb = X[b * B:(b + 1) * B]
            yb = Y[b * B:(b + 1) * B]
            for i, theta in enumerate(thetas):
                loss, grad = nn.backward(arch, theta, xb, yb, log_var_bounds)
                if not math.isfinite(loss):
                    raise NumericalError(f"non-finite local loss {loss} (member {i})")
                theta.values -= cfg.lr * grad.values
            deltas = [nn.ParamVector(t.values - s.values, t.layout)
                      for t, s in zip(thetas, theta_start)]
            deltas = ensemble_clip(deltas, cfg.clipping, cfg.clip_norm)
            for t, s, d in zip(thetas, theta_start, deltas):
                t.values[...] = s.values + d.values
    return [nn.ParamVector(t.values - s.values, t.layout)
            for t, s in zip(thetas, theta_start)]


def ens_clip_gd(traj, theta_start, cfg, arch, normalizer, log_var_bounds):
    """Clipped model-ensemble update computed from one trajectory's data.

    Returns the per-member displacement (theta - theta_start); its
    concatenated norm is <= cfg.clip_norm by construction.
    """
    X, Y = model.training_arrays(traj, normalizer)
    return _local_update(X, Y, theta_start, cfg, arch, log_var_bounds)


def gaussian_mechanism(v, sigma, rng):
    """Add iid N(0, sigma^2) noise per coordinate; sigma = 0 is the identity."""
    if sigma < 0.0:
        raise DomainError(f"sigma must be non-negative, got {sigma}")
    v = np.asarray(v, dtype=np.float64)
    if sigma == 0.0:
        return v.copy()
    return v + sigma * rng.standard_normal(v.shape)


def gaussian_sigma(sensitivity, eps, delta):
    """One-shot Gaussian-mechanism calibration sigma = sqrt(2 ln(1.25/delta)) * S / eps."""
    if sensitivity < 0.0 or eps <= 0.0 or not 0.0 < delta < 1.0:
        raise DomainError("invalid mechanism parameters")
    return math.sqrt(2.0 * math.log(1.25 / delta)) * sensitivity / eps


def tdp_train(train, test, arch, n_members, cfg, rng, workers=1, noise_sink=None):
    """Train a trajectory-level DP Gaussian dynamics ensemble.

    Returns (ensemble, ledger, logs). Per-round per-trajectory updates are
    summed in trajectory-id order so results are bit-identical for any
    worker count. Rounds with an empty Poisson sample still add noise and
    still count toward the privacy budget. Early stopping monitors the NLL
    on the public test split every ``eval_every`` rounds and stops after
    ``early_stop_patience`` evaluations without improvement.
    """
    if train.num_trajectories < 1:
        raise DomainError("train split is empty")
    if set(train.ids) & set(test.ids):
        raise DomainError("train and test splits overlap")

    normalizer = model.fit_normalizer(train)
    ens = model.init_ensemble(arch, n_members, rng, normalizer)
    bounds = ens.log_var_bounds
    K = train.num_trajectories
    sigma = cfg.z * cfg.clip_norm / (cfg.q * K)

    test_X, test_Y = _dataset_arrays(test, normalizer)

    curve = None
    if cfg.z > 0.0:
        curve = accountant.rdp_curve(cfg.q, cfg.z)

    def eps_at(t):
        if t == 0:
            return 0.0
        if cfg.z == 0.0:
            return math.inf
        return curve.compose(t).to_epsilon(cfg.delta)

    layout = nn.layout_for(arch)
    dim = layout.size
    logs = []
    best_nll = math.inf
    bad_evals = 0
    rounds_done = 0

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for t in range(cfg.max_rounds):
            sampled = poisson_sample(train, cfg.q, rng)
            theta_start = [m.copy() for m in ens.members]

            def work(traj):
                return ens_clip_gd(traj, theta_start, cfg, arch, normalizer, bounds)

            if pool is not None and len(sampled) > 1:
                updates = list(pool.map(work, sampled))
            else:
                updates = [work(traj) for traj in sampled]

            # reduce in trajectory-id order for floating-point determinism
            order = np.argsort([traj.id for traj in sampled])
            avg = np.zeros(n_members * dim)
            for j in order:
                member_updates = updates[int(j)]
                for i in range(n_members):
                    avg[i * dim:(i + 1) * dim] += member_updates[i].values
            avg /= cfg.q * K

            update_norm = float(np.linalg.norm(avg))
            if sigma > 0.0:
                noise = sigma * rng.standard_normal(n_members * dim)
                if noise_sink is not None:
                    noise_sink.append(noise)
                avg += noise
            for i in range(n_members):
                ens.members[i].values += avg[i * dim:(i + 1) * dim]
            rounds_done = t + 1

            test_nll = math.nan
            if rounds_done % cfg.eval_every == 0:
                test_nll = model.ensemble_nll(ens, test_X, test_Y)
                if not math.isfinite(test_nll):
                    raise NumericalError(
                        f"non-finite test NLL {test_nll} at round {rounds_done}")
                if test_nll < best_nll - 1e-12:
                    best_nll = test_nll
                    bad_evals = 0
                else:
                    bad_evals += 1
            logs.append(TrainingRoundLog(
                round=rounds_done,
                sampled=len(sampled),
                update_norm=update_norm,
                test_nll=test_nll,
                epsilon=eps_at(rounds_done),
            ))
            if bad_evals >= cfg.early_stop_patience:
                break
    finally:
        if pool is not None:
            pool.shutdown()

    ledger = accountant.PrivacyLedger(
        q=cfg.q, z=cfg.z, delta=cfg.delta, rounds=rounds_done,
        epsilon=eps_at(rounds_done))
    return ens, ledger, logs


def _dataset_arrays(ds, normalizer):
    xs, ys = [], []
    for i in range(ds.num_trajectories):
        X, Y = model.training_arrays(ds.read_trajectory(i), normalizer)
        xs.append(X)
        ys.append(Y)
    return np.vstack(xs), np.vstack(ys)
