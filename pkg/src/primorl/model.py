"""Gaussian dynamics ensemble, uncertainty estimators, pessimistic MDP.

Each ensemble member maps a z-scored (s, a) input to a diagonal Gaussian
over (delta_s, r). The pessimistic MDP wraps the ensemble with a reward
penalty proportional to an uncertainty estimate and is the only
environment the policy optimizer ever sees.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import nn
from .data import MAGIC
from .errors import (
    BadMagicError,
    DatasetFormatError,
    DomainError,
    TruncatedFileError,
    VersionMismatchError,
    WrongKindError,
)

__all__ = [
    "Normalizer",
    "GaussianDynamicsEnsemble",
    "PessimisticMDP",
    "ESTIMATORS",
    "DEFAULT_LOG_VAR_BOUNDS",
    "predict",
    "predict_members",
    "sample_transition",
    "u_ma",
    "u_mpd",
    "uncertainty",
    "penalized_reward",
    "fit_normalizer",
    "training_arrays",
    "ensemble_nll",
    "save_ensemble",
    "load_ensemble",
]

DEFAULT_LOG_VAR_BOUNDS = (-10.0, 0.5)
ESTIMATORS = ("max_aleatoric", "max_pairwise_diff")


@dataclass
class Normalizer:
    """Per-feature z-scoring statistics fit on training inputs."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, inputs):
        inputs = np.asarray(inputs, dtype=np.float64)
        mean = inputs.mean(axis=0)
        std = inputs.std(axis=0)
        std[std < 1e-8] = 1.0
        return cls(mean, std)

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), np.ones(dim))

    def apply(self, x):
        return (x - self.mean) / self.std


@dataclass
class GaussianDynamicsEnsemble:
    """N swish MLPs with shared architecture over (delta_s, r) targets."""

    arch: nn.MlpArch
    members: list
    normalizer: Normalizer
    log_var_bounds: tuple = DEFAULT_LOG_VAR_BOUNDS

    def __post_init__(self):
        if len(self.members) < 1:
            raise DomainError("ensemble needs at least one member")
        layout = nn.layout_for(self.arch)
        for p in self.members:
            if p.layout.size != layout.size:
                raise DomainError("all members must share the architecture")
        lo, hi = self.log_var_bounds
        if not lo < hi:
            raise DomainError("log_var_bounds must satisfy lo < hi")
        if self.arch.output_dim % 2 != 0:
            raise DomainError("output_dim must be even (mean and log-var heads)")

    @property
    def n_members(self):
        return len(self.members)

    @property
    def target_dim(self):
        """Dimension of (delta_s, r), i.e. obs_dim + 1."""
        return self.arch.output_dim // 2

    @property
    def obs_dim(self):
        return self.target_dim - 1

    @property
    def act_dim(self):
        return self.arch.input_dim - self.obs_dim


def init_ensemble(arch, n_members, rng, normalizer=None,
                  log_var_bounds=DEFAULT_LOG_VAR_BOUNDS) -> GaussianDynamicsEnsemble:
    members = [nn.init_params(arch, rng) for _ in range(n_members)]
    if normalizer is None:
        normalizer = Normalizer.identity(arch.input_dim)
    return GaussianDynamicsEnsemble(arch, members, normalizer, log_var_bounds)


def _member_output(ens, member, x_norm):
    y = nn.forward(ens.arch, member, x_norm)
    k = ens.target_dim
    mean = y[..., :k]
    log_var = nn.soft_clamp(y[..., k:], *ens.log_var_bounds)
    return mean, np.exp(log_var)


def _input(ens, s, a):
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    x = np.concatenate([s, a], axis=-1)
    if x.shape[-1] != ens.arch.input_dim:
        raise DomainError(
            f"(s, a) must concatenate to size {ens.arch.input_dim}, got {x.shape[-1]}")
    if not np.all(np.isfinite(x)):
        raise DomainError("non-finite model input")
    return ens.normalizer.apply(x)


def predict(ens, s, a):
    """Per-member (mean, var) over (delta_s, r) for one state-action pair."""
    x = _input(ens, s, a)
    return [_member_output(ens, m, x) for m in ens.members]


def predict_members(ens, s, a):
    """Stacked member means and variances, shape (N, target_dim)."""
    preds = predict(ens, s, a)
    means = np.stack([m for m, _ in preds])
    variances = np.stack([v for _, v in preds])
    return means, variances


def predict_batch(ens, S, A):
    """All-member predictions for a batch: (means, vars) of shape (N, B, k)."""
    x = _input(ens, np.asarray(S, dtype=np.float64), np.asarray(A, dtype=np.float64))
    means, variances = [], []
    for m in ens.members:
        mu, var = _member_output(ens, m, x)
        means.append(mu)
        variances.append(var)
    return np.stack(means), np.stack(variances)


def sample_from_predictions(S, means, variances, rng):
    """Per-row member choice and Gaussian draw; returns (s_next, r) batches."""
    n, b, k = means.shape
    idx = rng.integers(n, size=b)
    rows = np.arange(b)
    mu = means[idx, rows, :]
    var = variances[idx, rows, :]
    draw = mu + np.sqrt(var) * rng.standard_normal((b, k))
    return np.asarray(S, dtype=np.float64) + draw[:, :-1], draw[:, -1]


def uncertainty_from_predictions(estimator, means, variances):
    """Batched u(s, a) from predict_batch output; returns shape (B,)."""
    if estimator == "max_aleatoric":
        return np.max(np.sqrt(np.sum(variances**2, axis=2)), axis=0)
    if means.shape[0] == 1:
        return np.zeros(means.shape[1])
    diffs = means[:, None, :, :] - means[None, :, :, :]
    return np.max(np.sqrt(np.sum(diffs**2, axis=3)), axis=(0, 1))


def sample_transition(ens, s, a, rng):
    """Draw (s_next, r) from one uniformly chosen member's Gaussian."""
    x = _input(ens, s, a)
    idx = int(rng.integers(ens.n_members))
    mean, var = _member_output(ens, ens.members[idx], x)
    draw = mean + np.sqrt(var) * rng.standard_normal(mean.shape)
    s = np.asarray(s, dtype=np.float64)
    return s + draw[..., :-1], float(draw[..., -1])


def u_ma(ens, s, a):
    """Max over members of the Frobenius norm of the diagonal covariance."""
    _, variances = predict_members(ens, s, a)
    return float(np.max(np.sqrt(np.sum(variances**2, axis=-1))))


def u_mpd(ens, s, a):
    """Max pairwise Euclidean distance between member mean predictions."""
    means, _ = predict_members(ens, s, a)
    if ens.n_members == 1:
        return 0.0
    diffs = means[:, None, :] - means[None, :, :]
    return float(np.max(np.sqrt(np.sum(diffs**2, axis=-1))))


@dataclass
class PessimisticMDP:
    """The learned model with uncertainty-penalized reward.

    ``initial_source(rng)`` draws start observations from the task's
    public initial-state distribution; ``episode_length`` carries the true
    task horizon so rollouts can emit real terminal flags.
    """

    ensemble: GaussianDynamicsEnsemble
    estimator: str
    lam: float
    horizon: int
    initial_source: object
    episode_length: int

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise DomainError(f"estimator must be one of {ESTIMATORS}")
        if self.lam < 0:
            raise DomainError("penalty weight must be non-negative")
        if self.horizon < 1:
            raise DomainError("rollout horizon must be at least 1")


def uncertainty(pmdp, s, a):
    if pmdp.estimator == "max_aleatoric":
        return u_ma(pmdp.ensemble, s, a)
    return u_mpd(pmdp.ensemble, s, a)


def make_pessimistic_mdp(ens, spec, estimator, lam, horizon) -> PessimisticMDP:
    """Wrap an ensemble for a task; rollout starts come from the task's
    public initial-state distribution."""
    from . import envs  # local import; envs never imports model

    def initial_source(rng):
        state = envs.reset(spec, int(rng.integers(0, 2**62)))
        return envs.observe(spec, state)

    return PessimisticMDP(
        ensemble=ens,
        estimator=estimator,
        lam=lam,
        horizon=horizon,
        initial_source=initial_source,
        episode_length=spec.episode_length,
    )


def penalized_reward(pmdp, s, a, r_hat):
    """r_hat - lambda * u(s, a); the reward the policy actually sees."""
    if not np.isfinite(r_hat):
        raise DomainError("non-finite reward estimate")
    return float(r_hat - pmdp.lam * uncertainty(pmdp, s, a))


def fit_normalizer(train_ds) -> Normalizer:
    """Z-scoring statistics over every (s, a) input of the train split."""
    blocks = []
    for i in range(train_ds.num_trajectories):
        t = train_ds.read_trajectory(i)
        blocks.append(np.hstack([t.obs, t.act]).astype(np.float64))
    return Normalizer.fit(np.vstack(blocks))


def training_arrays(traj, normalizer):
    """(X, Y) for one trajectory: X = normalized (s, a), Y = (s' - s, r)."""
    obs = traj.obs.astype(np.float64)
    x = normalizer.apply(np.hstack([obs, traj.act.astype(np.float64)]))
    y = np.hstack([
        traj.next_obs.astype(np.float64) - obs,
        traj.rew.astype(np.float64)[:, None],
    ])
    return np.ascontiguousarray(x), np.ascontiguousarray(y)


def ensemble_nll(ens, X, Y):
    """Mean Gaussian NLL over members and samples (model-quality metric)."""
    k = ens.target_dim
    total = 0.0
    for member in ens.members:
        out = nn.forward(ens.arch, member, X)
        mean = out[:, :k]
        lv = nn.soft_clamp(out[:, k:], *ens.log_var_bounds)
        r = Y - mean
        total += float(0.5 * np.mean(np.sum(r * r * np.exp(-lv) + lv, axis=1)))
    return total / ens.n_members


_CKPT_VERSION = 1


def _write_container(path, header, arrays):
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_container(path, expected_kind):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12:
        raise TruncatedFileError("file too short for magic and header length", len(data))
    if data[:8] != MAGIC:
        raise BadMagicError(f"bad magic {data[:8]!r}", 0)
    (header_len,) = struct.unpack_from("<I", data, 8)
    if 12 + header_len > len(data):
        raise TruncatedFileError("declared header length overruns file", 8)
    try:
        header = json.loads(data[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"header is not valid JSON ({exc})", 12) from None
    if header.get("version") != _CKPT_VERSION:
        raise VersionMismatchError(f"unsupported version {header.get('version')!r}", 12)
    if header.get("kind") != expected_kind:
        raise WrongKindError(
            f"container kind {header.get('kind')!r}, expected {expected_kind!r}", 12)
    return header, data, 12 + header_len


def _take_f64(data, off, count, what):
    nbytes = count * 8
    if off + nbytes > len(data):
        raise TruncatedFileError(f"{what} block truncated", off)
    arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).copy()
    return arr, off + nbytes


def _arch_to_json(arch):
    return {
        "input_dim": arch.input_dim,
        "output_dim": arch.output_dim,
        "hidden_layers": list(arch.hidden_layers),
        "activation": arch.activation,
        "weight_decay": arch.weight_decay,
    }


def _arch_from_json(d):
    return nn.MlpArch(
        input_dim=d["input_dim"],
        output_dim=d["output_dim"],
        hidden_layers=tuple(d["hidden_layers"]),
        activation=d["activation"],
        weight_decay=d["weight_decay"],
    )


def save_ensemble(ens, path, meta=None):
    """Checkpoint the ensemble (bit-exact float64 round trip)."""
    header = {
        "version": _CKPT_VERSION,
        "kind": "ensemble",
        "arch": _arch_to_json(ens.arch),
        "n_members": ens.n_members,
        "log_var_bounds": list(ens.log_var_bounds),
        "input_dim": ens.arch.input_dim,
        "meta": meta or {},
    }
    arrays = [ens.normalizer.mean, ens.normalizer.std]
    arrays += [m.values for m in ens.members]
    _write_container(path, header, arrays)


def load_ensemble(path) -> GaussianDynamicsEnsemble:
    header, data, off = _read_container(path, "ensemble")
    arch = _arch_from_json(header["arch"])
    layout = nn.layout_for(arch)
    dim = header["input_dim"]
    mean, off = _take_f64(data, off, dim, "normalizer mean")
    std, off = _take_f64(data, off, dim, "normalizer std")
    members = []
    for i in range(header["n_members"]):
        vals, off = _take_f64(data, off, layout.size, f"member {i}")
        members.append(nn.ParamVector(vals, layout))
    if off != len(data):
        raise DatasetFormatError(f"{len(data) - off} trailing bytes", off)
    return GaussianDynamicsEnsemble(
        arch, members, Normalizer(mean, std), tuple(header["log_var_bounds"]))
