"""Soft Actor-Critic trained exclusively on pessimistic-model rollouts.

The actor is a squashed-Gaussian policy (tanh onto the action box), the
critics are twin Q-networks with polyak-averaged targets, and the entropy
temperature is tuned automatically toward a target entropy. All gradients
are exact and flow through the same MLP substrate as the dynamics models;
optimizer steps use Adam. The replay buffer only ever holds transitions
generated by the pessimistic model, so policy optimization is pure
post-processing of the private model.
"""

import json
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import envs, model, nn
from .data import Transition, MAGIC
from .errors import DomainError
from .model import _arch_from_json, _arch_to_json, _read_container, _take_f64

__all__ = [
    "SacConfig",
    "SacPolicy",
    "SacCritics",
    "ReplayBuffer",
    "EvalResult",
    "EpochMetrics",
    "LOG_STD_BOUNDS",
    "init_policy",
    "init_critics",
    "act",
    "sample_with_log_prob",
    "q_target",
    "critic_loss_and_grads",
    "actor_loss_and_grad",
    "alpha_grad",
    "sac_update",
    "polyak_update",
    "model_rollout",
    "evaluate",
    "sac_train",
    "save_policy",
    "load_policy",
]

logger = logging.getLogger("primorl.sac")

LOG_STD_BOUNDS = (-20.0, 2.0)
_LOG_2PI = math.log(2.0 * math.pi)
_ADAM_B1, _ADAM_B2, _ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class SacConfig:
    lr: float = 3e-4
    batch_size: int = 256
    gamma: float = 0.99
    polyak: float = 0.995
    rollout_horizon: int = 30
    epochs: int = 30
    steps_per_epoch: int = 1000
    update_every: int = 1
    eval_episodes: int = 10
    warmup_steps: int = 1000
    replay_capacity: int = 1_000_000
    hidden: tuple = (64, 64)
    target_entropy: float = -3.0
    init_alpha: float = 1.0
    rollout_batch: int = 25  # parallel model rollouts per macro-step

    def __post_init__(self):
        if self.lr <= 0:
            raise DomainError("lr must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise DomainError("gamma must be in [0, 1)")
        if not 0.0 < self.polyak < 1.0:
            raise DomainError("polyak must be in (0, 1)")
        for name in ("batch_size", "rollout_horizon", "epochs", "steps_per_epoch",
                     "update_every", "eval_episodes", "replay_capacity",
                     "rollout_batch"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be a positive integer")
        if self.warmup_steps < 0:
            raise DomainError("warmup_steps must be non-negative")
        if self.init_alpha <= 0:
            raise DomainError("init_alpha must be positive")
        object.__setattr__(self, "hidden", tuple(self.hidden))


class _Adam:
    """Adam state for one flat parameter vector."""

    def __init__(self, size):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.step = 0

    def update(self, values, grad, lr):
        self.step += 1
        self.m += (1.0 - _ADAM_B1) * (grad - self.m)
        self.v += (1.0 - _ADAM_B2) * (grad * grad - self.v)
        m_hat = self.m / (1.0 - _ADAM_B1**self.step)
        v_hat = self.v / (1.0 - _ADAM_B2**self.step)
        values -= lr * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)


class SacPolicy:
    """Squashed-Gaussian actor emitting (mean, log_std) before the tanh."""

    def __init__(self, arch, params, action_low, action_high,
                 log_std_bounds=LOG_STD_BOUNDS):
        self.arch = arch
        self.params = params
        self.action_low = np.asarray(action_low, dtype=np.float64)
        self.action_high = np.asarray(action_high, dtype=np.float64)
        self.log_std_bounds = log_std_bounds
        self.center = 0.5 * (self.action_high + self.action_low)
        self.scale = 0.5 * (self.action_high - self.action_low)
        self.adam = _Adam(len(params))

    @property
    def act_dim(self):
        return self.arch.output_dim // 2

    @property
    def obs_dim(self):
        return self.arch.input_dim


class SacCritics:
    """Twin Q-networks, their polyak targets, and the entropy temperature."""

    def __init__(self, arch, q1, q2, polyak, target_entropy, init_alpha):
        self.arch = arch
        self.q1 = q1
        self.q2 = q2
        self.q1_targ = q1.copy()
        self.q2_targ = q2.copy()
        self.polyak = polyak
        self.target_entropy = target_entropy
        self.log_alpha = math.log(init_alpha)
        self.adam_q1 = _Adam(len(q1))
        self.adam_q2 = _Adam(len(q2))
        self.adam_alpha = _Adam(1)

    @property
    def alpha(self):
        return math.exp(self.log_alpha)


def init_policy(spec, hidden, rng) -> SacPolicy:
    arch = nn.MlpArch(spec.obs_dim, 2 * spec.act_dim, tuple(hidden))
    return SacPolicy(arch, nn.init_params(arch, rng),
                     spec.action_low, spec.action_high)


def init_critics(spec, hidden, rng, polyak, target_entropy, init_alpha) -> SacCritics:
    arch = nn.MlpArch(spec.obs_dim + spec.act_dim, 1, tuple(hidden))
    return SacCritics(arch, nn.init_params(arch, rng), nn.init_params(arch, rng),
                      polyak, target_entropy, init_alpha)


def _heads(policy, S, need_cache=False):
    """Actor forward; returns (mu, log_std, raw_log_std, cache)."""
    if need_cache:
        Y, cache = nn.forward_cached(policy.arch, policy.params, S)
    else:
        Y = nn.forward(policy.arch, policy.params, np.asarray(S, dtype=np.float64))
        cache = None
    m = policy.act_dim
    mu = Y[..., :m]
    raw = Y[..., m:]
    log_std = nn.soft_clamp(raw, *policy.log_std_bounds)
    return mu, log_std, raw, cache


def _log1m_tanh_sq(u):
    # log(1 - tanh(u)^2), stable for large |u|
    return 2.0 * (math.log(2.0) - u - nn._softplus(-2.0 * u))


def _squash(policy, u):
    return policy.center + policy.scale * np.tanh(u)


def _sample(policy, S, eps, need_cache=False):
    """Reparameterized squashed sample and its log-density (batched)."""
    mu, log_std, raw, cache = _heads(policy, S, need_cache)
    std = np.exp(log_std)
    u = mu + std * eps
    tanh_u = np.tanh(u)
    a = policy.center + policy.scale * tanh_u
    logp = np.sum(
        -0.5 * eps * eps - 0.5 * _LOG_2PI - log_std
        - np.log(policy.scale) - _log1m_tanh_sq(u),
        axis=-1,
    )
    return a, logp, (mu, log_std, raw, std, u, tanh_u, cache)


def act(policy, s, rng=None, deterministic=False):
    """One action for one state; stochastic mode needs an rng."""
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise DomainError("non-finite state")
    if deterministic:
        mu, _, _, _ = _heads(policy, s)
        return _squash(policy, mu)
    eps = rng.standard_normal(policy.act_dim)
    a, _, _ = _sample(policy, s[None, :], eps[None, :])
    return a[0]


def sample_with_log_prob(policy, s, rng):
    """Stochastic action plus its exact squashed log-density."""
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise DomainError("non-finite state")
    eps = rng.standard_normal(policy.act_dim)
    a, logp, _ = _sample(policy, s[None, :], eps[None, :])
    return a[0], float(logp[0])


def _q_forward(critics, params, S, A, need_cache=False):
    X = np.hstack([S, A])
    if need_cache:
        Y, cache = nn.forward_cached(critics.arch, params, X)
        return Y[:, 0], cache
    return nn.forward(critics.arch, params, X)[:, 0], None


def q_target(critics, policy, r, s_next, d, gamma, alpha, rng):
    """y = r + gamma (1 - d) (min_i Q_targ_i(s', a') - alpha log pi(a'|s'))."""
    s_next = np.asarray(s_next, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    eps = rng.standard_normal((s_next.shape[0], policy.act_dim))
    a2, logp2, _ = _sample(policy, s_next, eps)
    q1t, _ = _q_forward(critics, critics.q1_targ, s_next, a2)
    q2t, _ = _q_forward(critics, critics.q2_targ, s_next, a2)
    return r + gamma * (1.0 - d) * (np.minimum(q1t, q2t) - alpha * logp2)


def critic_loss_and_grads(critics, S, A, y):
    """MSE losses of both critics against fixed targets and their gradients."""
    B = S.shape[0]
    out = []
    for params in (critics.q1, critics.q2):
        q, cache = _q_forward(critics, params, S, A, need_cache=True)
        err = q - y
        loss = float(np.mean(err * err))
        dY = (2.0 * err / B)[:, None]
        grad, _ = nn.vjp(critics.arch, params, cache, dY)
        out.append((loss, grad))
    return out[0][0], out[0][1], out[1][0], out[1][1]


def actor_loss_and_grad(policy, critics, S, alpha, eps):
    """Loss mean(alpha log pi - min Q) and its exact actor gradient.

    ``eps`` is the fixed reparameterization draw, shape (B, act_dim); a
    finite-difference check with the same eps reproduces the gradient.
    """
    S = np.asarray(S, dtype=np.float64)
    B = S.shape[0]
    m = policy.act_dim
    a, logp, aux = _sample(policy, S, eps, need_cache=True)
    mu, log_std, raw, std, u, tanh_u, cache = aux

    q1, c1 = _q_forward(critics, critics.q1, S, a, need_cache=True)
    q2, c2 = _q_forward(critics, critics.q2, S, a, need_cache=True)
    pick1 = q1 <= q2
    qmin = np.where(pick1, q1, q2)
    loss = float(np.mean(alpha * logp - qmin))

    # dloss/dA through the selected critic's input gradient
    dY1 = (np.where(pick1, -1.0, 0.0) / B)[:, None]
    dY2 = (np.where(pick1, 0.0, -1.0) / B)[:, None]
    _, dX1 = nn.vjp(critics.arch, critics.q1, c1, dY1)
    _, dX2 = nn.vjp(critics.arch, critics.q2, c2, dY2)
    obs_dim = S.shape[1]
    dA = dX1[:, obs_dim:] + dX2[:, obs_dim:]

    # chain through a = center + scale * tanh(u), u = mu + std * eps, and
    # the log-density terms: dlogp/du = 2 tanh(u), dlogp/dlog_std = -1 (+ u path)
    coef_logp = alpha / B
    da_du = policy.scale * (1.0 - tanh_u * tanh_u)
    dL_du = coef_logp * 2.0 * tanh_u + dA * da_du
    dmu = dL_du
    dlog_std = dL_du * std * eps - coef_logp
    dY = np.empty((B, 2 * m))
    dY[:, :m] = dmu
    dY[:, m:] = dlog_std * nn.soft_clamp_grad(raw, *policy.log_std_bounds)
    grad, _ = nn.vjp(policy.arch, policy.params, cache, dY)
    return loss, grad, float(np.mean(logp))


def alpha_grad(mean_logp, target_entropy):
    """Gradient of the temperature loss -log_alpha * (log pi + H_target)
    w.r.t. log_alpha.

    Descent on it raises alpha while policy entropy (-log pi) sits below
    the target and lowers alpha once entropy exceeds it.
    """
    return -(mean_logp + target_entropy)


def polyak_update(critics):
    rho = critics.polyak
    critics.q1_targ.values *= rho
    critics.q1_targ.values += (1.0 - rho) * critics.q1.values
    critics.q2_targ.values *= rho
    critics.q2_targ.values += (1.0 - rho) * critics.q2.values


def sac_update(critics, policy, batch, cfg, rng):
    """One SAC step: critics, actor, temperature, then target networks.

    Mutates and returns (critics, policy); also returns a stats dict.
    """
    S, A, r, S2, d = batch
    alpha = critics.alpha
    y = q_target(critics, policy, r, S2, d, cfg.gamma, alpha, rng)
    l1, g1, l2, g2 = critic_loss_and_grads(critics, S, A, y)
    if not (math.isfinite(l1) and math.isfinite(l2)):
        raise DomainError(f"non-finite critic loss ({l1}, {l2})")
    critics.adam_q1.update(critics.q1.values, g1.values, cfg.lr)
    critics.adam_q2.update(critics.q2.values, g2.values, cfg.lr)

    eps = rng.standard_normal((S.shape[0], policy.act_dim))
    actor_loss, actor_g, mean_logp = actor_loss_and_grad(policy, critics, S, alpha, eps)
    if not math.isfinite(actor_loss):
        raise DomainError(f"non-finite actor loss {actor_loss}")
    policy.adam.update(policy.params.values, actor_g.values, cfg.lr)

    g_alpha = np.array([alpha_grad(mean_logp, critics.target_entropy)])
    vals = np.array([critics.log_alpha])
    critics.adam_alpha.update(vals, g_alpha, cfg.lr)
    critics.log_alpha = float(vals[0])

    polyak_update(critics)
    return critics, policy, {
        "critic_loss": 0.5 * (l1 + l2),
        "actor_loss": actor_loss,
        "alpha": critics.alpha,
        "entropy": -mean_logp,
    }


class ReplayBuffer:
    """Bounded FIFO of model-generated transitions."""

    def __init__(self, capacity, obs_dim, act_dim):
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, obs_dim))
        self.a = np.zeros((capacity, act_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, obs_dim))
        self.d = np.zeros(capacity)
        self.ptr = 0
        self.size = 0

    def add(self, s, a, r, s2, d):
        i = self.ptr
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.s2[i] = s2
        self.d[i] = d
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng, n):
        idx = rng.integers(0, self.size, size=n)
        return (self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.d[idx])


def model_rollout(pmdp, policy, rng):
    """One stochastic rollout of at most H steps inside the pessimistic MDP.

    Starts from the public initial-state distribution; done is set only at
    the true task horizon, never at H-truncation. A non-finite model output
    truncates the rollout at the offending step.
    """
    obs = np.asarray(pmdp.initial_source(rng), dtype=np.float64)
    transitions = []
    for t in range(pmdp.horizon):
        a = act(policy, obs, rng)
        s2, r_raw = model.sample_transition(pmdp.ensemble, obs, a, rng)
        if not (np.all(np.isfinite(s2)) and math.isfinite(r_raw)):
            logger.warning("non-finite model output at rollout step %d; truncating", t)
            break
        r = r_raw - pmdp.lam * model.uncertainty(pmdp, obs, a)
        done = t + 1 >= pmdp.episode_length
        transitions.append(Transition(obs, a, float(r), s2, bool(done)))
        obs = s2
        if done:
            break
    return transitions


@dataclass
class EvalResult:
    returns: list
    mean_return: float
    normalized_returns: list
    mean_normalized: float


@dataclass
class EpochMetrics:
    epoch: int
    mean_return: float
    std_return: float
    normalized_return: float


def evaluate(spec, policy, episodes, seed) -> EvalResult:
    """Deterministic-policy returns in the true environment."""
    if episodes < 1:
        raise DomainError("episodes must be at least 1")
    returns = []
    for i in range(episodes):
        state = envs.reset(spec, seed + i)
        total = 0.0
        done = False
        while not done:
            obs = envs.observe(spec, state)
            a = act(policy, obs, deterministic=True)
            state, r, done = envs.step(spec, state, a)
            total += r
        returns.append(total)
    normalized = [envs.normalize_return(spec, r) for r in returns]
    return EvalResult(returns, float(np.mean(returns)),
                      normalized, float(np.mean(normalized)))


def sac_train(pmdp, eval_spec, cfg, seed):
    """Optimize a SAC policy purely on pessimistic-model data.

    Returns (policy, critics, per-epoch metrics). ``rollout_batch``
    model rollouts advance in lockstep so ensemble predictions are
    batched; gradient updates keep the one-update-per-model-step budget.
    The loop holds no reference to any offline dataset; rollout starts
    are drawn from the task's public initial-state distribution.
    """
    ss = np.random.SeedSequence(seed)
    s_actor, s_critic, s_roll, s_upd, s_eval = ss.spawn(5)
    policy = init_policy(eval_spec, cfg.hidden, np.random.default_rng(s_actor))
    critics = init_critics(eval_spec, cfg.hidden, np.random.default_rng(s_critic),
                           cfg.polyak, cfg.target_entropy, cfg.init_alpha)
    roll_rng = np.random.default_rng(s_roll)
    upd_rng = np.random.default_rng(s_upd)
    eval_base = int(np.random.default_rng(s_eval).integers(0, 2**31))

    R = cfg.rollout_batch
    buf = ReplayBuffer(cfg.replay_capacity, policy.obs_dim, policy.act_dim)
    obs = np.stack([np.asarray(pmdp.initial_source(roll_rng), dtype=np.float64)
                    for _ in range(R)])
    lens = np.zeros(R, dtype=int)
    total_steps = 0
    updates_due = 0.0
    metrics = []

    for epoch in range(1, cfg.epochs + 1):
        steps_this_epoch = 0
        while steps_this_epoch < cfg.steps_per_epoch:
            if total_steps < cfg.warmup_steps:
                a = roll_rng.uniform(policy.action_low, policy.action_high,
                                     size=(R, policy.act_dim))
            else:
                eps = roll_rng.standard_normal((R, policy.act_dim))
                a, _, _ = _sample(policy, obs, eps)
            means, variances = model.predict_batch(pmdp.ensemble, obs, a)
            s2, r_raw = model.sample_from_predictions(obs, means, variances, roll_rng)
            u = model.uncertainty_from_predictions(pmdp.estimator, means, variances)
            r = r_raw - pmdp.lam * u
            lens += 1
            bad = ~(np.all(np.isfinite(s2), axis=1) & np.isfinite(r))
            if bad.any():
                logger.warning("non-finite model output in %d rollouts; resetting",
                               int(bad.sum()))
            for i in range(R):
                if bad[i]:
                    continue
                done = lens[i] >= pmdp.episode_length
                buf.add(obs[i], a[i], r[i], s2[i], float(done))
            obs = s2
            for i in range(R):
                if bad[i] or lens[i] >= pmdp.episode_length or lens[i] >= pmdp.horizon:
                    obs[i] = pmdp.initial_source(roll_rng)
                    lens[i] = 0
            total_steps += R
            steps_this_epoch += R
            if total_steps >= cfg.warmup_steps and buf.size >= cfg.batch_size:
                updates_due += R / cfg.update_every
                while updates_due >= 1.0:
                    batch = buf.sample(upd_rng, cfg.batch_size)
                    sac_update(critics, policy, batch, cfg, upd_rng)
                    updates_due -= 1.0
        res = evaluate(eval_spec, policy, cfg.eval_episodes, eval_base + 1000 * epoch)
        metrics.append(EpochMetrics(
            epoch=epoch,
            mean_return=res.mean_return,
            std_return=float(np.std(res.returns)),
            normalized_return=res.mean_normalized,
        ))
    return policy, critics, metrics


_CKPT_VERSION = 1


def save_policy(policy, critics, path, meta=None):
    """Checkpoint container with actor, critics, targets, temperature."""
    header = {
        "version": _CKPT_VERSION,
        "kind": "policy",
        "actor_arch": _arch_to_json(policy.arch),
        "critic_arch": _arch_to_json(critics.arch),
        "action_low": list(map(float, policy.action_low)),
        "action_high": list(map(float, policy.action_high)),
        "log_std_bounds": list(policy.log_std_bounds),
        "polyak": critics.polyak,
        "target_entropy": critics.target_entropy,
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    arrays = [policy.params.values, critics.q1.values, critics.q2.values,
              critics.q1_targ.values, critics.q2_targ.values,
              np.array([critics.log_alpha])]
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_policy(path):
    """Restore (policy, critics) from a checkpoint."""
    header, data, off = _read_container(path, "policy")
    actor_arch = _arch_from_json(header["actor_arch"])
    critic_arch = _arch_from_json(header["critic_arch"])
    a_layout = nn.layout_for(actor_arch)
    c_layout = nn.layout_for(critic_arch)
    vals, off = _take_f64(data, off, a_layout.size, "actor")
    policy = SacPolicy(actor_arch, nn.ParamVector(vals, a_layout),
                       np.array(header["action_low"]),
                       np.array(header["action_high"]),
                       tuple(header["log_std_bounds"]))
    parts = []
    for name in ("q1", "q2", "q1_targ", "q2_targ"):
        vals, off = _take_f64(data, off, c_layout.size, name)
        parts.append(nn.ParamVector(vals, c_layout))
    log_alpha, off = _take_f64(data, off, 1, "log_alpha")
    critics = SacCritics(critic_arch, parts[0], parts[1],
                         header["polyak"], header["target_entropy"], 1.0)
    critics.q1_targ = parts[2]
    critics.q2_targ = parts[3]
    critics.log_alpha = float(log_alpha[0])
    return policy, critics
