"""Native continuous-control tasks and the true-MDP evaluation interface.

All three tasks are deterministic fixed-horizon MDPs exposed through a
stateless API: specs are immutable, states are passed in and out, so any
number of rollouts can run in parallel with independent RNG streams.
"""

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

__all__ = [
    "EnvId",
    "EnvSpec",
    "EnvState",
    "make_spec",
    "reset",
    "step",
    "observe",
    "normalize_return",
]


class EnvId(str, enum.Enum):
    PENDULUM = "pendulum"
    CARTPOLE_BALANCE = "cartpole_balance"
    CARTPOLE_SWINGUP = "cartpole_swingup"


@dataclass(frozen=True)
class EnvSpec:
    id: EnvId
    obs_dim: int
    act_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    episode_length: int
    reward_range: tuple


# Pendulum: classic inverted-pendulum ODE.
_P_G = 10.0
_P_M = 1.0
_P_L = 1.0
_P_DT = 0.05
_P_MAX_TORQUE = 2.0
_P_MAX_SPEED = 8.0
_P_MAX_COST = math.pi**2 + 0.1 * _P_MAX_SPEED**2 + 0.001 * _P_MAX_TORQUE**2

# Cart-pole: planar cart + pole, semi-implicit Euler; 5 physics substeps of
# 0.005 s per 0.025 s control step.
_C_G = 9.8
_C_MASS_CART = 1.0
_C_MASS_POLE = 0.1
_C_HALF_LEN = 0.5
_C_FORCE_MAG = 10.0
_C_DT = 0.005
_C_SUBSTEPS = 5


def make_spec(env_id) -> EnvSpec:
    env_id = EnvId(env_id)
    if env_id is EnvId.PENDULUM:
        return EnvSpec(
            id=env_id,
            obs_dim=3,
            act_dim=1,
            action_low=np.array([-2.0]),
            action_high=np.array([2.0]),
            episode_length=200,
            reward_range=(-_P_MAX_COST, 0.0),
        )
    return EnvSpec(
        id=env_id,
        obs_dim=5,
        act_dim=1,
        action_low=np.array([-1.0]),
        action_high=np.array([1.0]),
        episode_length=1000,
        reward_range=(0.0, 1.0),
    )


@dataclass
class EnvState:
    """Internal coordinates plus the step counter; never exposed to policies."""

    physical: np.ndarray
    step_count: int = 0


def reset(spec, seed) -> EnvState:
    """Draw an initial state from the task's initial distribution."""
    rng = np.random.default_rng(seed)
    if spec.id is EnvId.PENDULUM:
        theta = rng.uniform(-math.pi, math.pi)
        theta_dot = rng.uniform(-1.0, 1.0)
        return EnvState(np.array([theta, theta_dot]))
    x = rng.uniform(-0.05, 0.05)
    x_dot = rng.uniform(-0.05, 0.05)
    theta_dot = rng.uniform(-0.05, 0.05)
    if spec.id is EnvId.CARTPOLE_BALANCE:
        theta = rng.uniform(-0.05, 0.05)
    else:
        theta = math.pi + rng.uniform(-0.05, 0.05)
    return EnvState(np.array([x, x_dot, theta, theta_dot]))


def _angle_normalize(theta):
    return ((theta + math.pi) % (2.0 * math.pi)) - math.pi


def _clamp_action(spec, action):
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.shape[0] != spec.act_dim:
        raise DomainError(f"action must have size {spec.act_dim}, got {a.shape[0]}")
    if not np.all(np.isfinite(a)):
        raise DomainError("non-finite action")
    return np.clip(a, spec.action_low, spec.action_high)


def step(spec, state, action):
    """Advance one control step; returns (next_state, reward, done).

    Out-of-range finite actions are clamped; non-finite actions are
    rejected. done is purely the horizon rule: these tasks never
    terminate early.
    """
    a = _clamp_action(spec, action)
    if spec.id is EnvId.PENDULUM:
        nxt, reward = _pendulum_step(state.physical, float(a[0]))
    else:
        nxt, reward = _cartpole_step(state.physical, float(a[0]))
    new_count = state.step_count + 1
    return EnvState(nxt, new_count), reward, new_count >= spec.episode_length


def _pendulum_step(phys, u):
    theta, theta_dot = phys
    cost = _angle_normalize(theta) ** 2 + 0.1 * theta_dot**2 + 0.001 * u**2
    theta_dot = theta_dot + (
        3.0 * _P_G / (2.0 * _P_L) * math.sin(theta)
        + 3.0 / (_P_M * _P_L**2) * u
    ) * _P_DT
    theta_dot = min(max(theta_dot, -_P_MAX_SPEED), _P_MAX_SPEED)
    theta = theta + theta_dot * _P_DT
    return np.array([theta, theta_dot]), -cost


def _cartpole_step(phys, u):
    x, x_dot, theta, theta_dot = phys
    force = _C_FORCE_MAG * u
    total_mass = _C_MASS_CART + _C_MASS_POLE
    ml = _C_MASS_POLE * _C_HALF_LEN
    for _ in range(_C_SUBSTEPS):
        sin_t = math.sin(theta)
        cos_t = math.cos(theta)
        temp = (force + ml * theta_dot**2 * sin_t) / total_mass
        theta_acc = (_C_G * sin_t - cos_t * temp) / (
            _C_HALF_LEN * (4.0 / 3.0 - _C_MASS_POLE * cos_t**2 / total_mass)
        )
        x_acc = temp - ml * theta_acc * cos_t / total_mass
        theta_dot += theta_acc * _C_DT
        x_dot += x_acc * _C_DT
        theta += theta_dot * _C_DT
        x += x_dot * _C_DT
    upright = 0.5 * (1.0 + math.cos(theta))
    centered = 1.0 / (1.0 + (x / 2.0) ** 2)
    return np.array([x, x_dot, theta, theta_dot]), upright * centered


def observe(spec, state):
    """Map internal coordinates to the observation vector."""
    p = state.physical
    if spec.id is EnvId.PENDULUM:
        return np.array([math.cos(p[0]), math.sin(p[0]), p[1]])
    return np.array([p[0], math.cos(p[2]), math.sin(p[2]), p[1], p[3]])


def normalize_return(spec, raw_return):
    """Scale a Pendulum episodic return onto [0, 1000]; identity elsewhere."""
    if spec.id is not EnvId.PENDULUM:
        return float(raw_return)
    scaled = 1000.0 * (raw_return + 1500.0) / 1500.0
    return float(min(max(scaled, 0.0), 1000.0))
