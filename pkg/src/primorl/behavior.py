"""Scripted behavior policies used to generate offline datasets.

Datasets mix random, medium and expert episodes; the controllers below
stand in for learned data-collection agents so the mixture composition is
explicit and reproducible.
"""

import math

import numpy as np

from .envs import EnvId

__all__ = [
    "RandomPolicy",
    "PendulumSwingupPolicy",
    "CartpoleBalancePolicy",
    "CartpoleSwingupPolicy",
    "MixturePolicy",
    "default_mixture",
]


class RandomPolicy:
    """Uniform actions over the action box."""

    name = "random"

    def __init__(self, spec):
        self._low = spec.action_low
        self._high = spec.action_high

    def act(self, obs, rng):
        return rng.uniform(self._low, self._high)


class PendulumSwingupPolicy:
    """Energy pumping far from upright, PD stabilization near it.

    Pendulum energy about the pivot (uniform rod, m = l = 1, g = 10):
    E = theta_dot^2 / 6 + 5 cos(theta), with E = 5 at the upright rest
    target. ``noise_std`` and detuned gains give the medium variant.
    """

    def __init__(self, pump_gain=1.0, kp=12.0, kd=2.5, noise_std=0.0,
                 name="pendulum_expert"):
        self.pump_gain = pump_gain
        self.kp = kp
        self.kd = kd
        self.noise_std = noise_std
        self.name = name

    def act(self, obs, rng):
        cos_t, sin_t, theta_dot = obs
        theta = math.atan2(sin_t, cos_t)
        energy = theta_dot**2 / 6.0 + 5.0 * cos_t
        if abs(theta) < 0.4 and abs(theta_dot) < 2.5:
            u = -self.kp * theta - self.kd * theta_dot
        else:
            u = self.pump_gain * theta_dot * (5.0 - energy)
        if self.noise_std > 0.0:
            u += self.noise_std * rng.standard_normal()
        return np.array([min(max(u, -2.0), 2.0)])


class CartpoleBalancePolicy:
    """Linear feedback keeping the pole upright and the cart centered."""

    def __init__(self, k_theta=6.0, k_theta_dot=1.5, k_x=0.4, k_x_dot=1.0,
                 noise_std=0.0, name="balance_expert"):
        self.gains = (k_theta, k_theta_dot, k_x, k_x_dot)
        self.noise_std = noise_std
        self.name = name

    def act(self, obs, rng):
        x, cos_t, sin_t, x_dot, theta_dot = obs
        theta = math.atan2(sin_t, cos_t)
        k_t, k_td, k_x, k_xd = self.gains
        u = k_t * theta + k_td * theta_dot + k_x * x + k_xd * x_dot
        if self.noise_std > 0.0:
            u += self.noise_std * rng.standard_normal()
        return np.array([min(max(u, -1.0), 1.0)])


class CartpoleSwingupPolicy:
    """Pole-energy pumping with a balance controller takeover near upright."""

    def __init__(self, pump_gain=8.0, noise_std=0.0, name="swingup_expert"):
        self.pump_gain = pump_gain
        self.noise_std = noise_std
        self._balance = CartpoleBalancePolicy()
        self.name = name

    def act(self, obs, rng):
        x, cos_t, sin_t, x_dot, theta_dot = obs
        theta = math.atan2(sin_t, cos_t)
        if abs(theta) < 0.35 and abs(theta_dot) < 2.0:
            u = float(self._balance.act(obs, rng)[0])
        else:
            # pole energy vs upright rest; dE/dt = -m*l*a*theta_dot*cos(theta)
            energy = 0.5 * (4.0 / 3.0) * 0.1 * 0.5**2 * theta_dot**2 \
                + 0.1 * 9.8 * 0.5 * (cos_t - 1.0)
            u = -self.pump_gain * (0.0 - energy) * theta_dot * cos_t - 0.2 * x
        if self.noise_std > 0.0:
            u += self.noise_std * rng.standard_normal()
        return np.array([min(max(u, -1.0), 1.0)])


class MixturePolicy:
    """Per-episode mixture over named policies with fixed weights."""

    def __init__(self, components):
        """components: list of (policy, weight); weights need not sum to 1."""
        policies, weights = zip(*components)
        total = float(sum(weights))
        self.policies = list(policies)
        self.weights = np.array([w / total for w in weights])
        self.name = "mixture(" + ",".join(
            f"{p.name}:{w:.3g}" for p, w in zip(self.policies, self.weights)
        ) + ")"

    def choose(self, rng):
        idx = rng.choice(len(self.policies), p=self.weights)
        return self.policies[int(idx)]


def default_mixture(spec) -> MixturePolicy:
    """Random / medium / expert blend mirroring replay-style datasets."""
    random = RandomPolicy(spec)
    if spec.id is EnvId.PENDULUM:
        medium = PendulumSwingupPolicy(pump_gain=0.6, kp=6.0, kd=1.0,
                                       noise_std=0.5, name="pendulum_medium")
        expert = PendulumSwingupPolicy()
    elif spec.id is EnvId.CARTPOLE_BALANCE:
        medium = CartpoleBalancePolicy(k_theta=3.0, k_theta_dot=0.5, k_x=0.1,
                                       k_x_dot=0.3, noise_std=0.3,
                                       name="balance_medium")
        expert = CartpoleBalancePolicy()
    else:
        medium = CartpoleSwingupPolicy(pump_gain=3.0, noise_std=0.3,
                                       name="swingup_medium")
        expert = CartpoleSwingupPolicy()
    return MixturePolicy([(random, 0.25), (medium, 0.45), (expert, 0.30)])
