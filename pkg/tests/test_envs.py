import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from primorl import envs
from primorl.errors import DomainError


def _rollout_states(spec, seed, actions):
    st_ = envs.reset(spec, seed)
    out = [st_]
    for a in actions:
        st_, _, _ = envs.step(spec, st_, a)
        out.append(st_)
    return out


def test_reset_deterministic():
    spec = envs.make_spec("pendulum")
    s1 = envs.reset(spec, 7)
    s2 = envs.reset(spec, 7)
    assert np.array_equal(s1.physical, s2.physical)
    assert s1.step_count == 0


def test_pendulum_initial_distribution():
    spec = envs.make_spec("pendulum")
    thetas, vels = [], []
    for seed in range(10_000):
        s = envs.reset(spec, seed)
        thetas.append(s.physical[0])
        vels.append(s.physical[1])
    thetas, vels = np.array(thetas), np.array(vels)
    assert thetas.min() >= -math.pi and thetas.max() <= math.pi
    assert vels.min() >= -1.0 and vels.max() <= 1.0
    # spread sanity: uniform draws cover most of the range
    assert thetas.max() - thetas.min() > 5.0


def test_cartpole_balance_initializes_near_upright():
    spec = envs.make_spec("cartpole_balance")
    for seed in range(10_000):
        s = envs.reset(spec, seed)
        assert abs(s.physical[2]) <= 0.05


def test_cartpole_swingup_initializes_hanging():
    spec = envs.make_spec("cartpole_swingup")
    for seed in range(1000):
        s = envs.reset(spec, seed)
        assert abs(abs(s.physical[2]) - math.pi) <= 0.05


def test_pendulum_upright_zero_action_zero_reward():
    spec = envs.make_spec("pendulum")
    state = envs.EnvState(np.array([0.0, 0.0]))
    _, reward, _ = envs.step(spec, state, np.array([0.0]))
    assert reward == 0.0


def test_pendulum_hanging_reward_is_minus_pi_squared():
    spec = envs.make_spec("pendulum")
    state = envs.EnvState(np.array([math.pi, 0.0]))
    _, reward, _ = envs.step(spec, state, np.array([0.0]))
    assert abs(reward - (-9.869604401089358)) < 1e-12


def test_done_exactly_at_horizon():
    spec = envs.make_spec("pendulum")
    state = envs.EnvState(np.array([0.5, 0.1]), step_count=spec.episode_length - 1)
    _, _, done = envs.step(spec, state, np.array([0.0]))
    assert done
    state = envs.EnvState(np.array([0.5, 0.1]), step_count=spec.episode_length - 2)
    _, _, done = envs.step(spec, state, np.array([0.0]))
    assert not done


def test_step_rejects_non_finite_action():
    spec = envs.make_spec("pendulum")
    state = envs.reset(spec, 0)
    with pytest.raises(DomainError):
        envs.step(spec, state, np.array([math.inf]))


def test_out_of_range_actions_are_clamped():
    spec = envs.make_spec("pendulum")
    state = envs.reset(spec, 3)
    s_big, r_big, _ = envs.step(spec, state, np.array([50.0]))
    s_lim, r_lim, _ = envs.step(spec, state, np.array([2.0]))
    assert np.array_equal(s_big.physical, s_lim.physical)
    assert r_big == r_lim


def test_observe_pendulum_examples():
    spec = envs.make_spec("pendulum")
    obs = envs.observe(spec, envs.EnvState(np.array([0.0, 0.0])))
    np.testing.assert_allclose(obs, [1.0, 0.0, 0.0], atol=0)
    obs = envs.observe(spec, envs.EnvState(np.array([math.pi / 2, 2.0])))
    np.testing.assert_allclose(obs, [0.0, 1.0, 2.0], atol=1e-12)


def test_observe_cartpole_hand_set_state():
    spec = envs.make_spec("cartpole_balance")
    state = envs.EnvState(np.array([0.3, -0.2, 0.5, 1.1]))
    expected = np.array([0.3, math.cos(0.5), math.sin(0.5), -0.2, 1.1])
    np.testing.assert_allclose(envs.observe(spec, state), expected, atol=0)


def test_trajectory_determinism_bitwise():
    spec = envs.make_spec("cartpole_swingup")
    rng = np.random.default_rng(0)
    actions = rng.uniform(-1, 1, size=(50, 1))
    a_states = _rollout_states(spec, 9, actions)
    b_states = _rollout_states(spec, 9, actions)
    for sa, sb in zip(a_states, b_states):
        assert np.array_equal(sa.physical, sb.physical)


@pytest.mark.parametrize("env_id", ["pendulum", "cartpole_balance", "cartpole_swingup"])
def test_rewards_within_declared_range(env_id):
    spec = envs.make_spec(env_id)
    rng = np.random.default_rng(1)
    state = envs.reset(spec, 5)
    lo, hi = spec.reward_range
    for _ in range(300):
        a = rng.uniform(spec.action_low, spec.action_high)
        state, r, done = envs.step(spec, state, a)
        assert lo - 1e-12 <= r <= hi + 1e-12
        if done:
            state = envs.reset(spec, int(rng.integers(1000)))


@pytest.mark.parametrize("env_id", ["pendulum", "cartpole_balance"])
def test_episodes_last_exactly_episode_length(env_id):
    spec = envs.make_spec(env_id)
    state = envs.reset(spec, 2)
    steps = 0
    done = False
    while not done:
        state, _, done = envs.step(spec, state, np.zeros(1))
        steps += 1
        assert steps <= spec.episode_length
    assert steps == spec.episode_length


def test_normalize_return_endpoints():
    spec = envs.make_spec("pendulum")
    assert envs.normalize_return(spec, -1500.0) == 0.0
    assert envs.normalize_return(spec, 0.0) == 1000.0
    cp = envs.make_spec("cartpole_balance")
    assert envs.normalize_return(cp, 976.3) == 976.3


@given(st.floats(-1500, 0), st.floats(-1500, 0))
@settings(max_examples=60, deadline=None)
def test_normalize_return_affine_monotone(a, b):
    spec = envs.make_spec("pendulum")
    fa, fb = envs.normalize_return(spec, a), envs.normalize_return(spec, b)
    if a < b:
        assert fa <= fb
    mid = envs.normalize_return(spec, (a + b) / 2)
    assert abs(mid - (fa + fb) / 2) < 1e-6


def test_normalize_return_clamps():
    spec = envs.make_spec("pendulum")
    assert envs.normalize_return(spec, -2500.0) == 0.0
    assert envs.normalize_return(spec, 100.0) == 1000.0
