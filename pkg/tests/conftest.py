import numpy as np
import pytest

from primorl import data, envs


def make_trajectory(rng, obs_dim=3, act_dim=1, length=12, traj_id=0):
    """Random but invariant-respecting trajectory (float32 storage)."""
    obs = rng.normal(size=(length + 1, obs_dim)).astype(np.float32)
    act = rng.uniform(-1, 1, size=(length, act_dim)).astype(np.float32)
    rew = rng.normal(size=length).astype(np.float32)
    done = np.zeros(length, dtype=bool)
    done[-1] = True
    return data.Trajectory(traj_id, obs[:-1], act, rew, obs[1:], done)


def make_dataset(rng, spec=None, k=4, length=12):
    spec = spec or envs.make_spec("pendulum")
    trajs = [make_trajectory(rng, spec.obs_dim, spec.act_dim, length, i)
             for i in range(k)]
    return data.OfflineDataset(spec, trajs, provenance="{}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
