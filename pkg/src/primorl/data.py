"""Trajectory datasets: in-memory types, the PMRL1 container, collection,
episode-wise splitting, Poisson subsampling, and the dataset-access audit.

The unit of privacy is one trajectory. Storage is 32-bit little-endian
floats so that write/read round-trips every bit exactly; training code
upcasts to float64.
"""

import enum
import json
import struct
import threading
from dataclasses import dataclass

import numpy as np

from . import envs
from .errors import (
    AuditViolationError,
    BadMagicError,
    DatasetFormatError,
    DegenerateDatasetError,
    DimensionMismatchError,
    DomainError,
    TruncatedFileError,
    VersionMismatchError,
    WrongKindError,
)

__all__ = [
    "Transition",
    "Trajectory",
    "OfflineDataset",
    "AccessAudit",
    "Phase",
    "collect",
    "split_by_episode",
    "write_dataset",
    "read_dataset",
    "poisson_sample",
    "MAGIC",
]

MAGIC = b"PMRL0001"
_FORMAT_VERSION = 1


class Phase(enum.Enum):
    MODEL_TRAINING = "model_training"
    POLICY_TRAINING = "policy_training"
    EVALUATION = "evaluation"


class AccessAudit:
    """Counts trajectory reads; reads are forbidden during policy training."""

    def __init__(self):
        self.read_counter = 0
        self.phase = Phase.MODEL_TRAINING
        self._lock = threading.Lock()

    def set_phase(self, phase):
        self.phase = Phase(phase)

    def record_read(self, trajectory_id):
        if self.phase is Phase.POLICY_TRAINING:
            raise AuditViolationError(
                f"trajectory {trajectory_id} read during policy training"
            )
        with self._lock:
            self.read_counter += 1


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool


class Trajectory:
    """One user's episode as column arrays (float32 storage layout)."""

    __slots__ = ("id", "obs", "act", "rew", "next_obs", "done")

    def __init__(self, traj_id, obs, act, rew, next_obs, done, validate=True):
        self.id = int(traj_id)
        self.obs = np.asarray(obs, dtype=np.float32)
        self.act = np.asarray(act, dtype=np.float32)
        self.rew = np.asarray(rew, dtype=np.float32)
        self.next_obs = np.asarray(next_obs, dtype=np.float32)
        self.done = np.asarray(done, dtype=bool)
        if validate:
            self._validate()

    def _validate(self):
        n = len(self.rew)
        if n == 0:
            raise DomainError("trajectory must be non-empty")
        if self.id < 0:
            raise DomainError("trajectory id must be non-negative")
        shapes_ok = (
            self.obs.shape == self.next_obs.shape
            and self.obs.shape[0] == n
            and self.act.shape[0] == n
            and self.done.shape == (n,)
        )
        if not shapes_ok:
            raise DomainError("inconsistent trajectory array shapes")
        for arr in (self.obs, self.act, self.rew, self.next_obs):
            if not np.all(np.isfinite(arr)):
                raise DomainError("non-finite trajectory data")
        if not np.array_equal(self.next_obs[:-1], self.obs[1:]):
            raise DomainError("s_next of step t must equal s of step t+1")
        if not (self.done[-1] and not self.done[:-1].any()):
            raise DomainError("exactly the last transition must have done=True")

    @classmethod
    def from_transitions(cls, traj_id, transitions):
        return cls(
            traj_id,
            np.stack([t.s for t in transitions]),
            np.stack([t.a for t in transitions]),
            np.array([t.r for t in transitions]),
            np.stack([t.s_next for t in transitions]),
            np.array([t.done for t in transitions]),
        )

    @property
    def transitions(self):
        return [
            Transition(self.obs[i], self.act[i], float(self.rew[i]),
                       self.next_obs[i], bool(self.done[i]))
            for i in range(len(self))
        ]

    def __len__(self):
        return int(self.rew.shape[0])

    def __iter__(self):
        return iter(self.transitions)


class OfflineDataset:
    """K trajectories plus environment metadata and an access audit.

    ``trajectories`` is plain data; code that consumes private episodes
    must go through ``read_trajectory`` (or ``poisson_sample``) so the
    audit sees every access.
    """

    def __init__(self, spec, trajectories, provenance=""):
        trajectories = tuple(trajectories)
        if len(trajectories) < 1:
            raise DegenerateDatasetError("dataset needs at least one trajectory")
        ids = [t.id for t in trajectories]
        if len(set(ids)) != len(ids):
            raise DomainError("trajectory ids must be unique")
        for t in trajectories:
            if t.obs.shape[1] != spec.obs_dim or t.act.shape[1] != spec.act_dim:
                raise DomainError(
                    f"trajectory {t.id} dimensions do not match the env spec"
                )
        self.spec = spec
        self.trajectories = trajectories
        self.provenance = provenance
        self.audit = AccessAudit()

    @property
    def num_trajectories(self):
        return len(self.trajectories)

    @property
    def ids(self):
        return [t.id for t in self.trajectories]

    def read_trajectory(self, index) -> Trajectory:
        """Audited access to one trajectory by position."""
        t = self.trajectories[index]
        self.audit.record_read(t.id)
        return t

    def num_transitions(self):
        return sum(len(t) for t in self.trajectories)


def _episode_seed(rng):
    return int(rng.integers(0, 2**62))


def collect(spec, behavior, num_episodes, seed) -> OfflineDataset:
    """Run the behavior policy for K full episodes in the real environment."""
    if num_episodes < 1:
        raise DomainError("need at least one episode")
    master = np.random.default_rng(np.random.SeedSequence(seed))
    trajectories = []
    episode_policies = []
    for k in range(num_episodes):
        env_seed = _episode_seed(master)
        policy_rng = np.random.default_rng(_episode_seed(master))
        policy = behavior.choose(policy_rng) if hasattr(behavior, "choose") else behavior
        episode_policies.append(policy.name)
        trajectories.append(_run_episode(spec, policy, env_seed, policy_rng, k))
    provenance = json.dumps({
        "behavior": getattr(behavior, "name", "unknown"),
        "episode_policies": sorted(set(episode_policies)),
        "seed": int(seed),
        "env": spec.id.value,
        "public": False,
    }, sort_keys=True)
    return OfflineDataset(spec, trajectories, provenance)


def _run_episode(spec, policy, env_seed, policy_rng, traj_id) -> Trajectory:
    state = envs.reset(spec, env_seed)
    T = spec.episode_length
    obs = np.empty((T + 1, spec.obs_dim), dtype=np.float32)
    act = np.empty((T, spec.act_dim), dtype=np.float32)
    rew = np.empty(T, dtype=np.float32)
    done = np.zeros(T, dtype=bool)
    cur = envs.observe(spec, state)
    for t in range(T):
        obs[t] = cur
        a = policy.act(cur, policy_rng)
        state, r, _ = envs.step(spec, state, a)
        act[t] = a
        rew[t] = r
        cur = envs.observe(spec, state)
    obs[T] = cur
    done[-1] = True
    return Trajectory(traj_id, obs[:-1], act, rew, obs[1:], done)


def split_by_episode(ds, test_fraction, seed):
    """Disjoint whole-trajectory partition; the test side is flagged public."""
    K = ds.num_trajectories
    if K < 2:
        raise DegenerateDatasetError("cannot split a dataset with fewer than 2 trajectories")
    if not 0.0 < test_fraction < 1.0:
        raise DomainError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n_test = int(round(test_fraction * K))
    n_test = min(max(n_test, 1), K - 1)
    perm = np.random.default_rng(seed).permutation(K)
    test_pos = set(int(i) for i in perm[:n_test])
    train = [ds.trajectories[i] for i in range(K) if i not in test_pos]
    test = [ds.trajectories[i] for i in range(K) if i in test_pos]

    def _prov(side, public):
        try:
            base = json.loads(ds.provenance)
        except (TypeError, ValueError):
            base = {"parent": ds.provenance}
        base.update({
            "split": side,
            "public": public,
            "parent_k": K,
            "test_fraction": test_fraction,
            "split_seed": int(seed),
        })
        return json.dumps(base, sort_keys=True)

    return (
        OfflineDataset(ds.spec, train, _prov("train", False)),
        OfflineDataset(ds.spec, test, _prov("test", True)),
    )


def poisson_sample(ds, q, rng):
    """Include each trajectory independently with probability q.

    Every included trajectory counts as one audited read.
    """
    if not 0.0 < q <= 1.0:
        raise DomainError(f"sampling ratio must be in (0, 1], got {q}")
    mask = rng.random(ds.num_trajectories) < q
    out = []
    for i in np.nonzero(mask)[0]:
        out.append(ds.read_trajectory(int(i)))
    return out


def _record_width(spec):
    return spec.obs_dim + spec.act_dim + 1 + spec.obs_dim + 1


def write_dataset(ds, path):
    """Serialize to the PMRL1 container (bit-exact round trip)."""
    spec = ds.spec
    header = {
        "version": _FORMAT_VERSION,
        "kind": "dataset",
        "env_id": spec.id.value,
        "obs_dim": spec.obs_dim,
        "act_dim": spec.act_dim,
        "K": ds.num_trajectories,
        "episode_lengths": [len(t) for t in ds.trajectories],
        "trajectory_ids": ds.ids,
        "provenance": ds.provenance,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for t in ds.trajectories:
            f.write(struct.pack("<I", len(t)))
            block = np.hstack([
                t.obs,
                t.act,
                t.rew[:, None],
                t.next_obs,
                t.done.astype(np.float32)[:, None],
            ]).astype("<f4")
            f.write(block.tobytes())


def read_dataset(path) -> OfflineDataset:
    """Parse a PMRL1 container, reporting byte offsets on malformed input."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12:
        raise TruncatedFileError("file too short for magic and header length", len(data))
    if data[:8] != MAGIC:
        raise BadMagicError(f"bad magic {data[:8]!r}, expected {MAGIC!r}", 0)
    (header_len,) = struct.unpack_from("<I", data, 8)
    if 12 + header_len > len(data):
        raise TruncatedFileError(f"declared header length {header_len} overruns file", 8)
    try:
        header = json.loads(data[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"header is not valid JSON ({exc})", 12) from None
    if header.get("version") != _FORMAT_VERSION:
        raise VersionMismatchError(
            f"unsupported version {header.get('version')!r}", 12)
    if header.get("kind") != "dataset":
        raise WrongKindError(f"container kind {header.get('kind')!r} is not a dataset", 12)
    try:
        spec = envs.make_spec(header["env_id"])
    except (KeyError, ValueError) as exc:
        raise DatasetFormatError(f"unknown env_id ({exc})", 12) from None
    if header.get("obs_dim") != spec.obs_dim or header.get("act_dim") != spec.act_dim:
        raise DimensionMismatchError(
            f"header dims ({header.get('obs_dim')}, {header.get('act_dim')}) do not "
            f"match {spec.id.value} ({spec.obs_dim}, {spec.act_dim})", 12)
    K = header.get("K")
    lengths = header.get("episode_lengths")
    ids = header.get("trajectory_ids")
    if not isinstance(K, int) or K < 1:
        raise DatasetFormatError(f"invalid K {K!r}", 12)
    if not isinstance(lengths, list) or len(lengths) != K:
        raise DatasetFormatError("episode_lengths does not match K", 12)
    if not isinstance(ids, list) or len(ids) != K:
        raise DatasetFormatError("trajectory_ids does not match K", 12)

    rec = _record_width(spec)
    off = 12 + header_len
    trajectories = []
    for k in range(K):
        if off + 4 > len(data):
            raise TruncatedFileError(
                f"episode block {k} of {K} missing (header promised more data)", off)
        (T,) = struct.unpack_from("<I", data, off)
        if T != lengths[k]:
            raise DatasetFormatError(
                f"episode {k} length {T} contradicts header ({lengths[k]})", off)
        body = off + 4
        nbytes = T * rec * 4
        if body + nbytes > len(data):
            raise TruncatedFileError(f"episode block {k} truncated", body)
        block = np.frombuffer(data, dtype="<f4", count=T * rec, offset=body)
        block = block.reshape(T, rec).copy()
        o, a = spec.obs_dim, spec.act_dim
        done_col = block[:, -1]
        if not np.all((done_col == 0.0) | (done_col == 1.0)):
            raise DatasetFormatError(f"episode {k} has non-boolean done flags", body)
        trajectories.append(Trajectory(
            ids[k],
            block[:, :o],
            block[:, o:o + a],
            block[:, o + a],
            block[:, o + a + 1:o + a + 1 + o],
            done_col.astype(bool),
        ))
        off = body + nbytes
    if off != len(data):
        raise DatasetFormatError(f"{len(data) - off} trailing bytes after last episode", off)
    return OfflineDataset(spec, trajectories, header.get("provenance", ""))
