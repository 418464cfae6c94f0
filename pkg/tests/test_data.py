import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from primorl import behavior, data, envs
from primorl.errors import (
    AuditViolationError,
    BadMagicError,
    DatasetFormatError,
    DegenerateDatasetError,
    DimensionMismatchError,
    DomainError,
    TruncatedFileError,
    VersionMismatchError,
)
from conftest import make_dataset, make_trajectory


def _dataset_bytes(ds, tmp_path, name="ds.pmrl"):
    path = tmp_path / name
    data.write_dataset(ds, path)
    return path, path.read_bytes()


def _assert_datasets_bit_equal(a, b):
    assert a.num_trajectories == b.num_trajectories
    assert a.spec.id == b.spec.id
    assert a.provenance == b.provenance
    for ta, tb in zip(a.trajectories, b.trajectories):
        assert ta.id == tb.id
        for fa, fb in ((ta.obs, tb.obs), (ta.act, tb.act), (ta.rew, tb.rew),
                       (ta.next_obs, tb.next_obs)):
            assert fa.dtype == fb.dtype == np.float32
            assert np.array_equal(fa.view(np.uint32), fb.view(np.uint32))
        assert np.array_equal(ta.done, tb.done)


# ------------------------------------------------------------- round trips

def test_roundtrip_bit_exact(rng, tmp_path):
    ds = make_dataset(rng, k=5, length=9)
    path, _ = _dataset_bytes(ds, tmp_path)
    back = data.read_dataset(path)
    _assert_datasets_bit_equal(ds, back)


@given(k=st.integers(1, 5), length=st.integers(1, 8), seed=st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_roundtrip_property(k, length, seed, tmp_path_factory):
    rng = np.random.default_rng(seed)
    ds = make_dataset(rng, k=k, length=length)
    path = tmp_path_factory.mktemp("rt") / "ds.pmrl"
    data.write_dataset(ds, path)
    _assert_datasets_bit_equal(ds, data.read_dataset(path))


def test_bad_magic_rejected(rng, tmp_path):
    ds = make_dataset(rng)
    path, blob = _dataset_bytes(ds, tmp_path)
    path.write_bytes(b"XXXX0001" + blob[8:])
    with pytest.raises(BadMagicError) as exc:
        data.read_dataset(path)
    assert exc.value.offset == 0


def test_version_mismatch_rejected(rng, tmp_path):
    ds = make_dataset(rng)
    path, blob = _dataset_bytes(ds, tmp_path)
    (hlen,) = struct.unpack_from("<I", blob, 8)
    header = json.loads(blob[12:12 + hlen])
    header["version"] = 99
    hb = json.dumps(header, sort_keys=True).encode()
    path.write_bytes(blob[:8] + struct.pack("<I", len(hb)) + hb + blob[12 + hlen:])
    with pytest.raises(VersionMismatchError):
        data.read_dataset(path)


def test_truncated_block_rejected(rng, tmp_path):
    # header promises K episodes but one block is missing
    ds = make_dataset(rng, k=5, length=6)
    path, blob = _dataset_bytes(ds, tmp_path)
    rec = 2 * ds.spec.obs_dim + ds.spec.act_dim + 2
    block_bytes = 4 + 6 * rec * 4
    path.write_bytes(blob[:-block_bytes])
    with pytest.raises(TruncatedFileError) as exc:
        data.read_dataset(path)
    assert "at byte offset" in str(exc.value)


def test_dimension_mismatch_rejected(rng, tmp_path):
    ds = make_dataset(rng)
    path, blob = _dataset_bytes(ds, tmp_path)
    (hlen,) = struct.unpack_from("<I", blob, 8)
    header = json.loads(blob[12:12 + hlen])
    header["obs_dim"] = 7
    hb = json.dumps(header, sort_keys=True).encode()
    path.write_bytes(blob[:8] + struct.pack("<I", len(hb)) + hb + blob[12 + hlen:])
    with pytest.raises(DimensionMismatchError):
        data.read_dataset(path)


def test_trailing_bytes_rejected(rng, tmp_path):
    ds = make_dataset(rng)
    path, blob = _dataset_bytes(ds, tmp_path)
    path.write_bytes(blob + b"\x00\x00\x00\x00")
    with pytest.raises(DatasetFormatError):
        data.read_dataset(path)


# ---------------------------------------------------------------- collect

def test_collect_deterministic_byte_identical(tmp_path):
    spec = envs.make_spec("pendulum")
    mix = behavior.default_mixture(spec)
    d1 = data.collect(spec, mix, 10, seed=3)
    d2 = data.collect(spec, mix, 10, seed=3)
    p1 = tmp_path / "a.pmrl"
    p2 = tmp_path / "b.pmrl"
    data.write_dataset(d1, p1)
    data.write_dataset(d2, p2)
    assert p1.read_bytes() == p2.read_bytes()


def _mean_normalized_return(ds):
    spec = ds.spec
    vals = [envs.normalize_return(spec, float(t.rew.astype(np.float64).sum()))
            for t in ds.trajectories]
    return float(np.mean(vals))


def test_collect_random_policy_scores_poorly():
    spec = envs.make_spec("pendulum")
    ds = data.collect(spec, behavior.RandomPolicy(spec), 100, seed=11)
    assert _mean_normalized_return(ds) < 300.0


def test_collect_expert_beats_random():
    spec = envs.make_spec("pendulum")
    random_ds = data.collect(spec, behavior.RandomPolicy(spec), 100, seed=11)
    expert_ds = data.collect(spec, behavior.PendulumSwingupPolicy(), 100, seed=11)
    assert _mean_normalized_return(expert_ds) > _mean_normalized_return(random_ds)


def test_collect_provenance_records_mixture():
    spec = envs.make_spec("pendulum")
    ds = data.collect(spec, behavior.default_mixture(spec), 5, seed=1)
    prov = json.loads(ds.provenance)
    assert "mixture" in prov["behavior"]
    assert prov["seed"] == 1


# ------------------------------------------------------------------ split

def test_split_sizes_99_1(rng):
    ds = make_dataset(rng, k=100, length=3)
    train, test = data.split_by_episode(ds, 0.01, seed=5)
    assert train.num_trajectories == 99
    assert test.num_trajectories == 1
    assert json.loads(test.provenance)["public"] is True
    assert json.loads(train.provenance)["public"] is False


def test_split_partition_property(rng):
    ds = make_dataset(rng, k=12, length=3)
    train, test = data.split_by_episode(ds, 0.25, seed=9)
    assert set(train.ids) | set(test.ids) == set(range(12))
    assert set(train.ids) & set(test.ids) == set()


def test_split_size_rule_various_seeds(rng):
    ds = make_dataset(rng, k=10, length=3)
    for seed in range(5):
        _, test = data.split_by_episode(ds, 0.10, seed=seed)
        assert test.num_trajectories == 1


def test_split_never_splits_episodes(rng):
    ds = make_dataset(rng, k=6, length=4)
    train, test = data.split_by_episode(ds, 0.34, seed=2)
    originals = {t.id: t for t in ds.trajectories}
    for t in list(train.trajectories) + list(test.trajectories):
        assert t is originals[t.id]


def test_split_rejects_degenerate(rng):
    ds = make_dataset(rng, k=1)
    with pytest.raises(DegenerateDatasetError):
        data.split_by_episode(ds, 0.5, seed=0)


# ---------------------------------------------------------------- sampling

def test_poisson_q1_includes_all(rng):
    ds = make_dataset(rng, k=7)
    sample = data.poisson_sample(ds, 1.0, np.random.default_rng(0))
    assert [t.id for t in sample] == list(range(7))


def test_poisson_domain_error(rng):
    ds = make_dataset(rng)
    with pytest.raises(DomainError):
        data.poisson_sample(ds, 0.0, np.random.default_rng(0))
    with pytest.raises(DomainError):
        data.poisson_sample(ds, 1.5, np.random.default_rng(0))


def test_poisson_deterministic(rng):
    ds = make_dataset(rng, k=40)
    s1 = data.poisson_sample(ds, 0.3, np.random.default_rng(5))
    s2 = data.poisson_sample(ds, 0.3, np.random.default_rng(5))
    assert [t.id for t in s1] == [t.id for t in s2]


def test_poisson_binomial_statistics():
    # q = 1e-3, K = 30000: sample-size mean approx 30 within 3 standard
    # errors over 10^4 draws (binomial oracle)
    spec = envs.make_spec("pendulum")
    trajs = [make_trajectory(np.random.default_rng(0), 3, 1, 1, i)
             for i in range(30_000)]
    ds = data.OfflineDataset(spec, trajs)
    q, draws = 1e-3, 10_000
    rng = np.random.default_rng(123)
    sizes = np.empty(draws)
    for i in range(draws):
        mask = rng.random(ds.num_trajectories) < q
        sizes[i] = mask.sum()
    mean_expected = q * 30_000
    se = np.sqrt(30_000 * q * (1 - q) / draws)
    assert abs(sizes.mean() - mean_expected) <= 3 * se


def test_poisson_inclusion_independence(rng):
    # chi-square independence of two trajectories' inclusion indicators
    ds = make_dataset(rng, k=2)
    q, n = 0.4, 4000
    g = np.random.default_rng(77)
    counts = np.zeros((2, 2))
    for _ in range(n):
        included = {t.id for t in data.poisson_sample(ds, q, g)}
        counts[int(0 in included), int(1 in included)] += 1
    row = counts.sum(axis=1) / n
    col = counts.sum(axis=0) / n
    chi2 = 0.0
    for i in range(2):
        for j in range(2):
            expected = n * row[i] * col[j]
            chi2 += (counts[i, j] - expected) ** 2 / expected
    assert chi2 < 10.83  # chi-square(1) critical value at p=0.001


# ------------------------------------------------------------------- audit

def test_audit_counts_reads(rng):
    ds = make_dataset(rng, k=5)
    assert ds.audit.read_counter == 0
    data.poisson_sample(ds, 1.0, np.random.default_rng(0))
    assert ds.audit.read_counter == 5
    ds.read_trajectory(0)
    assert ds.audit.read_counter == 6


def test_audit_blocks_reads_during_policy_training(rng):
    ds = make_dataset(rng, k=3)
    ds.audit.set_phase(data.Phase.POLICY_TRAINING)
    with pytest.raises(AuditViolationError):
        ds.read_trajectory(0)
    assert ds.audit.read_counter == 0
    ds.audit.set_phase(data.Phase.EVALUATION)
    ds.read_trajectory(0)
    assert ds.audit.read_counter == 1


# ------------------------------------------------------------- invariants

def test_trajectory_invariants_enforced(rng):
    t = make_trajectory(rng, length=5)
    with pytest.raises(DomainError):
        data.Trajectory(0, t.obs, t.act, t.rew, t.obs, t.done)  # chain broken
    bad_done = t.done.copy()
    bad_done[:] = False
    with pytest.raises(DomainError):
        data.Trajectory(0, t.obs, t.act, t.rew, t.next_obs, bad_done)


def test_dataset_rejects_duplicate_ids(rng):
    spec = envs.make_spec("pendulum")
    t1 = make_trajectory(rng, 3, 1, 4, 0)
    t2 = make_trajectory(rng, 3, 1, 4, 0)
    with pytest.raises(DomainError):
        data.OfflineDataset(spec, [t1, t2])
