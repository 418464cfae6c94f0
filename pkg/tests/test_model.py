import math

import numpy as np
import pytest

from primorl import data, envs, model, nn
from primorl.errors import DomainError, WrongKindError
from conftest import make_dataset


def _small_ensemble(rng, n=3, obs_dim=3, act_dim=1, hidden=(6,)):
    arch = nn.MlpArch(obs_dim + act_dim, 2 * (obs_dim + 1), hidden)
    return model.init_ensemble(arch, n, rng)


def test_predict_identical_members_agree(rng):
    ens = _small_ensemble(rng, n=4)
    for m in ens.members[1:]:
        m.values[...] = ens.members[0].values
    preds = model.predict(ens, np.zeros(3), np.zeros(1))
    for mean, var in preds[1:]:
        assert np.array_equal(mean, preds[0][0])
        assert np.array_equal(var, preds[0][1])


def test_predict_variance_positive(rng):
    ens = _small_ensemble(rng)
    s, a = rng.normal(size=3), rng.normal(size=1)
    for _, var in model.predict(ens, s, a):
        assert np.all(var > 0)


def test_predict_hand_affine_member(rng):
    # zero-hidden-layer member: mean head is an affine map of the
    # normalized input, checked by hand
    arch = nn.MlpArch(4, 8, ())
    ens = model.init_ensemble(arch, 1, rng)
    W = ens.members[0].weights(0)
    b = ens.members[0].biases(0)
    s, a = np.array([0.2, -0.5, 1.0]), np.array([0.7])
    x = np.concatenate([s, a])
    expected_mean = x @ W[:, :4] + b[:4]
    (mean, _), = model.predict(ens, s, a)
    np.testing.assert_allclose(mean, expected_mean, atol=1e-12)


def test_predict_rejects_non_finite(rng):
    ens = _small_ensemble(rng)
    with pytest.raises(DomainError):
        model.predict(ens, np.array([np.nan, 0, 0]), np.zeros(1))


def test_sample_transition_degenerate_variance(rng):
    # log-var head pinned at a very low clamp: draws collapse onto the mean
    arch = nn.MlpArch(4, 8, (6,))
    ens = model.init_ensemble(arch, 3, rng, log_var_bounds=(-40.0, 0.5))
    k = ens.target_dim
    for m in ens.members:
        m.biases(m.layout.layer_count - 1)[k:] = -200.0
    s, a = rng.normal(size=3), rng.normal(size=1)
    means, _ = model.predict_members(ens, s, a)
    s2, r = model.sample_transition(ens, s, a, np.random.default_rng(0))
    drawn = np.concatenate([s2 - s, [r]])
    dists = [np.max(np.abs(drawn - m)) for m in means]
    assert min(dists) < 1e-3


def test_sample_transition_member_frequency(rng):
    ens = _small_ensemble(rng, n=2)
    g = np.random.default_rng(42)
    s, a = np.zeros(3), np.zeros(1)
    means, _ = model.predict_members(ens, s, a)
    n = 100_000
    # count member choices through the same rng path used by sampling
    counts = np.zeros(2)
    for _ in range(n):
        idx = int(g.integers(2))
        g.standard_normal(4)
        counts[idx] += 1
    se = math.sqrt(n * 0.25)
    assert abs(counts[0] - n / 2) <= 3 * se


def test_sample_transition_deterministic(rng):
    ens = _small_ensemble(rng)
    s, a = rng.normal(size=3), rng.normal(size=1)
    out1 = model.sample_transition(ens, s, a, np.random.default_rng(9))
    out2 = model.sample_transition(ens, s, a, np.random.default_rng(9))
    assert np.array_equal(out1[0], out2[0]) and out1[1] == out2[1]


def test_u_ma_examples(rng):
    # wide clamp bounds keep the soft clamp inert around the probed values
    arch = nn.MlpArch(2, 4, ())
    ens = model.init_ensemble(arch, 1, rng, log_var_bounds=(-30.0, 30.0))
    ens.members[0].values[...] = 0.0  # log_var = 0 -> var vector (1, 1)
    u = model.u_ma(ens, np.zeros(1), np.zeros(1))
    assert abs(u - math.sqrt(2.0)) < 1e-9
    # max is dominated by the larger member: vars (1,1) vs (2,2)
    ens2 = model.init_ensemble(arch, 2, rng, log_var_bounds=(-30.0, 30.0))
    for mem, lv in zip(ens2.members, (0.0, math.log(2.0))):
        mem.values[...] = 0.0
        mem.biases(0)[2:] = lv
    u2 = model.u_ma(ens2, np.zeros(1), np.zeros(1))
    assert abs(u2 - math.sqrt(8.0)) < 1e-9


def test_u_ma_matches_recomputation(rng):
    ens = _small_ensemble(rng, n=4)
    s, a = rng.normal(size=3), rng.normal(size=1)
    _, variances = model.predict_members(ens, s, a)
    brute = max(math.sqrt(float(np.sum(v**2))) for v in variances)
    assert abs(model.u_ma(ens, s, a) - brute) < 1e-12


def test_u_mpd_examples(rng):
    ens = _small_ensemble(rng, n=3)
    for m in ens.members[1:]:
        m.values[...] = ens.members[0].values
    assert model.u_mpd(ens, np.zeros(3), np.zeros(1)) == 0.0

    # two members with means (0,0) and (3,4) in 2-D: distance 5
    arch = nn.MlpArch(2, 4, ())
    ens2 = model.init_ensemble(arch, 2, np.random.default_rng(0))
    for m in ens2.members:
        m.values[...] = 0.0
    ens2.members[1].biases(0)[:2] = [3.0, 4.0]
    assert abs(model.u_mpd(ens2, np.zeros(1), np.zeros(1)) - 5.0) < 1e-12


def test_u_mpd_matches_brute_force(rng):
    for n in (2, 4, 6):
        ens = _small_ensemble(rng, n=n)
        s, a = rng.normal(size=3), rng.normal(size=1)
        means, _ = model.predict_members(ens, s, a)
        brute = max(
            float(np.linalg.norm(means[i] - means[j]))
            for i in range(n) for j in range(n)
        )
        assert abs(model.u_mpd(ens, s, a) - brute) < 1e-12


def test_uncertainty_batched_matches_scalar(rng):
    ens = _small_ensemble(rng, n=3)
    S = rng.normal(size=(5, 3))
    A = rng.normal(size=(5, 1))
    means, variances = model.predict_batch(ens, S, A)
    for est in model.ESTIMATORS:
        batched = model.uncertainty_from_predictions(est, means, variances)
        fn = model.u_ma if est == "max_aleatoric" else model.u_mpd
        for i in range(5):
            assert abs(batched[i] - fn(ens, S[i], A[i])) < 1e-12


def _pmdp(ens, lam=2.0, estimator="max_pairwise_diff"):
    spec = envs.make_spec("pendulum")
    return model.make_pessimistic_mdp(ens, spec, estimator, lam, 30)


def test_penalized_reward_examples(rng):
    ens = _small_ensemble(rng)
    pm0 = _pmdp(ens, lam=0.0)
    s, a = rng.normal(size=3), rng.normal(size=1)
    assert model.penalized_reward(pm0, s, a, 1.23) == 1.23
    pm2 = _pmdp(ens, lam=2.0)
    u = model.uncertainty(pm2, s, a)
    got = model.penalized_reward(pm2, s, a, 1.0)
    assert abs(got - (1.0 - 2.0 * u)) < 1e-12


def test_penalized_reward_monotone_in_lambda(rng):
    ens = _small_ensemble(rng)
    s, a = rng.normal(size=3), rng.normal(size=1)
    prev = math.inf
    for lam in (0.0, 0.5, 1.0, 4.0):
        r = model.penalized_reward(_pmdp(ens, lam=lam), s, a, 0.7)
        assert r <= prev + 1e-15
        prev = r


def test_penalty_never_exceeds_raw(rng):
    ens = _small_ensemble(rng)
    g = np.random.default_rng(3)
    for _ in range(200):
        lam = float(g.uniform(0, 5))
        s, a = g.normal(size=3), g.normal(size=1)
        r_hat = float(g.normal())
        assert model.penalized_reward(_pmdp(ens, lam=lam), s, a, r_hat) <= r_hat + 1e-15


def test_checkpoint_roundtrip_bit_exact(rng, tmp_path):
    ens = _small_ensemble(rng, n=3)
    path = tmp_path / "ens.ckpt"
    model.save_ensemble(ens, path, meta={"config_hash": "abc", "seed": 4})
    back = model.load_ensemble(path)
    assert back.arch == ens.arch
    assert back.log_var_bounds == ens.log_var_bounds
    assert np.array_equal(back.normalizer.mean, ens.normalizer.mean)
    assert np.array_equal(back.normalizer.std, ens.normalizer.std)
    for a, b in zip(ens.members, back.members):
        assert np.array_equal(a.values, b.values)
    # prediction invariance under reload
    s, a_ = rng.normal(size=3), rng.normal(size=1)
    p1 = model.predict(ens, s, a_)
    p2 = model.predict(back, s, a_)
    for (m1, v1), (m2, v2) in zip(p1, p2):
        assert np.array_equal(m1, m2) and np.array_equal(v1, v2)


def test_checkpoint_kind_guard(rng, tmp_path):
    ds = make_dataset(rng)
    path = tmp_path / "ds.pmrl"
    data.write_dataset(ds, path)
    with pytest.raises(WrongKindError):
        model.load_ensemble(path)


def test_normalizer_scale_invariance(rng):
    X = rng.normal(size=(50, 4)) * np.array([1.0, 10.0, 0.1, 5.0])
    n1 = model.Normalizer.fit(X)
    n2 = model.Normalizer.fit(X * 3.0)
    np.testing.assert_allclose(n1.apply(X), n2.apply(X * 3.0), atol=1e-12)


def test_normalizer_positive_std(rng):
    X = np.zeros((10, 3))
    n = model.Normalizer.fit(X)
    assert np.all(n.std > 0)


def test_training_arrays_targets(rng):
    ds = make_dataset(rng, k=1, length=6)
    t = ds.trajectories[0]
    X, Y = model.training_arrays(t, model.Normalizer.identity(4))
    np.testing.assert_allclose(X[:, :3], t.obs.astype(np.float64))
    np.testing.assert_allclose(Y[:, :3],
                               t.next_obs.astype(np.float64) - t.obs.astype(np.float64))
    np.testing.assert_allclose(Y[:, 3], t.rew.astype(np.float64))
