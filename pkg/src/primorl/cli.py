"""Command-line pipeline: collect, split, train-model, account,
train-policy, evaluate, and the chained pipeline with its access-audit
assertion.

Every artifact (dataset, checkpoint, CSV, ledger) embeds the resolved
config hash and seed, and every stage derives its RNG stream from the
master seed, so re-running a command with the same (config, seed)
reproduces its outputs byte for byte.

Exit codes: 0 success, 2 usage, 3 invalid config, 4 file/parse error,
5 numeric failure, 6 audit violation.
"""

import argparse
import copy
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import accountant, behavior, data, dp, envs, model, nn, sac
from .errors import (
    AuditViolationError,
    ConfigError,
    DatasetFormatError,
    DomainError,
    NumericalError,
    PrimorlError,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5
EXIT_AUDIT = 6

_CSV_VERSION = "primorl-csv v1"

# Per-task defaults following the reference hyperparameter tables, with
# desk-scale dataset/round counts.
_ENV_DEFAULTS = {
    "pendulum": {
        "model": {"n_members": 3, "hidden": [64, 64]},
        "privacy": {"clipping": "per_layer"},
        "pessimism": {"estimator": "max_pairwise_diff", "penalty": 2.0},
        "sac": {"rollout_horizon": 30},
    },
    "cartpole_balance": {
        "model": {"n_members": 5, "hidden": [128, 128]},
        "privacy": {"clipping": "flat"},
        "pessimism": {"estimator": "max_pairwise_diff", "penalty": 2.0},
        "sac": {"rollout_horizon": 20},
    },
    "cartpole_swingup": {
        "model": {"n_members": 5, "hidden": [128, 128]},
        "privacy": {"clipping": "flat"},
        "pessimism": {"estimator": "max_aleatoric", "penalty": 2.0},
        "sac": {"rollout_horizon": 20},
    },
}

_BASE_CONFIG = {
    "env": "pendulum",
    "seed": 0,
    "dataset": {"k": 2000, "test_fraction": 0.01},
    "model": {
        "n_members": 3,
        "hidden": [64, 64],
        "weight_decay": 1e-4,
        "log_var_bounds": [-10.0, 0.5],
    },
    "privacy": {
        "q": 1e-3,
        "z": 0.0,
        "clip_norm": 1.0,
        "delta": 1e-5,
        "clipping": "flat",
        "local_epochs": 1,
        "batch_size": 16,
        "lr": 1e-3,
        "max_rounds": 1500,
        "early_stop_patience": 10,
        "eval_every": 10,
    },
    "pessimism": {"estimator": "max_pairwise_diff", "penalty": 2.0},
    "sac": {
        "lr": 3e-4,
        "batch_size": 256,
        "gamma": 0.99,
        "polyak": 0.995,
        "rollout_horizon": 30,
        "epochs": 30,
        "steps_per_epoch": 1000,
        "update_every": 1,
        "eval_episodes": 10,
        "warmup_steps": 1000,
        "replay_capacity": 1_000_000,
        "hidden": [64, 64],
        "target_entropy": -3.0,
        "init_alpha": 1.0,
    },
}

_SECTION_KEYS = {
    "dataset": {"k", "test_fraction"},
    "model": {"n_members", "hidden", "weight_decay", "log_var_bounds"},
    "privacy": {"q", "z", "clip_norm", "delta", "clipping", "local_epochs",
                "batch_size", "lr", "max_rounds", "early_stop_patience",
                "eval_every"},
    "pessimism": {"estimator", "penalty"},
    "sac": {"lr", "batch_size", "gamma", "polyak", "rollout_horizon", "epochs",
            "steps_per_epoch", "update_every", "eval_episodes", "warmup_steps",
            "replay_capacity", "hidden", "target_entropy", "init_alpha"},
}


def default_config(env_id="pendulum"):
    cfg = copy.deepcopy(_BASE_CONFIG)
    cfg["env"] = env_id
    for section, overrides in _ENV_DEFAULTS[env_id].items():
        cfg[section].update(copy.deepcopy(overrides))
    return cfg


def load_config(path=None, env_override=None):
    """Defaults merged with the config file; unknown keys are rejected."""
    user = {}
    if path is not None:
        try:
            with open(path) as f:
                user = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
    env_id = env_override or user.get("env") or "pendulum"
    if env_id not in _ENV_DEFAULTS:
        raise ConfigError(f"config key 'env': unknown environment {env_id!r}")
    cfg = default_config(env_id)
    for key, value in user.items():
        if key in ("env",):
            continue
        if key == "seed":
            cfg["seed"] = int(value)
            continue
        if key not in _SECTION_KEYS:
            raise ConfigError(f"config key {key!r} is not recognized")
        if not isinstance(value, dict):
            raise ConfigError(f"config key {key!r} must be an object")
        for sub, v in value.items():
            if sub not in _SECTION_KEYS[key]:
                raise ConfigError(f"config key {key!r}.{sub!r} is not recognized")
            cfg[key][sub] = v
    _validate_config(cfg)
    return cfg


def _validate_config(cfg):
    ds = cfg["dataset"]
    if not isinstance(ds["k"], int) or ds["k"] < 1:
        raise ConfigError("config key 'dataset'.'k' must be a positive integer")
    if not 0.0 < ds["test_fraction"] < 1.0:
        raise ConfigError("config key 'dataset'.'test_fraction' must be in (0, 1)")
    mdl = cfg["model"]
    if not isinstance(mdl["n_members"], int) or mdl["n_members"] < 1:
        raise ConfigError("config key 'model'.'n_members' must be a positive integer")
    if cfg["pessimism"]["estimator"] not in model.ESTIMATORS:
        raise ConfigError(
            f"config key 'pessimism'.'estimator' must be one of {model.ESTIMATORS}")
    if cfg["pessimism"]["penalty"] < 0:
        raise ConfigError("config key 'pessimism'.'penalty' must be non-negative")
    try:
        privacy_config(cfg)
        sac_config(cfg)
    except DomainError as exc:
        raise ConfigError(f"invalid config value: {exc}") from None


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def privacy_config(cfg) -> dp.PrivacyConfig:
    return dp.PrivacyConfig(**cfg["privacy"])


def sac_config(cfg) -> sac.SacConfig:
    d = dict(cfg["sac"])
    d["hidden"] = tuple(d["hidden"])
    return sac.SacConfig(**d)


def model_arch(cfg, spec) -> nn.MlpArch:
    mdl = cfg["model"]
    return nn.MlpArch(
        input_dim=spec.obs_dim + spec.act_dim,
        output_dim=2 * (spec.obs_dim + 1),
        hidden_layers=tuple(mdl["hidden"]),
        weight_decay=mdl["weight_decay"],
    )


def _stage_seed(master_seed, stage_index):
    return np.random.SeedSequence((int(master_seed), int(stage_index)))


def _stage_rng(master_seed, stage_index):
    return np.random.default_rng(_stage_seed(master_seed, stage_index))


_STAGE_COLLECT, _STAGE_SPLIT, _STAGE_MODEL, _STAGE_SAC, _STAGE_EVAL = range(5)


def _write_csv(path, kind, chash, seed, header, rows):
    with open(path, "w") as f:
        f.write(f"# {_CSV_VERSION} kind={kind} config_hash={chash} seed={seed}\n")
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _workers(args):
    if getattr(args, "workers", None):
        return args.workers
    return int(os.environ.get("PRIMORL_WORKERS", "1"))


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands

def cmd_collect(args):
    cfg = load_config(args.config, args.env)
    if args.seed is not None:
        cfg["seed"] = args.seed
    k = args.k or cfg["dataset"]["k"]
    spec = envs.make_spec(cfg["env"])
    mixture = behavior.default_mixture(spec)
    seed = int(_stage_rng(cfg["seed"], _STAGE_COLLECT).integers(0, 2**62))
    ds = data.collect(spec, mixture, k, seed)
    data.write_dataset(ds, args.out)
    print(f"collected {k} episodes ({ds.num_transitions()} transitions) "
          f"on {cfg['env']} -> {args.out}")
    return EXIT_OK


def cmd_split(args):
    ds = data.read_dataset(args.input)
    train, test = data.split_by_episode(ds, args.test_fraction, args.seed)
    data.write_dataset(train, args.out_train)
    data.write_dataset(test, args.out_test)
    print(f"split {ds.num_trajectories} episodes -> "
          f"{train.num_trajectories} train / {test.num_trajectories} test")
    return EXIT_OK


def _apply_privacy_overrides(cfg, args):
    for flag, key in (("z", "z"), ("q", "q"), ("clip", "clipping"),
                      ("clip_norm", "clip_norm")):
        v = getattr(args, flag, None)
        if v is not None:
            cfg["privacy"][key] = v


def cmd_train_model(args):
    cfg = load_config(args.config, args.env)
    if args.seed is not None:
        cfg["seed"] = args.seed
    _apply_privacy_overrides(cfg, args)
    chash = config_hash(cfg)
    out = _out_dir(args)
    train = data.read_dataset(args.train)
    test = data.read_dataset(args.test)
    ens, ledger, logs = _train_model(cfg, train, test, workers=_workers(args))
    _write_model_artifacts(out, cfg, chash, ens, ledger, logs)
    print(f"trained ensemble for {ledger.rounds} rounds; epsilon={ledger.epsilon}")
    return EXIT_OK


def _train_model(cfg, train, test, workers=1):
    spec = envs.make_spec(cfg["env"])
    arch = model_arch(cfg, spec)
    pcfg = privacy_config(cfg)
    rng = _stage_rng(cfg["seed"], _STAGE_MODEL)
    return dp.tdp_train(train, test, arch, cfg["model"]["n_members"], pcfg, rng,
                        workers=workers)


def _write_model_artifacts(out, cfg, chash, ens, ledger, logs):
    meta = {"config_hash": chash, "seed": cfg["seed"]}
    model.save_ensemble(ens, out / "ensemble.ckpt", meta=meta)
    _write_csv(out / "model_rounds.csv", "model-rounds", chash, cfg["seed"],
               ["round", "sampled", "update_norm", "test_nll", "epsilon"],
               [(l.round, l.sampled, l.update_norm, l.test_nll, l.epsilon)
                for l in logs])
    ledger_doc = ledger.as_dict()
    ledger_doc.update({
        "clip_norm": cfg["privacy"]["clip_norm"],
        "clipping": cfg["privacy"]["clipping"],
        "config_hash": chash,
        "seed": cfg["seed"],
    })
    with open(out / "ledger.json", "w") as f:
        json.dump(ledger_doc, f, indent=2, sort_keys=True)


def cmd_account(args):
    if args.table:
        rows = []
        for eps_target in args.eps_targets:
            for q in args.qs:
                for z in args.zs:
                    rows.append((eps_target, q, z,
                                 accountant.max_iterations(eps_target, q, z, args.delta)))
        out = args.out or "max_iterations.csv"
        _write_csv(out, "max-iterations", "-", "-",
                   ["epsilon_target", "q", "z", "max_iterations"], rows)
        print(f"wrote {len(rows)} rows -> {out}")
        return EXIT_OK
    eps = accountant.epsilon(args.z, args.q, args.T, args.delta)
    print(f"epsilon = {eps}")
    return EXIT_OK


def cmd_train_policy(args):
    cfg = load_config(args.config, args.env)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.lam is not None:
        cfg["pessimism"]["penalty"] = args.lam
    if args.estimator is not None:
        cfg["pessimism"]["estimator"] = args.estimator
    _validate_config(cfg)
    chash = config_hash(cfg)
    out = _out_dir(args)
    ens = model.load_ensemble(args.ensemble)

    ds = None
    if args.dataset is not None:
        ds = data.read_dataset(args.dataset)
        ds.audit.set_phase(data.Phase.POLICY_TRAINING)
    before = ds.audit.read_counter if ds is not None else 0
    if args.inject_read_fault:
        # deliberate violation used by the negative audit test
        ds.read_trajectory(0)

    policy, critics, metrics = _train_policy(cfg, ens)
    if ds is not None and ds.audit.read_counter != before:
        raise AuditViolationError("dataset was read during policy training")
    _write_policy_artifacts(out, cfg, chash, policy, critics, metrics)
    best = max(m.normalized_return for m in metrics)
    print(f"trained policy for {len(metrics)} epochs; "
          f"best normalized return {best:.1f}")
    return EXIT_OK


def _train_policy(cfg, ens):
    spec = envs.make_spec(cfg["env"])
    pmdp = model.make_pessimistic_mdp(
        ens, spec, cfg["pessimism"]["estimator"], cfg["pessimism"]["penalty"],
        cfg["sac"]["rollout_horizon"])
    scfg = sac_config(cfg)
    seed = int(_stage_rng(cfg["seed"], _STAGE_SAC).integers(0, 2**62))
    return sac.sac_train(pmdp, spec, scfg, seed)


def _write_policy_artifacts(out, cfg, chash, policy, critics, metrics):
    meta = {"config_hash": chash, "seed": cfg["seed"]}
    sac.save_policy(policy, critics, out / "policy.ckpt", meta=meta)
    _write_csv(out / "sac_metrics.csv", "sac-metrics", chash, cfg["seed"],
               ["epoch", "mean_return", "std_return", "normalized_return"],
               [(m.epoch, m.mean_return, m.std_return, m.normalized_return)
                for m in metrics])


def cmd_evaluate(args):
    spec = envs.make_spec(args.env)
    policy, _ = sac.load_policy(args.policy)
    result = sac.evaluate(spec, policy, args.episodes, args.seed)
    print(f"mean return {result.mean_return:.2f} "
          f"(normalized {result.mean_normalized:.2f}) over {args.episodes} episodes")
    if args.out:
        _write_csv(args.out, "evaluation", "-", args.seed,
                   ["episode", "return", "normalized_return"],
                   [(i, r, n) for i, (r, n) in
                    enumerate(zip(result.returns, result.normalized_returns))])
    return EXIT_OK


def cmd_pipeline(args):
    cfg = load_config(args.config, args.env)
    if args.seed is not None:
        cfg["seed"] = args.seed
    _apply_privacy_overrides(cfg, args)
    _validate_config(cfg)
    chash = config_hash(cfg)
    out = _out_dir(args)
    result = run_pipeline(cfg, out, workers=_workers(args))
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


def run_pipeline(cfg, out, workers=1):
    """collect -> split -> private model training -> accounting ->
    policy optimization -> evaluation, with the post-processing audit."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    spec = envs.make_spec(cfg["env"])

    collect_seed = int(_stage_rng(cfg["seed"], _STAGE_COLLECT).integers(0, 2**62))
    ds = data.collect(spec, behavior.default_mixture(spec),
                      cfg["dataset"]["k"], collect_seed)
    data.write_dataset(ds, out / "dataset.pmrl")

    split_seed = int(_stage_rng(cfg["seed"], _STAGE_SPLIT).integers(0, 2**62))
    train, test = data.split_by_episode(ds, cfg["dataset"]["test_fraction"], split_seed)

    train.audit.set_phase(data.Phase.MODEL_TRAINING)
    ens, ledger, logs = _train_model(cfg, train, test, workers=workers)
    _write_model_artifacts(out, cfg, chash, ens, ledger, logs)

    # Theorem-4 guard: policy optimization must be pure post-processing.
    reads_before = train.audit.read_counter
    train.audit.set_phase(data.Phase.POLICY_TRAINING)
    policy, critics, metrics = _train_policy(cfg, ens)
    reads_after = train.audit.read_counter
    if reads_after != reads_before:
        raise AuditViolationError(
            f"policy training read the dataset ({reads_after - reads_before} reads)")
    train.audit.set_phase(data.Phase.EVALUATION)
    _write_policy_artifacts(out, cfg, chash, policy, critics, metrics)

    eval_seed = int(_stage_rng(cfg["seed"], _STAGE_EVAL).integers(0, 2**31))
    result = sac.evaluate(spec, policy, cfg["sac"]["eval_episodes"], eval_seed)
    summary = {
        "env": cfg["env"],
        "config_hash": chash,
        "seed": cfg["seed"],
        "epsilon": ledger.epsilon,
        "model_rounds": ledger.rounds,
        "audit_reads_during_policy_phase": reads_after - reads_before,
        "mean_return": result.mean_return,
        "mean_normalized_return": result.mean_normalized,
    }
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    return summary


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(
        prog="primorl",
        description="Differentially private model-based offline RL pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON config file")
            sp.add_argument("--env", choices=list(_ENV_DEFAULTS), help="environment id")
        sp.add_argument("--seed", type=int, default=None, help="master seed")

    sp = sub.add_parser("collect", help="generate an offline dataset")
    add_common(sp)
    sp.add_argument("--k", type=int, default=None, help="number of episodes")
    sp.add_argument("--out", required=True, help="output dataset file")
    sp.set_defaults(func=cmd_collect)

    sp = sub.add_parser("split", help="episode-wise train/test split")
    sp.add_argument("--in", dest="input", required=True, help="input dataset file")
    sp.add_argument("--test-fraction", type=float, default=0.01)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-train", required=True)
    sp.add_argument("--out-test", required=True)
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("train-model", help="trajectory-level DP ensemble training")
    add_common(sp)
    sp.add_argument("--train", required=True, help="train dataset file")
    sp.add_argument("--test", required=True, help="test dataset file")
    sp.add_argument("--z", type=float, default=None, help="noise multiplier")
    sp.add_argument("--q", type=float, default=None, help="sampling ratio")
    sp.add_argument("--clip", choices=dp.CLIPPING_STRATEGIES, default=None)
    sp.add_argument("--clip-norm", dest="clip_norm", type=float, default=None)
    sp.add_argument("--workers", type=int, default=None)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_train_model)

    sp = sub.add_parser("account", help="privacy accounting queries")
    sp.add_argument("--z", type=float, required=True)
    sp.add_argument("--q", type=float, required=True)
    sp.add_argument("--T", type=int, default=0)
    sp.add_argument("--delta", type=float, default=1e-5)
    sp.add_argument("--table", action="store_true",
                    help="write a max-iterations CSV instead of one epsilon")
    sp.add_argument("--eps-targets", type=float, nargs="+",
                    default=[100.0, 1000.0, 10000.0])
    sp.add_argument("--qs", type=float, nargs="+", default=[1e-2, 1e-3, 1e-4])
    sp.add_argument("--zs", type=float, nargs="+",
                    default=[0.3, 0.5, 0.7, 1.0, 1.5, 2.0])
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_account)

    sp = sub.add_parser("train-policy", help="SAC inside the pessimistic model")
    add_common(sp)
    sp.add_argument("--ensemble", required=True, help="ensemble checkpoint")
    sp.add_argument("--lambda", dest="lam", type=float, default=None,
                    help="uncertainty penalty weight")
    sp.add_argument("--estimator", choices=model.ESTIMATORS, default=None)
    sp.add_argument("--dataset", default=None,
                    help="optional dataset whose audit is asserted untouched")
    sp.add_argument("--inject-read-fault", action="store_true",
                    help=argparse.SUPPRESS)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_train_policy)

    sp = sub.add_parser("evaluate", help="run a policy in the true environment")
    sp.add_argument("--env", choices=list(_ENV_DEFAULTS), required=True)
    sp.add_argument("--policy", required=True, help="policy checkpoint")
    sp.add_argument("--episodes", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None, help="optional per-episode CSV")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("pipeline", help="run every stage end to end")
    add_common(sp)
    sp.add_argument("--z", type=float, default=None)
    sp.add_argument("--q", type=float, default=None)
    sp.add_argument("--clip", choices=dp.CLIPPING_STRATEGIES, default=None)
    sp.add_argument("--clip-norm", dest="clip_norm", type=float, default=None)
    sp.add_argument("--workers", type=int, default=None)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_pipeline)

    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except AuditViolationError as exc:
        print(f"audit violation: {exc}", file=sys.stderr)
        return EXIT_AUDIT
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DomainError, PrimorlError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
