"""Command-line entry point: ``bpolab <command> [--config FILE] [--out DIR] [--seed N]``.

Every command writes a run directory holding the resolved config, the seed,
a content hash of the inputs and the command's outputs. Exit status is 0 when
all requested checks pass, 1 on a check failure and 2 on usage or config errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .bpo import BpoConfig, ConfigError, run_bpo
from .envs import REGISTRY, make_env, random_baseline, simulate, trajopt_oracle, write_trajectory_csv

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

# per-command defaults; a config file may override any key and nothing else
DEFAULTS = {
    "fit-offline": {
        "env": "one_bounce", "horizon": 20, "seed": 0, "n_transitions": 100_000, "n_steps": 1000,
        "batch_size": 64, "learning_rate": 1e-3, "n_points": 200,
        "models": [{"family": "actions", "backbone": "attention"}, {"family": "markovian"}],
    },
    "sweep-gradnorm": {
        "env": "double_pendulum", "horizons": [5, 10, 20, 50, 100], "n_actions": 50, "seed": 0,
        "models": [], "n_transitions": 100_000, "n_steps": 300, "batch_size": 64, "learning_rate": 1e-3,
    },
    "sweep-landscape": {"env": "one_bounce", "horizon": 20, "n_points": 200, "seed": 0, "checkpoints": {}},
    "verify": {"seed": 0, "n_gradcheck": 100, "n_f_rnn_seeds": 20, "n_bound_configs": 50, "n_attention_seeds": 20},
    "oracle": {"env": "harvest", "horizon": 20, "seed": 0, "iters": 500, "n_starts": 8, "n_baseline": 100},
    "baseline": {"env": "harvest", "horizon": 20, "seed": 0, "episodes": 100},
}


class UsageError(Exception):
    pass


# -- config and run directory -----------------------------------------------------------


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return data


def resolve_config(command: str, raw: dict, seed: int | None) -> dict:
    """Merge ``raw`` over the command defaults, validating keys and the env name."""
    if command == "train":
        data = dict(raw)
        if seed is not None:
            data["seed"] = seed
        try:
            cfg = BpoConfig.from_dict(data)
        except (ConfigError, TypeError) as exc:
            raise UsageError(str(exc)) from None
        if cfg.env not in REGISTRY:
            raise UsageError(f"unknown env {cfg.env!r}; choose from {sorted(REGISTRY)}")
        return cfg.to_dict()
    defaults = DEFAULTS[command]
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {unknown}")
    cfg = {**defaults, **raw}
    if seed is not None:
        cfg["seed"] = seed
    if "env" in cfg and cfg["env"] not in REGISTRY:
        raise UsageError(f"unknown env {cfg['env']!r}; choose from {sorted(REGISTRY)}")
    return cfg


def content_hash(command: str, cfg: dict) -> str:
    """Git blob-style SHA-1 over the command, the resolved config and the package version."""
    body = json.dumps({"command": command, "config": cfg, "version": __version__},
                      sort_keys=True).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def prepare_run_dir(out: Path, force: bool, command: str, cfg: dict) -> Path:
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"{out} already holds a run; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    (out / "run.json").write_text(json.dumps({
        "command": command, "seed": cfg.get("seed"), "content_hash": content_hash(command, cfg),
        "version": __version__,
    }, indent=2))
    return out


def _write_json(path: Path, data) -> Path:
    path.write_text(json.dumps(data, indent=2, default=float))
    return path


# -- commands ---------------------------------------------------------------------------


def cmd_train(cfg: dict, out: Path, workers: int) -> int:
    result = run_bpo(BpoConfig.from_dict(cfg), out_dir=out)
    _write_json(out / "summary.json", {
        "final_normalized": result.final_normalized, "best_normalized": result.best_normalized(),
        "skipped_model_steps": result.skipped_model_steps,
        "skipped_policy_steps": result.skipped_policy_steps,
    })
    return EXIT_OK


def _fit_models(cfg: dict, env, out: Path | None):
    from .analysis import collect_random_transitions, offline_fit

    data = collect_random_transitions(env, cfg["n_transitions"], cfg["seed"])
    models = {}
    for spec in cfg["models"]:
        spec = dict(spec)
        family = spec.pop("family")
        backbone = spec.pop("backbone", None)
        name = spec.pop("name", family if backbone is None else f"{family}_{backbone}")
        model = offline_fit(env, family, backbone, n_steps=cfg["n_steps"], batch_size=cfg["batch_size"],
                            learning_rate=cfg["learning_rate"], seed=cfg["seed"], data=data, **spec)
        if out is not None:
            model.save(out / "models" / name)
        models[name] = model
    return models


def cmd_fit_offline(cfg: dict, out: Path, workers: int) -> int:
    from .analysis import landscape_sweep

    env = make_env(cfg["env"], cfg["horizon"])
    models = _fit_models(cfg, env, out)
    sweep = landscape_sweep({"true": "true", **models}, env, cfg["n_points"])
    sweep.to_csv(out / "landscape.csv")
    truth = sweep.outputs["true"]
    _write_json(out / "summary.json", {
        name: {"final_loss": float(m.loss_curve_[-1]) if m.loss_curve_ else None,
               "landscape_mse": float(np.mean((sweep.outputs[name] - truth) ** 2))}
        for name, m in models.items()
    })
    return EXIT_OK


def cmd_sweep_gradnorm(cfg: dict, out: Path, workers: int) -> int:
    from .analysis import grad_norm_sweep

    horizons = sorted(cfg["horizons"])
    env = make_env(cfg["env"], max(horizons))
    models = _fit_models(cfg, env, out) if cfg["models"] else {}
    sweep = grad_norm_sweep({"true": "true", **models}, env, horizons, cfg["n_actions"], cfg["seed"])
    sweep.to_csv(out / "gradnorm.csv")
    return EXIT_OK


def cmd_sweep_landscape(cfg: dict, out: Path, workers: int) -> int:
    from .analysis import landscape_sweep
    from .worldmodels import load_world_model

    env = make_env(cfg["env"], cfg["horizon"])
    targets = {"true": "true"}
    for name, path in cfg["checkpoints"].items():
        try:
            targets[name] = load_world_model(path)
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot load checkpoint {path}: {exc}") from None
    landscape_sweep(targets, env, cfg["n_points"]).to_csv(out / "landscape.csv")
    return EXIT_OK


def cmd_oracle(cfg: dict, out: Path, workers: int) -> int:
    env = make_env(cfg["env"], cfg["horizon"])
    actions, j_star = trajopt_oracle(env, iters=cfg["iters"], n_starts=cfg["n_starts"], seed=cfg["seed"])
    j_rand = random_baseline(env, cfg["n_baseline"], cfg["seed"])
    states, rewards = simulate(env, actions[None])
    write_trajectory_csv(out / "oracle_trajectory.csv", states[0], actions, rewards[0])
    _write_json(out / "reference.json", {"env": env.name, "horizon": env.horizon,
                                         "j_rand": j_rand, "j_star": j_star})
    return EXIT_OK if j_star > j_rand else EXIT_FAIL


def cmd_baseline(cfg: dict, out: Path, workers: int) -> int:
    env = make_env(cfg["env"], cfg["horizon"])
    j = random_baseline(env, cfg["episodes"], cfg["seed"])
    _write_json(out / "baseline.json", {"env": env.name, "horizon": env.horizon,
                                        "episodes": cfg["episodes"], "j_rand": j})
    return EXIT_OK


def cmd_verify(cfg: dict, out: Path, workers: int) -> int:
    from . import verification

    checks = verification.theory_checks(cfg)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(verification.run_check, checks))
    else:
        results = [verification.run_check(c) for c in checks]
    passed = all(r["passed"] for r in results)
    path = _write_json(out / "verify.json", {"passed": passed, "checks": results})
    for r in results:
        print(f"{'PASS' if r['passed'] else 'FAIL'}  {r['name']}: {r['detail']}")
    if not passed:
        print(f"failing report: {path}", file=sys.stderr)
    return EXIT_OK if passed else EXIT_FAIL


COMMANDS = {
    "train": cmd_train,
    "fit-offline": cmd_fit_offline,
    "sweep-gradnorm": cmd_sweep_gradnorm,
    "sweep-landscape": cmd_sweep_landscape,
    "verify": cmd_verify,
    "oracle": cmd_oracle,
    "baseline": cmd_baseline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bpolab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON config; omitted keys take their defaults")
        p.add_argument("--out", type=Path, default=None, help="run directory (default runs/<command>)")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
        p.add_argument("--workers", type=int, default=1, help="cap on parallel worker processes")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise UsageError("--seed must fit in an unsigned 64-bit integer")
        cfg = resolve_config(args.command, _read_config(args.config), args.seed)
        out = prepare_run_dir(args.out or Path("runs") / args.command, args.force, args.command, cfg)
        status = COMMANDS[args.command](cfg, out, args.workers)
    except UsageError as exc:
        print(f"bpolab {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"wrote {out}")
    return status


if __name__ == "__main__":
    sys.exit(main())
