"""Backpropagation-based Policy Optimization (BPO).

Each outer iteration collects one real episode, regresses the world model on
replayed episodes, then ascends the policy objective by backpropagating through
imagined rollouts of the model from the fixed initial state.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .autodiff import Tape, Value, backward
from .envs import EnvProblem, make_env, normalized_return, reference_returns
from .nets import Adam, save_params
from .policy import SquashedGaussianPolicy, policy_objective
from .worldmodels import Trajectory, WorldModel, make_world_model, unroll

__all__ = [
    "BpoConfig",
    "ConfigError",
    "ReplayBuffer",
    "collect_episode",
    "evaluate_policy",
    "train_model_step",
    "train_policy_step",
    "run_bpo",
    "BpoResult",
    "BPOAgent",
    "LOG_COLUMNS",
    "REPLAY_RATIO_NOTE",
]

LOG_COLUMNS = ["env_steps", "episode", "model_loss", "eval_return", "normalized_return",
               "grad_norm", "wall_ms"]
REPLAY_RATIO_NOTE = ("dynamics_replay_ratio = model gradient steps per collected environment step "
                     "(ratio * (H-1) per episode); policy_replay_ratio = policy gradient steps per "
                     "collected episode")


class ConfigError(ValueError):
    """Invalid or unknown configuration entries."""


@dataclass
class BpoConfig:
    env: str = "harvest"
    horizon: int = 20
    total_env_steps: int = 200_000
    dynamics_replay_ratio: float = 2.0
    policy_replay_ratio: int = 16
    dynamics_batch_size: int = 64
    policy_batch_size: int = 16
    dynamics_lr: float = 1e-3
    policy_lr: float = 1e-4
    entropy_coef: float = 0.01
    stop_grad: bool = True
    clip_norm: float = 100.0
    family: str = "actions"
    backbone: str = "attention"
    seed: int = 0
    buffer_size: int = 1_000_000
    warmup_steps: int = 1500
    checkpoint_every: int = 10
    model_params: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        positive = ["horizon", "total_env_steps", "dynamics_replay_ratio", "policy_replay_ratio",
                    "dynamics_batch_size", "policy_batch_size", "dynamics_lr", "policy_lr",
                    "clip_norm", "buffer_size"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.horizon < 2:
            raise ConfigError("horizon must be at least 2 for training")
        if self.entropy_coef < 0 or self.warmup_steps < 0 or self.checkpoint_every < 0:
            raise ConfigError("entropy_coef, warmup_steps and checkpoint_every must be >= 0")
        if self.family not in ("markovian", "history", "actions"):
            raise ConfigError(f"unknown model family {self.family!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "BpoConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path) -> "BpoConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "BpoConfig":
        return dataclasses.replace(self, **changes)


class ReplayBuffer:
    """FIFO store of whole episodes, bounded by the number of transitions held."""

    def __init__(self, capacity: int = 1_000_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.episodes: deque[Trajectory] = deque()
        self.transitions = 0

    def __len__(self) -> int:
        return len(self.episodes)

    def add(self, tr: Trajectory) -> None:
        n = tr.horizon - 1
        if n > self.capacity:
            raise ValueError("episode longer than buffer capacity")
        self.episodes.append(tr)
        self.transitions += n
        while self.transitions > self.capacity:
            self.transitions -= self.episodes.popleft().horizon - 1

    def ready(self, warmup: int) -> bool:
        return len(self.episodes) > 0 and self.transitions >= warmup

    def sample(self, batch: int, rng: np.random.Generator):
        """Uniformly sampled episodes as ``(S (B, H, n), A (B, H-1, m))``."""
        if not self.episodes:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, len(self.episodes), size=batch)
        eps = [self.episodes[i] for i in idx]
        return np.stack([e.states for e in eps]), np.stack([e.actions for e in eps])


def collect_episode(env: EnvProblem, policy: SquashedGaussianPolicy | None,
                    rng: np.random.Generator, explore: bool = True) -> Trajectory:
    """Run one real episode; ``policy=None`` means uniform-random actions."""
    H = env.horizon
    s = env.initial_state(1)
    states, actions, rewards = [s.data[0]], [], []
    for t in range(1, H):
        if policy is None:
            a = Value(env.sample_actions(rng, (1,)))
        else:
            noise = rng.standard_normal((1, env.action_dim)) if explore else np.zeros((1, env.action_dim))
            a, _ = policy.act(Tape(), s, t, noise)
            a = Value(a.data)
        rewards.append(float(env.reward(s, a, t).data[0]))
        s = env.step(s, a, t)
        states.append(s.data[0])
        actions.append(a.data[0])
    rewards.append(float(env.reward(s, None, H).data[0]))
    return Trajectory(np.array(states), np.array(actions).reshape(H - 1, env.action_dim),
                      np.array(rewards))


def evaluate_policy(env: EnvProblem, policy: SquashedGaussianPolicy) -> float:
    """Return of the mean-action (zero-noise) policy in the real environment."""
    rng = np.random.default_rng(0)
    return collect_episode(env, policy, rng, explore=False).ret


def train_model_step(model: WorldModel, buffer: ReplayBuffer, cfg: BpoConfig,
                     rng: np.random.Generator) -> float:
    """One model regression step on a replayed batch; returns the pre-step loss (nan if skipped)."""
    S, A = buffer.sample(cfg.dynamics_batch_size, rng)
    return model.train_step(S, A, clip=cfg.clip_norm)


def train_policy_step(model: WorldModel, policy: SquashedGaussianPolicy, env: EnvProblem,
                      cfg: BpoConfig, optimizer: Adam, rng: np.random.Generator):
    """One ascent step through imagined rollouts.

    Returns ``(objective, grad norm before clipping, grad norm after clipping)``;
    a non-finite objective or gradient skips the update and returns nan norms.
    """
    B, H = cfg.policy_batch_size, env.horizon
    noise = rng.standard_normal((H - 1, B, env.action_dim))
    tape = Tape()
    try:
        rollout = unroll(model, policy, env, tape, batch=B, noise=noise, stop_grad=cfg.stop_grad)
        obj = policy_objective(rollout, policy)
    except FloatingPointError:
        return float("nan"), float("nan"), float("nan")
    if not np.isfinite(obj.data):
        return float("nan"), float("nan"), float("nan")
    params = policy.parameters()
    grads = tape.param_grads(backward(tape, obj), params)
    try:
        pre, post = optimizer.step([-g for g in grads], clip=cfg.clip_norm)
    except FloatingPointError:
        return float(obj.data), float("nan"), float("nan")
    return float(obj.data), pre, post


@dataclass
class BpoResult:
    config: BpoConfig
    rows: list
    model: WorldModel
    policy: SquashedGaussianPolicy
    reference: tuple
    skipped_model_steps: int = 0
    skipped_policy_steps: int = 0

    @property
    def final_normalized(self) -> float:
        return float(self.rows[-1]["normalized_return"])

    def best_normalized(self) -> float:
        return float(max(r["normalized_return"] for r in self.rows))

    def moving_normalized(self, window: int = 3) -> np.ndarray:
        """Trailing means of the normalized return over ``window`` evaluations."""
        y = np.array([r["normalized_return"] for r in self.rows], dtype=float)
        if window < 1 or window > y.size:
            raise ValueError(f"window must be in [1, {y.size}]")
        return np.convolve(y, np.ones(window) / window, mode="valid")

    def tail_normalized(self, window: int = 10) -> float:
        """Mean normalized return over the last ``window`` evaluations."""
        return float(self.moving_normalized(window)[-1])


def _seeds(seed: int):
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def run_bpo(cfg: BpoConfig, out_dir=None, reference: tuple | None = None,
            progress=None) -> BpoResult:
    """Algorithm loop; writes ``log.csv`` (and checkpoints) into ``out_dir`` if given."""
    env = make_env(cfg.env, cfg.horizon)
    H = env.horizon
    ref = reference if reference is not None else reference_returns(env)
    rng_init, rng_collect, rng_model, rng_policy = _seeds(cfg.seed)
    model_seed = int(rng_init.integers(2**31))
    model = make_world_model(cfg.family, env, None if cfg.family == "markovian" else cfg.backbone,
                             learning_rate=cfg.dynamics_lr, batch_size=cfg.dynamics_batch_size,
                             random_state=model_seed, **cfg.model_params)
    policy = SquashedGaussianPolicy.for_env(env, rng=rng_init, entropy_coef=cfg.entropy_coef)
    optimizer = Adam(policy.parameters(), lr=cfg.policy_lr)
    buffer = ReplayBuffer(cfg.buffer_size)
    n_model_steps = max(1, int(round(cfg.dynamics_replay_ratio * (H - 1))))

    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "run_info.json").write_text(json.dumps({
            "replay_ratio": REPLAY_RATIO_NOTE, "model_steps_per_episode": n_model_steps,
            "policy_steps_per_episode": cfg.policy_replay_ratio, "reference_returns": list(ref),
        }, indent=2))
        fh = (out / "log.csv").open("w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)

    rows, env_steps, episode = [], 0, 0
    skipped_m = skipped_p = 0
    t0 = time.perf_counter()
    try:
        while env_steps < cfg.total_env_steps:
            warm = not buffer.ready(cfg.warmup_steps)
            tr = collect_episode(env, None if warm else policy, rng_collect)
            buffer.add(tr)
            env_steps += H - 1
            episode += 1
            losses, norms = [], []
            if buffer.ready(cfg.warmup_steps):
                for _ in range(n_model_steps):
                    loss = train_model_step(model, buffer, cfg, rng_model)
                    skipped_m += not np.isfinite(loss)
                    losses.append(loss)
                for _ in range(cfg.policy_replay_ratio):
                    _, _, post = train_policy_step(model, policy, env, cfg, optimizer, rng_policy)
                    skipped_p += not np.isfinite(post)
                    norms.append(post)
            j = evaluate_policy(env, policy)
            finite = [x for x in norms if np.isfinite(x)]
            row = {
                "env_steps": env_steps,
                "episode": episode,
                "model_loss": float(np.nanmean(losses)) if losses and np.isfinite(losses).any() else float("nan"),
                "eval_return": j,
                "normalized_return": float(normalized_return(env, j, ref)),
                "grad_norm": max(finite) if finite else float("nan"),
                "wall_ms": int((time.perf_counter() - t0) * 1000),
            }
            rows.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[c]) for c in LOG_COLUMNS])
                fh.flush()
                if cfg.checkpoint_every and episode % cfg.checkpoint_every == 0:
                    _checkpoint(out, episode, model, policy, cfg)
            if progress is not None:
                progress(row)
    finally:
        if fh is not None:
            fh.close()
    return BpoResult(cfg, rows, model, policy, tuple(ref), skipped_m, skipped_p)


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _checkpoint(out: Path, episode: int, model: WorldModel, policy, cfg: BpoConfig) -> None:
    ck = out / "checkpoints"
    model.save(ck / f"model_ep{episode:05d}")
    save_params(policy, ck / f"policy_ep{episode:05d}",
                {"kind": "squashed_gaussian", "env": cfg.env, "horizon": cfg.horizon})


class BPOAgent(BaseEstimator):
    """Estimator wrapper: ``fit`` runs BPO, ``predict`` gives mean actions."""

    def __init__(self, env="harvest", horizon=20, total_env_steps=200_000, family="actions",
                 backbone="attention", policy_lr=1e-4, dynamics_lr=1e-3, entropy_coef=0.01,
                 stop_grad=True, seed=0, config_overrides=None):
        self.env = env
        self.horizon = horizon
        self.total_env_steps = total_env_steps
        self.family = family
        self.backbone = backbone
        self.policy_lr = policy_lr
        self.dynamics_lr = dynamics_lr
        self.entropy_coef = entropy_coef
        self.stop_grad = stop_grad
        self.seed = seed
        self.config_overrides = config_overrides

    def _config(self) -> BpoConfig:
        base = dict(env=self.env, horizon=self.horizon, total_env_steps=self.total_env_steps,
                    family=self.family, backbone=self.backbone, policy_lr=self.policy_lr,
                    dynamics_lr=self.dynamics_lr, entropy_coef=self.entropy_coef,
                    stop_grad=self.stop_grad, seed=self.seed)
        base.update(self.config_overrides or {})
        return BpoConfig.from_dict(base)

    def fit(self, X=None, y=None):
        result = run_bpo(self._config())
        self.result_ = result
        self.policy_ = result.policy
        self.model_ = result.model
        self.log_ = result.rows
        return self

    def predict(self, states, t: int = 1) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        return self.policy_.mean_action(states, t)

    def score(self, X=None, y=None) -> float:
        env = make_env(self.env, self.horizon)
        return float(normalized_return(env, evaluate_policy(env, self.policy_)))
