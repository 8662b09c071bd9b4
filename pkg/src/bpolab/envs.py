"""Deterministic finite-horizon environments with tape-expressible dynamics.

Every environment works on batches: states are ``(B, n)`` values, actions
``(B, m)``. Dynamics and rewards are written with :class:`~bpolab.autodiff.Value`
operators, so the same code runs plain (on constants) or on a tape.

Timesteps are 1-indexed: an episode visits ``s_1 .. s_H`` and takes actions
``a_1 .. a_{H-1}``; the return is ``sum_{t=1}^{H} r_t``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .autodiff import Tape, Value, backward

__all__ = [
    "EnvProblem",
    "OdeProblem",
    "OneBounce",
    "DoublePendulum",
    "LinearSystem",
    "CancerTreatment",
    "MouldFungicide",
    "Bacteria",
    "Harvest",
    "REGISTRY",
    "make_env",
    "simulate",
    "random_baseline",
    "trajopt_oracle",
    "reference_returns",
    "normalized_return",
    "write_trajectory_csv",
    "DynamicsError",
]


class DynamicsError(FloatingPointError):
    """Raised when a rollout produces non-finite states."""


def _const(x, like: Value) -> Value:
    return Value(np.broadcast_to(np.asarray(x, dtype=np.float64), like.shape).copy())


def _col(s: Value, i: int) -> Value:
    return s[:, i : i + 1]


def _cat(cols) -> Value:
    tape = next((c.tape for c in cols if c.tape is not None), None)
    if tape is None:
        return Value(np.concatenate([c.data for c in cols], axis=-1))
    return tape.concatenate(cols, axis=-1)


class EnvProblem:
    """Base class: ``M = (S, A, f, r, H, s_1)`` with batched, tape-aware ``f`` and ``r``."""

    name = "env"
    state_dim = 1
    action_dim = 1
    terminal_only = False
    # reward ignores the action, as the state-Lipschitz gradient bound assumes
    state_only_reward = False

    def __init__(self, horizon: int):
        if horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {horizon}")
        self.horizon = int(horizon)

    # subclasses fill these in
    low: np.ndarray
    high: np.ndarray
    s1: np.ndarray
    obs_shift: np.ndarray
    obs_scale: np.ndarray

    def with_horizon(self, horizon: int) -> "EnvProblem":
        return type(self)(horizon)

    def initial_state(self, batch: int = 1) -> Value:
        return Value(np.tile(self.s1, (batch, 1)))

    def step(self, s: Value, a: Value, t: int) -> Value:
        raise NotImplementedError

    def reward(self, s: Value, a: Value | None, t: int) -> Value:
        """Per-step reward, shape ``(B,)``; ``a`` is None at ``t == H``."""
        raise NotImplementedError

    def sample_actions(self, rng: np.random.Generator, shape) -> np.ndarray:
        return rng.uniform(self.low, self.high, size=tuple(shape) + (self.action_dim,))

    def clip_actions(self, a: np.ndarray) -> np.ndarray:
        return np.clip(a, self.low, self.high)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(H={self.horizon})"


@dataclass
class OdeSpec:
    """Continuous-time problem ``x' = phi(x, u)`` with running reward ``rho``."""

    duration: float
    x1: tuple
    low: tuple
    high: tuple
    scale: tuple
    params: dict = field(default_factory=dict)


class OdeProblem(EnvProblem):
    """Euler discretization with ``dt = T / H``; changing H rescales dt, T is fixed."""

    spec: OdeSpec

    def __init__(self, horizon: int):
        super().__init__(horizon)
        sp = self.spec
        self.dt = sp.duration / self.horizon
        self.low = np.asarray(sp.low, dtype=float)
        self.high = np.asarray(sp.high, dtype=float)
        self.s1 = np.asarray(sp.x1, dtype=float)
        self.obs_shift = np.zeros(self.state_dim)
        self.obs_scale = np.asarray(sp.scale, dtype=float)

    def phi(self, x: Value, u: Value) -> Value:
        raise NotImplementedError

    def rho(self, x: Value, u: Value) -> Value:
        raise NotImplementedError

    def terminal(self, x: Value) -> Value:
        return _const(0.0, x).sum(axis=-1)

    def step(self, s, a, t):
        return s + self.phi(s, a) * self.dt

    def reward(self, s, a, t):
        if t >= self.horizon:
            return self.terminal(s)
        return self.rho(s, a).sum(axis=-1) * self.dt


class CancerTreatment(OdeProblem):
    """Tumour density under chemotherapy: ``x' = r x ln(1/x) - delta u x``."""

    name = "cancer"
    spec = OdeSpec(duration=20.0, x1=(0.975,), low=(0.0,), high=(2.0,), scale=(1.0,),
                   params={"r": 0.3, "delta": 0.45})

    def __init__(self, horizon: int):
        super().__init__(horizon)
        # the Euler step keeps x > 0 only if delta * u_max * dt < 1
        if self.spec.params["delta"] * self.high[0] * self.dt >= 1.0:
            min_h = math.floor(self.spec.params["delta"] * self.high[0] * self.spec.duration) + 1
            raise ValueError(f"cancer: horizon {horizon} gives a step too coarse to keep x > 0; "
                             f"use H >= {min_h}")

    def phi(self, x, u):
        p = self.spec.params
        return (x * (-x.log())) * p["r"] - (u * x) * p["delta"]

    def rho(self, x, u):
        return -(x + u.square())


class MouldFungicide(OdeProblem):
    """Mould concentration under fungicide: ``x' = g (M - x) - u x``."""

    name = "mould"
    spec = OdeSpec(duration=5.0, x1=(1.0,), low=(0.0,), high=(5.0,), scale=(5.0,),
                   params={"g": 0.3, "M": 10.0, "A": 1.0})

    def phi(self, x, u):
        p = self.spec.params
        return (p["M"] - x) * p["g"] - u * x

    def rho(self, x, u):
        return -(x + u.square() * self.spec.params["A"])


class Bacteria(OdeProblem):
    """Bacteria growth with nutrient: ``x' = g x + A u x``; terminal reward ``C x_H``."""

    name = "bacteria"
    terminal_only = False
    spec = OdeSpec(duration=1.0, x1=(1.0,), low=(0.0,), high=(2.0,), scale=(5.0,),
                   params={"g": 1.0, "A": 1.0, "C": 1.0})

    def phi(self, x, u):
        p = self.spec.params
        return x * p["g"] + (u * x) * p["A"]

    def rho(self, x, u):
        return -u.square()

    def terminal(self, x):
        return (x * self.spec.params["C"]).sum(axis=-1)


class Harvest(OdeProblem):
    """Logistic population under harvesting: ``x' = g x (1 - x/K) - u x``, reward ``u x``."""

    name = "harvest"
    spec = OdeSpec(duration=10.0, x1=(0.5,), low=(0.0,), high=(1.0,), scale=(1.0,),
                   params={"g": 1.0, "K": 1.0})

    def phi(self, x, u):
        p = self.spec.params
        return (x * (1.0 - x * (1.0 / p["K"]))) * p["g"] - u * x

    def rho(self, x, u):
        return u * x


class OneBounce(EnvProblem):
    """A block pushed toward a wall at x=0; it reflects elastically once it crosses.

    State ``(x, v)``. Only the first action is used: it sets the velocity.
    A single terminal reward ``-(x_H - goal)^2`` is given at ``t = H``.
    """

    name = "one_bounce"
    state_dim = 2
    action_dim = 1
    terminal_only = True
    state_only_reward = True
    duration = 1.0
    goal = 0.5

    def __init__(self, horizon: int = 20):
        super().__init__(horizon)
        self.dt = self.duration / self.horizon
        self.low = np.array([-3.0])
        self.high = np.array([0.0])
        self.s1 = np.array([1.0, 0.0])
        self.obs_shift = np.array([1.0, 0.0])
        self.obs_scale = np.array([1.0, 2.0])

    def step(self, s, a, t):
        x, v = _col(s, 0), _col(s, 1)
        if t == 1:
            v = a
        x_raw = x + v * self.dt
        # branch fixed by the forward value; at exactly 0 the pre-bounce piece is kept
        sign = np.where(x_raw.data < 0.0, -1.0, 1.0)
        return _cat([x_raw * Value(sign), v * Value(sign)])

    def reward(self, s, a, t):
        if t < self.horizon:
            return _const(0.0, s).sum(axis=-1)
        return -((_col(s, 0) - self.goal).square().sum(axis=-1))


class DoublePendulum(EnvProblem):
    """Frictionless double pendulum, unit masses and lengths, RK4 integration.

    Each environment step advances a fixed ``dt`` seconds using ``substeps``
    RK4 substeps, so a longer horizon means a longer simulated duration.

    State ``(theta1, theta2, omega1, omega2)``, angles measured from hanging
    down. The first action sets ``theta1 = pi * a``; later actions are ignored.
    The terminal reward is ``-||s_H - s_goal||^2`` where ``s_goal`` is the H-step
    rollout from the reference action ``-0.4``.
    """

    name = "double_pendulum"
    state_dim = 4
    action_dim = 1
    terminal_only = True
    state_only_reward = True
    gravity = 9.81
    dt = 0.1
    substeps = 8
    goal_action = -0.4

    def __init__(self, horizon: int = 100):
        super().__init__(horizon)
        self.low = np.array([-1.0])
        self.high = np.array([1.0])
        self.s1 = np.zeros(4)
        self.obs_shift = np.zeros(4)
        self.obs_scale = np.array([3.0, 3.0, 8.0, 8.0])
        self._goal = None

    @property
    def s_goal(self) -> np.ndarray:
        if self._goal is None:
            acts = np.full((1, max(self.horizon - 1, 0), 1), self.goal_action)
            states, _ = simulate(self, acts, rewards=False)
            self._goal = states[0, -1]
        return self._goal

    def derivatives(self, s: Value) -> Value:
        g = self.gravity
        th1, th2, w1, w2 = (_col(s, i) for i in range(4))
        d = th1 - th2
        sin_d, cos_d = d.sin(), d.cos()
        den = 3.0 - (d * 2.0).cos()
        w1sq, w2sq = w1.square(), w2.square()
        num1 = (th1.sin() * (-3.0 * g) - (th1 - th2 * 2.0).sin() * g
                - (sin_d * (w2sq + w1sq * cos_d)) * 2.0)
        num2 = (sin_d * (w1sq * 2.0 + th1.cos() * (2.0 * g) + w2sq * cos_d)) * 2.0
        return _cat([w1, w2, num1 / den, num2 / den])

    def rk4(self, s: Value) -> Value:
        h = self.dt / self.substeps
        for _ in range(self.substeps):
            k1 = self.derivatives(s)
            k2 = self.derivatives(s + k1 * (h / 2))
            k3 = self.derivatives(s + k2 * (h / 2))
            k4 = self.derivatives(s + k3 * h)
            s = s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6)
        return s

    def step(self, s, a, t):
        if t == 1:
            s = _cat([a * math.pi, _col(s, 1), _col(s, 2), _col(s, 3)])
        out = self.rk4(s)
        if not np.all(np.isfinite(out.data)):
            raise DynamicsError(f"double pendulum: non-finite state at step {t}")
        return out

    def reward(self, s, a, t):
        if t < self.horizon:
            return _const(0.0, s).sum(axis=-1)
        return -((s - _const(self.s_goal, s)).square().sum(axis=-1))

    def energy(self, states: np.ndarray) -> np.ndarray:
        th1, th2, w1, w2 = np.moveaxis(np.asarray(states), -1, 0)
        kinetic = w1**2 + 0.5 * w2**2 + w1 * w2 * np.cos(th1 - th2)
        potential = -self.gravity * (2 * np.cos(th1) + np.cos(th2))
        return kinetic + potential


class LinearSystem(EnvProblem):
    """Scalar ``s' = s + a`` with a linear (``r = s``) or quadratic reward.

    The quadratic variant uses ``r_t = -s_t^2 - a_t^2`` and ``r_H = -s_H^2``, a
    linear-quadratic problem whose optimum follows from a Riccati recursion.
    """

    name = "linear"
    state_dim = 1
    action_dim = 1

    def __init__(self, horizon: int = 10, reward_kind: str = "quadratic", s1: float = 1.0,
                 bound: float = 10.0):
        super().__init__(horizon)
        if reward_kind not in ("linear", "quadratic"):
            raise ValueError(f"unknown reward kind {reward_kind!r}")
        self.reward_kind = reward_kind
        self.low = np.array([-bound])
        self.high = np.array([bound])
        self.s1 = np.array([float(s1)])
        self.obs_shift = np.zeros(1)
        self.obs_scale = np.ones(1)
        self._bound = bound
        self.state_only_reward = reward_kind == "linear"

    def with_horizon(self, horizon):
        return LinearSystem(horizon, self.reward_kind, float(self.s1[0]), self._bound)

    def step(self, s, a, t):
        return s + a

    def reward(self, s, a, t):
        if self.reward_kind == "linear":
            return s.sum(axis=-1)
        r = -s.square().sum(axis=-1)
        if a is not None and t < self.horizon:
            r = r - a.square().sum(axis=-1)
        return r


REGISTRY = {
    "cancer": CancerTreatment,
    "mould": MouldFungicide,
    "bacteria": Bacteria,
    "harvest": Harvest,
    "one_bounce": OneBounce,
    "double_pendulum": DoublePendulum,
    "linear": LinearSystem,
}


def make_env(name: str, horizon: int) -> EnvProblem:
    try:
        cls = REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; known: {sorted(REGISTRY)}") from None
    return cls(horizon)


def simulate(env: EnvProblem, actions, rewards: bool = True):
    """Run the true dynamics on an open-loop action batch ``(B, H-1, m)``.

    Returns ``states (B, H, n)`` and ``rewards (B, H)`` (None if not requested).
    """
    actions = np.asarray(actions, dtype=np.float64)
    B, H = actions.shape[0], env.horizon
    if actions.shape[1:] != (H - 1, env.action_dim):
        raise ValueError(f"actions must have shape (B, {H - 1}, {env.action_dim}), got {actions.shape}")
    s = env.initial_state(B)
    states, rews = [s.data], []
    for t in range(1, H):
        a = Value(actions[:, t - 1])
        if rewards:
            rews.append(env.reward(s, a, t).data)
        s = env.step(s, a, t)
        states.append(s.data)
    if rewards:
        rews.append(env.reward(s, None, H).data)
    states = np.stack(states, axis=1)
    if not np.all(np.isfinite(states)):
        raise DynamicsError(f"{env.name}: non-finite states in rollout")
    return states, (np.stack(rews, axis=1) if rewards else None)


def random_baseline(env: EnvProblem, episodes: int = 100, seed: int = 0) -> float:
    """Mean return of uniform-random actions."""
    rng = np.random.default_rng(seed)
    acts = env.sample_actions(rng, (episodes, env.horizon - 1))
    _, r = simulate(env, acts)
    return float(r.sum(axis=1).mean())


def trajopt_oracle(env: EnvProblem, iters: int = 500, lr: float | None = None,
                   n_starts: int = 8, seed: int = 0):
    """Open-loop trajectory optimization through the true dynamics.

    Projected Adam ascent on the raw action sequence from ``n_starts`` random
    initializations run as one batch; returns ``(best actions (H-1, m), best J)``.
    """
    H, m = env.horizon, env.action_dim
    if H == 1:
        _, r = simulate(env, np.zeros((1, 0, m)))
        return np.zeros((0, m)), float(r.sum())
    rng = np.random.default_rng(seed)
    span = env.high - env.low
    lr = 0.02 * span if lr is None else lr
    z = env.sample_actions(rng, (n_starts, H - 1))
    m1 = np.zeros_like(z)
    m2 = np.zeros_like(z)
    best_j, best_a = -np.inf, None
    b1, b2 = 0.9, 0.999
    for it in range(1, iters + 2):
        tape = Tape()
        av = tape.leaf(z)
        s = env.initial_state(n_starts)
        total = None
        try:
            for t in range(1, H):
                a_t = av[:, t - 1]
                r = env.reward(s, a_t, t)
                total = r if total is None else total + r
                s = env.step(s, a_t, t)
            total = total + env.reward(s, None, H)
        except DynamicsError:
            break
        j = total.data
        finite = np.isfinite(j)
        if finite.any():
            k = int(np.argmax(np.where(finite, j, -np.inf)))
            if j[k] > best_j:
                best_j, best_a = float(j[k]), z[k].copy()
        if it > iters:
            break
        g = backward(tape, total.sum()).wrt(av)
        g = np.where(np.isfinite(g), g, 0.0)
        m1 = b1 * m1 + (1 - b1) * g
        m2 = b2 * m2 + (1 - b2) * g * g
        step = lr * (m1 / (1 - b1**it)) / (np.sqrt(m2 / (1 - b2**it)) + 1e-8)
        z = env.clip_actions(z + step)
    if best_a is None:
        raise DynamicsError(f"{env.name}: every oracle start diverged")
    return best_a, best_j


_REFERENCE: dict = {}


def _env_key(env: EnvProblem):
    extra = getattr(env, "reward_kind", None)
    return (env.name, env.horizon, extra)


def reference_returns(env: EnvProblem, oracle_iters: int = 500) -> tuple[float, float]:
    """``(J_random, J_oracle)`` for ``env``, computed once per (name, horizon)."""
    key = _env_key(env)
    if key not in _REFERENCE:
        j_rand = random_baseline(env)
        _, j_star = trajopt_oracle(env, iters=oracle_iters)
        _REFERENCE[key] = (j_rand, j_star)
    return _REFERENCE[key]


def set_reference_returns(env: EnvProblem, j_rand: float, j_star: float) -> None:
    _REFERENCE[_env_key(env)] = (float(j_rand), float(j_star))


def normalized_return(env: EnvProblem, J, reference: tuple[float, float] | None = None):
    """``(J - J_random) / (J_oracle - J_random)``: 0 for random play, 1 for the oracle."""
    j_rand, j_star = reference if reference is not None else reference_returns(env)
    if np.isclose(j_star, j_rand, rtol=0.0, atol=1e-12):
        raise ValueError(f"{env.name}: oracle and random returns coincide; score undefined")
    return (np.asarray(J, dtype=float) - j_rand) / (j_star - j_rand)


def write_trajectory_csv(path, states: np.ndarray, actions: np.ndarray, rewards: np.ndarray) -> Path:
    """Dump one episode as ``t,s0..,a0..,r`` (the last row has empty action cells)."""
    path = Path(path)
    states, actions, rewards = map(np.asarray, (states, actions, rewards))
    H, n = states.shape
    m = actions.shape[1] if actions.ndim == 2 else 0
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", *(f"s{i}" for i in range(n)), *(f"a{j}" for j in range(m)), "r"])
        for t in range(H):
            acts = [repr(float(x)) for x in actions[t]] if t < H - 1 else [""] * m
            w.writerow([t + 1, *(repr(float(x)) for x in states[t]), *acts, repr(float(rewards[t]))])
    return path
