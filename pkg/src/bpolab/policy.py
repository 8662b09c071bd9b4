"""Reparameterized squashed-Gaussian policy with an entropy bonus."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tape, Value, backward
from .nets import Mlp, Module

__all__ = ["SquashedGaussianPolicy", "policy_objective", "action_jacobian", "LOG_STD_RANGE"]

LOG_STD_RANGE = (-5.0, 2.0)
# keeps tanh saturation strictly inside the bounds
_SHRINK = 1.0 - 1e-9
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


class SquashedGaussianPolicy(Module):
    """``a = mid + half * tanh(mu + std * eps)`` with ``(mu, log std) = MLP([s, t/H])``.

    ``act`` returns the action and its log-density under the squashed
    distribution (tanh change of variables included).
    """

    def __init__(self, state_dim: int, action_dim: int, low, high, horizon: int,
                 hidden=(64, 64), activation: str = "tanh", entropy_coef: float = 0.01,
                 time_input: bool = True, state_shift=None, state_scale=None,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.state_dim, self.action_dim, self.horizon = state_dim, action_dim, horizon
        self.low = np.asarray(low, dtype=float).reshape(action_dim)
        self.high = np.asarray(high, dtype=float).reshape(action_dim)
        if np.any(self.high <= self.low):
            raise ValueError("policy: every upper bound must exceed its lower bound")
        self.entropy_coef = float(entropy_coef)
        self.time_input = time_input
        self.state_shift = np.zeros(state_dim) if state_shift is None else np.asarray(state_shift, float)
        self.state_scale = np.ones(state_dim) if state_scale is None else np.asarray(state_scale, float)
        self.mlp = Mlp(state_dim + int(time_input), 2 * action_dim, hidden, activation, rng)

    @classmethod
    def for_env(cls, env, rng=None, **kw) -> "SquashedGaussianPolicy":
        kw.setdefault("state_shift", env.obs_shift)
        kw.setdefault("state_scale", env.obs_scale)
        return cls(env.state_dim, env.action_dim, env.low, env.high, env.horizon, rng=rng, **kw)

    @property
    def mid(self) -> np.ndarray:
        return (self.low + self.high) / 2

    @property
    def half(self) -> np.ndarray:
        return (self.high - self.low) / 2 * _SHRINK

    def _features(self, tape: Tape, s: Value, t: int) -> Value:
        B = s.shape[0]
        z = (s - Value(self.state_shift)) * Value(np.broadcast_to(1.0 / self.state_scale, s.shape).copy())
        if self.time_input:
            z = tape.concatenate([z, Value(np.full((B, 1), t / self.horizon))], axis=-1)
        return z

    def act(self, tape: Tape, s: Value, t: int, noise, stop_grad: bool = True):
        """Action ``(B, m)`` and log-prob ``(B,)`` at state ``s`` and timestep ``t``."""
        if not np.all(np.isfinite(s.data)):
            raise FloatingPointError(f"policy: non-finite state at t={t}")
        if stop_grad:
            s = tape.stop_gradient(s)
        B, m = s.shape[0], self.action_dim
        noise = np.broadcast_to(np.asarray(noise, dtype=float), (B, m))
        out = self.mlp.forward(tape, self._features(tape, s, t))
        if not np.all(np.isfinite(out.data)):
            raise FloatingPointError(f"policy: non-finite network output at t={t}")
        mu = out[:, :m]
        log_std = out[:, m:].clip(lo=LOG_STD_RANGE[0], hi=LOG_STD_RANGE[1])
        u = mu + log_std.exp() * Value(noise.copy())
        y = u.tanh()
        a = y * Value(np.broadcast_to(self.half, (B, m)).copy()) + Value(self.mid)
        # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u)), stable for large |u|
        log_jac = ((-u) * 2.0).softplus() * (-2.0) + (u * -2.0) + 2 * math.log(2.0)
        const = float(np.sum(np.log(self.half))) + m * _HALF_LOG_2PI
        logp = (Value(-0.5 * noise**2) - log_std - log_jac).sum(axis=-1) - const
        return a, logp

    def mean_action(self, s: np.ndarray, t: int) -> np.ndarray:
        a, _ = self.act(Tape(), Value(np.atleast_2d(s)), t, 0.0)
        return a.data


def policy_objective(rollout, policy: SquashedGaussianPolicy) -> Value:
    """Batch mean of ``J + alpha * sum_t (-log pi(a_t | s_t))``."""
    total = rollout.ret
    if policy.entropy_coef != 0.0 and rollout.log_probs:
        neg = rollout.log_probs[0]
        for lp in rollout.log_probs[1:]:
            neg = neg + lp
        total = total - neg * policy.entropy_coef
    return total.mean()


def action_jacobian(policy: SquashedGaussianPolicy, s: np.ndarray, t: int, noise=0.0) -> np.ndarray:
    """``d a / d theta`` at one state, shape ``(m, number of parameters)``."""
    tape = Tape()
    a, _ = policy.act(tape, Value(np.atleast_2d(s)), t, noise)
    params = policy.parameters()
    rows = []
    for i in range(policy.action_dim):
        grads = tape.param_grads(backward(tape, a[0, i]), params)
        rows.append(np.concatenate([g.reshape(-1) for g in grads]))
    return np.stack(rows)
