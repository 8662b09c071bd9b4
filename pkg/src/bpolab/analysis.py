"""Numerical checks of the gradient-propagation results and diagnostic sweeps.

The checks build small, fully specified problems (scalar models with known
weights, probe environments with linear rewards) where the predicted growth
or bound can be computed exactly, then compare against reverse-mode gradients.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Parameter, Tape, Value, backward, grad_check
from .envs import EnvProblem, simulate
from .nets import Module, global_norm
from .policy import SquashedGaussianPolicy, action_jacobian
from .worldmodels import (
    ActionsWorldModel,
    WorldModel,
    f_rnn_awm,
    make_world_model,
    teacher_forced_loss,
    unroll,
)

__all__ = [
    "BoundReport",
    "SweepResult",
    "GrowthResult",
    "ProbeEnv",
    "ConstantPolicy",
    "FirstActionPolicy",
    "ScalarHistoryModel",
    "policy_gradient",
    "simulator_gradient",
    "prop1_check",
    "action_gradient_bound",
    "bound_hwm_growth",
    "scalar_rnn_awm",
    "scalar_rnn_slope",
    "cor2_poly_check",
    "teacher_forcing_check",
    "grad_norm_sweep",
    "final_state_gradient_norms",
    "landscape_sweep",
    "collect_random_transitions",
    "offline_fit",
    "fit_slope",
    "total_variation",
    "gradcheck_corpus",
]


# -- result containers -------------------------------------------------------------


@dataclass
class BoundReport:
    """Measured policy-gradient norm against a bound built from empirical constants.

    ``constants`` holds the local (along-rollout) Lipschitz estimates used in
    place of global constants.
    """

    measured: float
    bound: float
    horizon: int
    constants: dict = field(default_factory=dict)
    note: str = "L_r and L_pi are maxima of local operator norms along the evaluated rollout"

    @property
    def satisfied(self) -> bool:
        return bool(self.measured <= self.bound * (1 + 1e-9))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["satisfied"] = self.satisfied
        return d

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


@dataclass
class SweepResult:
    """Scalar outputs over a strictly increasing grid."""

    grid: np.ndarray
    outputs: dict
    grid_name: str = "x"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        if self.grid.ndim != 1 or np.any(np.diff(self.grid) <= 0):
            raise ValueError("sweep grid must be strictly increasing")
        self.outputs = {k: np.asarray(v, dtype=float) for k, v in self.outputs.items()}
        for k, v in self.outputs.items():
            if v.shape != self.grid.shape:
                raise ValueError(f"output {k!r} has shape {v.shape}, grid has {self.grid.shape}")

    def to_csv(self, path) -> Path:
        path = Path(path)
        names = list(self.outputs)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([self.grid_name, *names])
            for i, x in enumerate(self.grid):
                w.writerow([repr(float(x)), *(repr(float(self.outputs[n][i])) for n in names)])
        return path


@dataclass
class GrowthResult:
    grid: np.ndarray
    norms: np.ndarray
    slope: float
    fit_range: tuple
    reference: np.ndarray | None = None

    @property
    def max_reference_error(self) -> float:
        if self.reference is None:
            return float("nan")
        return float(np.max(np.abs(self.norms - self.reference) / np.abs(self.reference)))


def fit_slope(x, y, log_x: bool = False) -> tuple[float, tuple]:
    """Least-squares slope of ``log y`` against ``x`` (or ``log x``) over the largest finite suffix."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    ok = np.isfinite(y) & (y > 0)
    end = len(y)
    start = end
    while start > 0 and ok[start - 1]:
        start -= 1
    if end - start < 2:
        raise FloatingPointError("fewer than two finite points at the end of the grid")
    xs = np.log(x[start:end]) if log_x else x[start:end]
    slope = np.polyfit(xs, np.log(y[start:end]), 1)[0]
    return float(slope), (float(x[start]), float(x[end - 1]))


def total_variation(y) -> float:
    return float(np.sum(np.abs(np.diff(np.asarray(y, float)))))


# -- probe problems ----------------------------------------------------------------


class ProbeEnv(EnvProblem):
    """Reward-only environment for model-based checks; the model supplies dynamics.

    ``reward``: ``"terminal"`` gives ``sum(s_H)`` at ``t = H`` only, ``"linear"``
    gives ``sum(s_t)`` every step, ``"sin"`` gives ``sum(sin(s_t))`` every step.
    All rewards depend on the state only.
    """

    name = "probe"
    state_only_reward = True

    def __init__(self, horizon: int, state_dim: int = 1, action_dim: int = 1, reward: str = "terminal",
                 s1=None, bound: float = 1.0):
        super().__init__(horizon)
        if reward not in ("terminal", "linear", "sin"):
            raise ValueError(f"unknown probe reward {reward!r}")
        self.state_dim, self.action_dim, self.reward_kind = state_dim, action_dim, reward
        self.s1 = np.zeros(state_dim) if s1 is None else np.asarray(s1, float).reshape(state_dim)
        self.low, self.high = -bound * np.ones(action_dim), bound * np.ones(action_dim)
        self.obs_shift, self.obs_scale = np.zeros(state_dim), np.ones(state_dim)
        self.terminal_only = reward == "terminal"

    def with_horizon(self, horizon):
        return ProbeEnv(horizon, self.state_dim, self.action_dim, self.reward_kind, self.s1, self.high[0])

    def step(self, s, a, t):
        raise NotImplementedError("probe environments have no dynamics of their own")

    def reward(self, s, a, t):
        if self.reward_kind == "terminal":
            r = s.sum(axis=-1)
            return r if t >= self.horizon else r * 0.0
        if self.reward_kind == "sin":
            return s.sin().sum(axis=-1)
        return s.sum(axis=-1)


class ConstantPolicy(Module):
    """``a_t = theta`` at every step (no state input, log-prob 0)."""

    def __init__(self, theta, entropy_coef: float = 0.0):
        super().__init__()
        self.theta = Parameter(np.atleast_1d(np.asarray(theta, float)))
        self.action_dim = self.theta.data.size
        self.entropy_coef = entropy_coef

    def act(self, tape, s, t, noise, stop_grad=True):
        B = s.shape[0]
        ones = Value(np.ones((B, 1)))
        a = tape.apply("matmul", ones, tape.apply("reshape", tape.param(self.theta), shape=(1, self.action_dim)))
        return a, Value(np.zeros(B))


class FirstActionPolicy(ConstantPolicy):
    """``a_1 = theta`` and ``a_t = 0`` afterwards."""

    def act(self, tape, s, t, noise, stop_grad=True):
        a, logp = super().act(tape, s, t, noise, stop_grad)
        return (a if t == 1 else a * 0.0), logp


class ScalarHistoryModel:
    """``s_{t+1} = L_s s_t + L_a sum_{k<=t} a_k``: a one-dimensional history model.

    Consumes its own predicted states, so gradient paths run through them.
    """

    family = "history"

    def __init__(self, L_s: float, L_a: float, horizon: int):
        self.L_s, self.L_a, self.horizon_ = float(L_s), float(L_a), horizon

    def start(self, tape, s1):
        return {"sum": None}

    def predict_next(self, tape, ctx, s_t, a_t, t):
        ctx["sum"] = a_t if ctx["sum"] is None else ctx["sum"] + a_t
        return s_t * self.L_s + ctx["sum"] * self.L_a

    step = predict_next


# -- gradients ----------------------------------------------------------------------


def policy_gradient(model, policy, env: EnvProblem, noise=None, stop_grad: bool = True,
                    batch: int = 1) -> tuple[np.ndarray, float]:
    """Flat ``grad_theta J`` of the batch-summed return through ``model``, and ``J``."""
    tape = Tape()
    ro = unroll(model, policy, env, tape, batch=batch, noise=noise, stop_grad=stop_grad)
    J = ro.ret.sum()
    grads = tape.param_grads(backward(tape, J), policy.parameters())
    return np.concatenate([g.reshape(-1) for g in grads]), float(J.data)


def simulator_gradient(env: EnvProblem, policy, noise=None, stop_grad: bool = True,
                       batch: int = 1) -> tuple[np.ndarray, float]:
    """Flat ``grad_theta J`` by backpropagating through the environment itself."""
    H = env.horizon
    if noise is None:
        noise = np.zeros((max(H - 1, 0), batch, env.action_dim))
    tape = Tape()
    s = env.initial_state(batch)
    total = None
    for t in range(1, H):
        a, _ = policy.act(tape, s, t, noise[t - 1], stop_grad=stop_grad)
        r = env.reward(s, a, t)
        total = r if total is None else total + r
        s = env.step(s, a, t)
    r = env.reward(s, None, H)
    total = r if total is None else total + r
    J = total.sum()
    grads = tape.param_grads(backward(tape, J), policy.parameters())
    return np.concatenate([g.reshape(-1) for g in grads]), float(J.data)


def _max_rel(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    denom = np.maximum(np.abs(a), np.abs(b))
    diff = np.abs(a - b)
    rel = np.where(denom > 0, diff / np.where(denom > 0, denom, 1.0), 0.0)
    return float(rel.max()) if rel.size else 0.0


def prop1_check(env: EnvProblem, policy, seed: int = 0, stop_grad: bool = False) -> float:
    """Max elementwise relative gap between the f-RNN-model gradient and the simulator gradient."""
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((max(env.horizon - 1, 0), 1, env.action_dim))
    g_model, _ = policy_gradient(f_rnn_awm(env), policy, env, noise, stop_grad)
    g_sim, _ = simulator_gradient(env, policy, noise, stop_grad)
    return _max_rel(g_model, g_sim)


# -- gradient bound for action models ---------------------------------------------


def _state_jacobians(model: WorldModel, env: EnvProblem, states, actions):
    """``J[t][k] = d s_t / d a_k`` (1-indexed t, k) for the model, by replaying the actions as leaves."""
    H = env.horizon
    tape = Tape()
    a_leaves = [tape.leaf(actions[k][None, :]) for k in range(H - 1)]
    s = Value(states[0][None, :])
    ctx = model.start(tape, s)
    preds = [s]
    for t in range(1, H):
        # action models ignore the state input; the recorded prediction is passed for shape only
        s = model.predict_next(tape, ctx, Value(states[t - 1][None, :]), a_leaves[t - 1], t)
        preds.append(s)
    n = states.shape[1]
    jac = {}
    for t in range(2, H + 1):
        rows = [backward(tape, preds[t - 1][0, i]) for i in range(n)]
        for k in range(1, t):
            jac[(t, k)] = np.stack([g.wrt(a_leaves[k - 1])[0] for g in rows])
    return jac, np.stack([p.data[0] for p in preds])


def bound_theorem2(model: WorldModel, policy: SquashedGaussianPolicy, env: EnvProblem,
                   noise=None) -> BoundReport:
    """Compare ``||grad J||`` with ``L_r L_pi sum_t sum_{k<t} ||d s_t / d a_k||``.

    Requires an actions-family model and a state-only reward; the policy input is
    stop-gradiented, so every gradient path runs through one model application.
    """
    if getattr(model, "family", None) not in ("actions", "f-rnn"):
        raise ValueError("the bound applies to actions-family models")
    if not getattr(env, "state_only_reward", False):
        raise ValueError("the bound needs a reward that depends on the state only")
    H = env.horizon
    if noise is None:
        noise = np.zeros((max(H - 1, 0), 1, env.action_dim))
    tape = Tape()
    ro = unroll(model, policy, env, tape, batch=1, noise=noise, stop_grad=True)
    J = ro.ret.sum()
    grads = tape.param_grads(backward(tape, J), policy.parameters())
    measured = global_norm(grads)
    if H < 2:
        return BoundReport(measured, 0.0, H, {"L_r": 0.0, "L_pi": 0.0, "jacobian_sum": 0.0})
    states = ro.states_array()[0]
    actions = ro.actions_array()[0]
    jac, replay = _state_jacobians(model, env, states, actions)
    if not np.allclose(replay, states, rtol=0, atol=1e-12):
        raise RuntimeError("replayed rollout does not match the recorded one")
    jac_sum = float(sum(np.linalg.norm(j, 2) for j in jac.values()))
    L_r = 0.0
    for t in range(2, H + 1):
        rt = Tape()
        sv = rt.leaf(states[t - 1][None, :])
        r = env.reward(sv, None if t == H else Value(np.zeros((1, env.action_dim))), t).sum()
        L_r = max(L_r, float(np.linalg.norm(backward(rt, r).wrt(sv))))
    L_pi = 0.0
    for k in range(1, H):
        Jk = action_jacobian(policy, states[k - 1], k, noise[k - 1][0]) if hasattr(policy, "mlp") \
            else _generic_action_jacobian(policy, states[k - 1], k)
        L_pi = max(L_pi, float(np.linalg.norm(Jk, 2)))
    bound = L_r * L_pi * jac_sum
    return BoundReport(measured, bound, H, {"L_r": L_r, "L_pi": L_pi, "jacobian_sum": jac_sum})


def _generic_action_jacobian(policy, s, t) -> np.ndarray:
    tape = Tape()
    a, _ = policy.act(tape, Value(np.atleast_2d(s)), t, 0.0)
    rows = []
    for i in range(a.shape[1]):
        gs = tape.param_grads(backward(tape, a[0, i]), policy.parameters())
        rows.append(np.concatenate([g.reshape(-1) for g in gs]))
    return np.stack(rows)


# -- growth checks -------------------------------------------------------------------


def bound_hwm_growth(L_s: float, L_a: float, H_grid, theta: float = 0.5) -> GrowthResult:
    """Exact ``|grad J|`` of the scalar history model over ``H_grid`` and its log-slope in H.

    First action ``theta``, later actions 0, terminal reward ``s_H``, so the
    gradient is ``L_a * sum_{j<H-1} L_s^j``.
    """
    grid = np.asarray(sorted(H_grid), dtype=int)
    norms, ref = [], []
    for H in grid:
        env = ProbeEnv(int(H), reward="terminal")
        g, _ = policy_gradient(ScalarHistoryModel(L_s, L_a, int(H)), FirstActionPolicy(theta), env)
        norms.append(float(np.linalg.norm(g)))
        ref.append(abs(L_a) * sum(L_s**j for j in range(int(H) - 1)))
    norms = np.array(norms)
    slope, rng = fit_slope(grid, norms)
    return GrowthResult(grid, norms, slope, rng, np.array(ref))


def scalar_rnn_awm(w_x: float, w_a: float, w_o: float, horizon: int,
                   activation: str = "identity") -> ActionsWorldModel:
    """1-D rnn actions model with fixed weights, zero bias and zero initial hidden state."""
    m = ActionsWorldModel(backbone="rnn", hidden=1, activation=activation, time_input=False)
    m.initialize(1, 1, horizon)
    cell = m.net_.cell
    cell.W_x.data[...] = w_x
    cell.W_a.data[...] = w_a
    cell.W_o.data[...] = w_o
    cell.b.data[...] = 0.0
    cell.W_s.data[...] = 0.0
    cell.b_s.data[...] = 0.0
    return m


def cor1_tightness(w_x: float, w_a: float, w_o: float, H_grid, theta: float = 0.5,
                   activation: str = "identity") -> GrowthResult:
    """Exact ``|grad J|`` of a scalar rnn actions model; closed form ``w_o w_a w_x^(H-2)``."""
    grid = np.asarray(sorted(H_grid), dtype=int)
    norms = []
    for H in grid:
        env = ProbeEnv(int(H), reward="terminal")
        model = scalar_rnn_awm(w_x, w_a, w_o, int(H), activation)
        g, _ = policy_gradient(model, FirstActionPolicy(theta), env)
        norms.append(float(np.linalg.norm(g)))
    norms = np.array(norms)
    ref = np.abs(w_o * w_a * w_x ** (grid.astype(float) - 2)) if activation == "identity" else None
    slope, rng = fit_slope(grid, norms)
    return GrowthResult(grid, norms, slope, rng, ref)


def cor2_poly_check(seed: int = 0, H_grid=(8, 16, 32, 64, 128, 256), state_dim: int = 2,
                    action_dim: int = 2, alpha: float = 1.0) -> GrowthResult:
    """``||grad J||`` for a random single-layer attention actions model; slope in log H."""
    grid = np.asarray(sorted(H_grid), dtype=int)
    norms = []
    for H in grid:
        env = ProbeEnv(int(H), state_dim, action_dim, reward="linear", bound=alpha)
        model = ActionsWorldModel(backbone="attention_raw", random_state=seed)
        model.initialize(state_dim, action_dim, int(H))
        policy = SquashedGaussianPolicy(state_dim, action_dim, env.low, env.high, int(H),
                                        hidden=(16,), rng=np.random.default_rng(seed + 1))
        g, _ = policy_gradient(model, policy, env)
        norms.append(float(np.linalg.norm(g)))
    norms = np.array(norms)
    slope, rng = fit_slope(grid, norms, log_x=True)
    return GrowthResult(grid, norms, slope, rng)


def teacher_forcing_check(seed: int = 0, state_dim: int = 3, action_dim: int = 2, horizon: int = 12,
                          batch: int = 5) -> float:
    """Relative gap between teacher-forced sequence-loss and summed one-step-loss gradients."""
    rng = np.random.default_rng(seed)
    model = ActionsWorldModel(backbone="rnn", readout=False, activation="tanh", random_state=seed)
    model.initialize(state_dim, action_dim, horizon)
    S = rng.normal(size=(batch, horizon, state_dim))
    A = rng.normal(size=(batch, horizon - 1, action_dim))
    params = model.parameters()
    tape = Tape()
    g_tf = tape.param_grads(backward(tape, teacher_forced_loss(model, S, A, tape)), params)
    # one-step loss: every transition as an independent row through the cell
    tape = Tape()
    cell = model.net_.cell
    x = Value(S[:, :-1].reshape(-1, state_dim))
    t_col = np.broadcast_to((np.arange(1, horizon) / horizon)[None, :, None],
                            (batch, horizon - 1, 1)).reshape(-1, 1)
    inp = Value(np.concatenate([A.reshape(-1, action_dim), t_col], axis=1))
    _, pred = cell.step(tape, x, inp)
    loss = (pred - Value(S[:, 1:].reshape(-1, state_dim))).square().sum() * (1.0 / batch)
    g_one = tape.param_grads(backward(tape, loss), params)
    return _max_rel(np.concatenate([g.ravel() for g in g_tf]), np.concatenate([g.ravel() for g in g_one]))


# -- sweeps --------------------------------------------------------------------------


def _first_action_batch(env: EnvProblem, a1: np.ndarray) -> np.ndarray:
    acts = np.zeros((a1.shape[0], env.horizon - 1, env.action_dim))
    acts[:, 0, :] = a1.reshape(a1.shape[0], env.action_dim)
    return acts


def final_state_gradient_norms(target, env: EnvProblem, a1: np.ndarray) -> np.ndarray:
    """``||d s_H / d a_1||`` per row of ``a1`` (later actions zero) through ``target``.

    ``target`` is ``"true"`` for the environment dynamics or a world model.
    """
    H, B = env.horizon, a1.shape[0]
    tape = Tape()
    a_leaf = tape.leaf(a1.reshape(B, env.action_dim))
    zero = Value(np.zeros((B, env.action_dim)))
    s = env.initial_state(B)
    ctx = None if target == "true" else target.start(tape, s)
    for t in range(1, H):
        a = a_leaf if t == 1 else zero
        s = env.step(s, a, t) if target == "true" else target.predict_next(tape, ctx, s, a, t)
    if H == 1 or not s.on_tape:
        return np.zeros(B)
    cols = [backward(tape, s[:, i].sum()).wrt(a_leaf) for i in range(s.shape[1])]
    # rows are independent, so the batch sum yields per-row Jacobians
    jac = np.stack(cols, axis=1)  # (B, n, m)
    return np.linalg.norm(jac.reshape(B, -1), axis=1) if env.action_dim == 1 else \
        np.array([np.linalg.norm(j, 2) for j in jac])


def grad_norm_sweep(targets: dict, env: EnvProblem, H_grid=(5, 10, 20, 50, 100), n_actions: int = 50,
                    seed: int = 0) -> SweepResult:
    """Mean ``||d s_H / d a_1||`` over ``n_actions`` uniform initial actions for each H."""
    rng = np.random.default_rng(seed)
    a1 = env.sample_actions(rng, (n_actions,))
    grid = np.asarray(sorted(H_grid), dtype=int)
    out = {name: [] for name in targets}
    for H in grid:
        e = env.with_horizon(int(H))
        for name, target in targets.items():
            with np.errstate(all="ignore"):
                norms = final_state_gradient_norms(target, e, a1)
            out[name].append(float(np.mean(norms)))
    return SweepResult(grid, out, "horizon", {"env": env.name, "n_actions": n_actions, "seed": seed})


def landscape_sweep(targets: dict, env: EnvProblem, n_points: int = 200) -> SweepResult:
    """Return ``J(a_1)`` over a uniform grid of initial actions (later actions zero).

    Model returns apply the env's reward to predicted states.
    """
    grid = np.linspace(env.low[0], env.high[0], n_points)
    acts = _first_action_batch(env, grid[:, None])
    out = {}
    for name, target in targets.items():
        if target == "true":
            _, r = simulate(env, acts)
            out[name] = r.sum(axis=1)
            continue
        with np.errstate(all="ignore"):
            states = target.predict(np.tile(env.s1, (n_points, 1)), acts)
        total = np.zeros(n_points)
        for t in range(1, env.horizon + 1):
            a = Value(acts[:, t - 1]) if t < env.horizon else None
            with np.errstate(all="ignore"):
                total = total + env.reward(Value(states[:, t - 1]), a, t).data
        out[name] = total
    return SweepResult(grid, out, "action", {"env": env.name, "horizon": env.horizon})


def collect_random_transitions(env: EnvProblem, n_transitions: int = 100_000, seed: int = 0):
    """Uniform-random-action episodes covering at least ``n_transitions`` transitions."""
    rng = np.random.default_rng(seed)
    n_eps = math.ceil(n_transitions / max(env.horizon - 1, 1))
    acts = env.sample_actions(rng, (n_eps, env.horizon - 1))
    states, _ = simulate(env, acts, rewards=False)
    return states, acts


def offline_fit(env: EnvProblem, family: str, backbone: str | None = None, n_transitions: int = 100_000,
                n_steps: int = 1000, batch_size: int = 64, learning_rate: float = 1e-3, seed: int = 0,
                data=None, **params) -> WorldModel:
    """Train a model on random-action data: the offline protocol."""
    S, A = data if data is not None else collect_random_transitions(env, n_transitions, seed)
    model = make_world_model(family, env, backbone, learning_rate=learning_rate, batch_size=batch_size,
                             n_steps=n_steps, random_state=seed, **params)
    return model.fit((S, A))


# -- gradient-check corpus -------------------------------------------------------------


def gradcheck_corpus(n_instances: int = 100, seed: int = 0):
    """``{case name: max relative error}`` over random instances of every op and backbone."""
    from . import _gradcases

    return _gradcases.run_corpus(n_instances, seed)
