"""World models: Markovian, History (HWM), Actions (AWM) and the exact-dynamics f-RNN.

All models share one interface:

* ``sequence_prediction(tape, S, A)`` predicts ``s_2 .. s_H`` for a batch of
  ground-truth trajectories in one pass (history models see true states, i.e.
  teacher forcing; action models see only ``s_1`` and the actions).
* ``start(tape, s1)`` / ``step(tape, ctx, s_t, a_t, t)`` generate one state at a
  time from the model's own predictions, which is what :func:`unroll` uses.

Models are scikit-learn estimators: ``fit`` takes trajectories, ``predict``
rolls out open-loop action sequences, ``score`` is the negated loss.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .autodiff import Parameter, ShapeError, Tape, Value, backward
from .envs import EnvProblem
from .nets import (
    Adam,
    LstmCell,
    Mlp,
    Module,
    RnnCell,
    SelfAttention,
    Transformer,
    load_params,
    save_params,
    uniform_init,
)

__all__ = [
    "Trajectory",
    "as_arrays",
    "WorldModel",
    "MarkovianWorldModel",
    "HistoryWorldModel",
    "ActionsWorldModel",
    "FRnnWorldModel",
    "make_world_model",
    "load_world_model",
    "f_rnn_awm",
    "model_loss",
    "teacher_forced_loss",
    "Rollout",
    "unroll",
    "FAMILIES",
]


@dataclass
class Trajectory:
    """One episode: ``H`` states, ``H - 1`` actions, ``H`` rewards."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        H = self.states.shape[0]
        if self.states.ndim != 2 or self.actions.ndim != 2:
            raise ShapeError("trajectory: states and actions must be 2-D (time, dim)")
        if self.actions.shape[0] != H - 1 or self.rewards.shape != (H,):
            raise ShapeError(f"trajectory: {H} states need {H - 1} actions and {H} rewards, got "
                             f"{self.actions.shape[0]} and {self.rewards.shape}")

    @property
    def horizon(self) -> int:
        return self.states.shape[0]

    @property
    def timesteps(self) -> np.ndarray:
        return np.arange(1, self.horizon + 1)

    @property
    def ret(self) -> float:
        return float(self.rewards.sum())


def as_arrays(X):
    """Trajectories (list of :class:`Trajectory` or ``(S, A)``) to ``(S, A)`` arrays."""
    if isinstance(X, tuple) and len(X) == 2:
        S, A = (np.asarray(x, dtype=np.float64) for x in X)
    else:
        X = list(X)
        if not X:
            raise ValueError("no trajectories given")
        S = np.stack([tr.states for tr in X])
        A = np.stack([tr.actions for tr in X])
    if S.ndim != 3 or A.ndim != 3 or S.shape[0] != A.shape[0] or A.shape[1] != S.shape[1] - 1:
        raise ShapeError(f"expected S (N, H, n) and A (N, H-1, m), got {S.shape} and {A.shape}")
    if not (np.all(np.isfinite(S)) and np.all(np.isfinite(A))):
        raise ValueError("trajectories contain non-finite values")
    return S, A


# -- helpers ---------------------------------------------------------------


def _bcast(vec: np.ndarray, like: Value) -> Value:
    return Value(np.broadcast_to(vec, like.shape).copy())


class _Affine:
    """``x -> (x - shift) / scale`` and back, as tape ops; identity when unset."""

    def __init__(self, shift=None, scale=None):
        self.identity = shift is None and scale is None
        self.shift = None if shift is None else np.asarray(shift, dtype=float)
        self.scale = None if scale is None else np.asarray(scale, dtype=float)

    def encode(self, x: Value) -> Value:
        if self.identity:
            return x
        if self.shift is not None:
            x = x - Value(self.shift)
        if self.scale is not None:
            x = x * _bcast(1.0 / self.scale, x)
        return x

    def decode(self, z: Value) -> Value:
        if self.identity:
            return z
        if self.scale is not None:
            z = z * _bcast(self.scale, z)
        if self.shift is not None:
            z = z + Value(self.shift)
        return z


def _action_affine(low, high) -> _Affine:
    if low is None or high is None:
        return _Affine()
    low, high = np.asarray(low, float), np.asarray(high, float)
    return _Affine((low + high) / 2, (high - low) / 2)


def _time_column(t, H: int, like: Value) -> Value:
    lead = like.shape[:-1]
    return Value(np.full(lead + (1,), t / H))


def _time_grid(T: int, H: int, batch: int) -> Value:
    # (B, T-1, 1) with t/H for t = 1..T-1; H is the model horizon, T <= H the sequence length
    return Value(np.broadcast_to((np.arange(1, T) / H)[None, :, None], (batch, T - 1, 1)).copy())


class _Linear(Module):
    def __init__(self, d_in, d_out, rng):
        super().__init__()
        self.W = Parameter(uniform_init(rng, d_in, (d_in, d_out)))
        self.b = Parameter(np.zeros(d_out))

    def __call__(self, tape, x):
        return tape.apply("add", tape.apply("matmul", x, tape.param(self.W)), tape.param(self.b))


@dataclass
class _Context:
    s1: Value
    carry: object = None
    cache: object = None
    tokens: list = field(default_factory=list)


# -- base estimator -----------------------------------------------------------


class WorldModel(BaseEstimator):
    """Shared training / prediction machinery; subclasses define the network."""

    family = "base"

    def _norms(self):
        self._s_aff = _Affine(self.state_shift, self.state_scale)
        self._a_aff = _action_affine(self.action_low, self.action_high)

    def initialize(self, n_state: int, n_action: int, horizon: int) -> "WorldModel":
        """Build fresh parameters for the given dimensions."""
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        self.n_state_, self.n_action_, self.horizon_ = int(n_state), int(n_action), int(horizon)
        self._norms()
        rng = np.random.default_rng(self.random_state)
        self.net_ = self._build(rng)
        self.optimizer_ = Adam(self.net_.parameters(), lr=self.learning_rate)
        self.loss_curve_ = []
        return self

    def _build(self, rng) -> Module:
        raise NotImplementedError

    def _check_dims(self, S, A):
        check_is_fitted(self, "net_")
        if S.shape[1] > self.horizon_:
            raise ValueError(f"context of length {S.shape[1]} exceeds model horizon {self.horizon_}")
        if S.shape[2] != self.n_state_ or A.shape[2] != self.n_action_:
            raise ShapeError(f"model expects state/action dims ({self.n_state_}, {self.n_action_}), "
                             f"got ({S.shape[2]}, {A.shape[2]})")

    # batch predictions of s_2..s_H, shape (B, H-1, n)
    def sequence_prediction(self, tape: Tape, S: np.ndarray, A: np.ndarray) -> Value:
        raise NotImplementedError

    def start(self, tape: Tape, s1: Value) -> _Context:
        return _Context(s1=s1)

    def step(self, tape: Tape, ctx: _Context, s_t: Value, a_t: Value, t: int) -> Value:
        raise NotImplementedError

    def predict_next(self, tape: Tape, ctx: _Context, s_t: Value, a_t: Value, t: int) -> Value:
        if t >= self.horizon_:
            raise ValueError(f"context longer than horizon: t={t}, H={self.horizon_}")
        return self.step(tape, ctx, s_t, a_t, t)

    # -- sklearn surface
    def fit(self, X, y=None):
        """Train for ``n_steps`` Adam steps on minibatches of ``batch_size`` trajectories."""
        S, A = as_arrays(X)
        if not hasattr(self, "net_") or self.horizon_ != S.shape[1]:
            self.initialize(S.shape[2], A.shape[2], S.shape[1])
        rng = np.random.default_rng(self.random_state)
        for _ in range(self.n_steps):
            idx = rng.integers(0, S.shape[0], size=min(self.batch_size, S.shape[0]))
            self.train_step(S[idx], A[idx])
        return self

    def train_step(self, S, A, clip: float | None = None) -> float:
        """One Adam step on the batch; returns the pre-step loss (nan if skipped)."""
        tape = Tape()
        loss = model_loss(self, S, A, tape)
        if not np.isfinite(loss.data):
            self.loss_curve_.append(float("nan"))
            return float("nan")
        grads = tape.param_grads(backward(tape, loss), self.net_.parameters())
        try:
            self.optimizer_.step(grads, clip=clip)
        except FloatingPointError:
            self.loss_curve_.append(float("nan"))
            return float("nan")
        self.loss_curve_.append(float(loss.data))
        return float(loss.data)

    def predict(self, s1, actions) -> np.ndarray:
        """Open-loop rollout: ``s1 (N, n)``, ``actions (N, T, m)`` -> states ``(N, T + 1, n)``."""
        check_is_fitted(self, "net_")
        actions = np.asarray(actions, dtype=np.float64)
        s1 = np.broadcast_to(np.asarray(s1, dtype=np.float64), (actions.shape[0], self.n_state_))
        tape = Tape()
        s = Value(s1.copy())
        ctx = self.start(tape, s)
        out = [s1.copy()]
        for t in range(1, actions.shape[1] + 1):
            s = self.predict_next(tape, ctx, s, Value(actions[:, t - 1]), t)
            out.append(s.data)
        return np.stack(out, axis=1)

    def score(self, X, y=None) -> float:
        S, A = as_arrays(X)
        return -float(model_loss(self, S, A).data)

    def checkpoint_header(self) -> dict:
        params = {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                  for k, v in self.get_params(deep=False).items()}
        return {"family": self.family, "backbone": getattr(self, "backbone", None),
                "n_state": self.n_state_, "n_action": self.n_action_, "horizon": self.horizon_,
                "params": params}

    def save(self, path):
        return save_params(self.net_, path, self.checkpoint_header())

    def load(self, path) -> dict:
        return load_params(self.net_, path)

    def parameters(self) -> list[Parameter]:
        return self.net_.parameters()


# -- Markovian -----------------------------------------------------------------


class MarkovianWorldModel(WorldModel):
    """One-step model in difference form, ``s_{t+1} = s_t + f(s_t, a_t, t/H)``."""

    family = "markovian"
    backbone = "mlp"

    def __init__(self, hidden=(64, 64), activation="relu", time_input=True,
                 learning_rate=1e-3, batch_size=64, n_steps=1000, random_state=0,
                 state_shift=None, state_scale=None, action_low=None, action_high=None):
        self.hidden = hidden
        self.activation = activation
        self.time_input = time_input
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.random_state = random_state
        self.state_shift = state_shift
        self.state_scale = state_scale
        self.action_low = action_low
        self.action_high = action_high

    def _build(self, rng):
        net = Module()
        d_in = self.n_state_ + self.n_action_ + int(self.time_input)
        net.mlp = Mlp(d_in, self.n_state_, self.hidden, self.activation, rng)
        return net

    def _delta(self, tape, s, a, time_col):
        parts = [self._s_aff.encode(s), self._a_aff.encode(a)]
        if self.time_input:
            parts.append(time_col)
        out = self.net_.mlp.forward(tape, tape.concatenate(parts, axis=-1))
        if self._s_aff.scale is not None:
            out = out * _bcast(self._s_aff.scale, out)
        return out

    def sequence_prediction(self, tape, S, A):
        self._check_dims(S, A)
        H = S.shape[1]
        s = Value(S[:, :-1])
        return s + self._delta(tape, s, Value(A), _time_grid(H, self.horizon_, S.shape[0]) if self.time_input else None)

    def step(self, tape, ctx, s_t, a_t, t):
        return s_t + self._delta(tape, s_t, a_t, _time_column(t, self.horizon_, s_t))


# -- History -------------------------------------------------------------------


class HistoryWorldModel(WorldModel):
    """``s_{t+1} = h(s_{1:t}, a_{1:t})``.

    The attention backbone reads an interleaved token stream ``s_1, a_1, s_2, ...``
    and predicts from the output at each action token; recurrent backbones
    consume ``[s_t, a_t, t/H]`` per step from a hidden state seeded by ``s_1``.
    """

    family = "history"

    def __init__(self, backbone="attention", hidden=64, d_model=72, n_layers=2, n_heads=3,
                 d_ff=256, activation="tanh", time_input=True, learning_rate=1e-3,
                 batch_size=64, n_steps=1000, random_state=0, state_shift=None,
                 state_scale=None, action_low=None, action_high=None):
        self.backbone = backbone
        self.hidden = hidden
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.activation = activation
        self.time_input = time_input
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.random_state = random_state
        self.state_shift = state_shift
        self.state_scale = state_scale
        self.action_low = action_low
        self.action_high = action_high

    def _build(self, rng):
        n, m = self.n_state_, self.n_action_
        net = Module()
        if self.backbone == "attention":
            d = self.d_model
            net.embed_s = _Linear(n, d, rng)
            net.embed_a = _Linear(m, d, rng)
            net.body = Transformer(d, self.n_layers, self.n_heads, self.d_ff,
                                   max_len=self.horizon_ + 1, rng=rng, context=2 * self.horizon_)
            net.head = _Linear(d, n, rng)
        elif self.backbone == "rnn":
            net.cell = RnnCell(n + m + int(self.time_input), self.hidden, n, self.activation,
                               state_dim=n, rng=rng)
        elif self.backbone == "lstm":
            net.cell = LstmCell(n + m + int(self.time_input), self.hidden, n, state_dim=n, rng=rng)
        else:
            raise ValueError(f"history model: unknown backbone {self.backbone!r}")
        return net

    def _step_input(self, tape, s, a, time_col):
        parts = [self._s_aff.encode(s), self._a_aff.encode(a)]
        if self.time_input:
            parts.append(time_col)
        return tape.concatenate(parts, axis=-1)

    def sequence_prediction(self, tape, S, A):
        self._check_dims(S, A)
        B, H, n = S.shape
        net = self.net_
        if self.backbone == "attention":
            zs = net.embed_s(tape, self._s_aff.encode(Value(S[:, :-1])))
            za = net.embed_a(tape, self._a_aff.encode(Value(A)))
            tokens = tape.apply("reshape", tape.stack([zs, za], axis=2), shape=(B, 2 * (H - 1), self.d_model))
            out = net.body.forward(tape, tokens, np.repeat(np.arange(1, H), 2))
            out = tape.apply("reshape", out, shape=(B, H - 1, 2, self.d_model))[:, :, 1, :]
            return self._s_aff.decode(net.head(tape, out))
        ctx = self.start(tape, Value(S[:, 0]))
        preds = [self.step(tape, ctx, Value(S[:, t - 1]), Value(A[:, t - 1]), t) for t in range(1, H)]
        return tape.stack(preds, axis=1)

    def start(self, tape, s1):
        ctx = _Context(s1=s1)
        net = self.net_
        if self.backbone == "attention":
            ctx.cache = net.body.new_cache()
        elif self.backbone == "rnn":
            ctx.carry = net.cell.init_hidden(tape, self._s_aff.encode(s1))
        else:
            ctx.carry = net.cell.init_carry(tape, self._s_aff.encode(s1))
        return ctx

    def step(self, tape, ctx, s_t, a_t, t):
        net = self.net_
        if self.backbone == "attention":
            zs = net.embed_s(tape, self._s_aff.encode(s_t))
            za = net.embed_a(tape, self._a_aff.encode(a_t))
            tokens = tape.stack([zs, za], axis=1)
            out = net.body.forward(tape, tokens, np.array([t, t]), cache=ctx.cache)
            return self._s_aff.decode(net.head(tape, out[:, 1, :]))
        inp = self._step_input(tape, s_t, a_t, _time_column(t, self.horizon_, s_t))
        ctx.carry, out = net.cell.step(tape, ctx.carry, inp)
        return self._s_aff.decode(out)


# -- Actions -------------------------------------------------------------------


class ActionsWorldModel(WorldModel):
    """``s_{t+1} = g(s_1, a_{1:t})``: no predicted state is ever fed back.

    Backbones: ``attention`` (transformer with ``s_1`` as a prefix token),
    ``attention_raw`` (one unscaled single-head softmax attention layer over the
    actions, output read directly as the state), ``rnn`` and ``lstm`` (hidden
    state seeded from ``s_1`` by a learned linear map). ``readout=False`` with
    the rnn backbone makes the hidden state the predicted state.
    """

    family = "actions"

    def __init__(self, backbone="attention", hidden=64, d_model=72, n_layers=2, n_heads=3,
                 d_ff=256, activation="tanh", time_input=True, readout=True, key_dim=None,
                 learning_rate=1e-3, batch_size=64, n_steps=1000, random_state=0,
                 state_shift=None, state_scale=None, action_low=None, action_high=None):
        self.backbone = backbone
        self.hidden = hidden
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.activation = activation
        self.time_input = time_input
        self.readout = readout
        self.key_dim = key_dim
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.random_state = random_state
        self.state_shift = state_shift
        self.state_scale = state_scale
        self.action_low = action_low
        self.action_high = action_high

    def _build(self, rng):
        n, m = self.n_state_, self.n_action_
        net = Module()
        if self.backbone == "attention":
            d = self.d_model
            net.embed_s = _Linear(n, d, rng)
            net.embed_a = _Linear(m, d, rng)
            net.body = Transformer(d, self.n_layers, self.n_heads, self.d_ff,
                                   max_len=self.horizon_ + 1, rng=rng)
            net.head = _Linear(d, n, rng)
        elif self.backbone == "attention_raw":
            net.attn = SelfAttention(m, self.key_dim or m, n, rng=rng)
        elif self.backbone == "rnn":
            hidden = self.hidden if self.readout else n
            net.cell = RnnCell(m + int(self.time_input), hidden, n, self.activation,
                               state_dim=n if self.readout else None, rng=rng, readout=self.readout)
        elif self.backbone == "lstm":
            net.cell = LstmCell(m + int(self.time_input), self.hidden, n, state_dim=n, rng=rng)
        else:
            raise ValueError(f"actions model: unknown backbone {self.backbone!r}")
        return net

    def _cell_input(self, tape, a, time_col):
        a = self._a_aff.encode(a)
        return tape.concatenate([a, time_col], axis=-1) if self.time_input else a

    def sequence_prediction(self, tape, S, A):
        self._check_dims(S, A)
        B, H, n = S.shape
        net = self.net_
        if self.backbone == "attention":
            prefix = net.embed_s(tape, self._s_aff.encode(Value(S[:, 0:1])))
            za = net.embed_a(tape, self._a_aff.encode(Value(A)))
            out = net.body.forward(tape, tape.concatenate([prefix, za], axis=1), np.arange(H))
            return self._s_aff.decode(net.head(tape, out[:, 1:, :]))
        ctx = self.start(tape, Value(S[:, 0]))
        preds = [self.step(tape, ctx, None, Value(A[:, t - 1]), t) for t in range(1, H)]
        return tape.stack(preds, axis=1)

    def start(self, tape, s1):
        ctx = _Context(s1=s1)
        net = self.net_
        if self.backbone == "attention":
            ctx.cache = net.body.new_cache()
            prefix = net.embed_s(tape, self._s_aff.encode(s1))
            net.body.forward(tape, tape.apply("reshape", prefix, shape=(s1.shape[0], 1, self.d_model)),
                             np.array([0]), cache=ctx.cache)
        elif self.backbone == "rnn":
            z = self._s_aff.encode(s1)
            ctx.carry = net.cell.init_hidden(tape, z) if self.readout else z
        elif self.backbone == "lstm":
            ctx.carry = net.cell.init_carry(tape, self._s_aff.encode(s1))
        return ctx

    def step(self, tape, ctx, s_t, a_t, t):
        # s_t is deliberately ignored
        net = self.net_
        B = a_t.shape[0]
        if self.backbone == "attention":
            za = net.embed_a(tape, self._a_aff.encode(a_t))
            out = net.body.forward(tape, tape.apply("reshape", za, shape=(B, 1, self.d_model)),
                                   np.array([t]), cache=ctx.cache)
            return self._s_aff.decode(net.head(tape, out[:, 0, :]))
        if self.backbone == "attention_raw":
            tok = self._a_aff.encode(a_t)
            ctx.tokens.append(tape.apply("reshape", tok, shape=(B, 1, self.n_action_)))
            seq = ctx.tokens[0] if len(ctx.tokens) == 1 else tape.concatenate(ctx.tokens, axis=1)
            return self._s_aff.decode(net.attn.forward_last(tape, seq))
        inp = self._cell_input(tape, a_t, _time_column(t, self.horizon_, a_t))
        ctx.carry, out = net.cell.step(tape, ctx.carry, inp)
        return self._s_aff.decode(out)


# -- f-RNN -----------------------------------------------------------------------


class FRnnWorldModel(WorldModel):
    """Actions model whose recurrent cell is the true dynamics: ``x_{t+1} = f(x_t, a_t)``.

    The readout is the identity, so its predictions are the true successors.
    There are no trainable parameters.
    """

    family = "f-rnn"
    backbone = "dynamics"

    def __init__(self, env: EnvProblem | None = None):
        self.env = env

    def initialize(self, n_state=None, n_action=None, horizon=None):
        env = self.env
        self.n_state_, self.n_action_, self.horizon_ = env.state_dim, env.action_dim, env.horizon
        self.net_ = Module()
        self.loss_curve_ = []
        return self

    def fit(self, X=None, y=None):
        return self.initialize()

    def train_step(self, S, A, clip=None):
        return float(model_loss(self, S, A).data)

    def sequence_prediction(self, tape, S, A):
        self._check_dims(S, A)
        ctx = self.start(tape, Value(S[:, 0]))
        return tape.stack([self.step(tape, ctx, None, Value(A[:, t - 1]), t)
                           for t in range(1, S.shape[1])], axis=1)

    def start(self, tape, s1):
        return _Context(s1=s1, carry=s1)

    def step(self, tape, ctx, s_t, a_t, t):
        ctx.carry = self.env.step(ctx.carry, a_t, t)
        return ctx.carry


def f_rnn_awm(env: EnvProblem) -> FRnnWorldModel:
    return FRnnWorldModel(env).initialize()


FAMILIES = {
    "markovian": MarkovianWorldModel,
    "history": HistoryWorldModel,
    "actions": ActionsWorldModel,
}


def make_world_model(family: str, env: EnvProblem, backbone: str | None = None,
                     normalize: bool = True, **params) -> WorldModel:
    """Build and initialize a model for ``env``, normalizing by the env's scales."""
    if family == "f-rnn":
        return f_rnn_awm(env)
    try:
        cls = FAMILIES[family]
    except KeyError:
        raise ValueError(f"unknown model family {family!r}") from None
    if backbone is not None and family != "markovian":
        params["backbone"] = backbone
    elif family == "markovian" and backbone not in (None, "mlp"):
        raise ValueError("the markovian family uses an mlp backbone")
    if normalize:
        params.setdefault("state_shift", env.obs_shift)
        params.setdefault("state_scale", env.obs_scale)
        params.setdefault("action_low", env.low)
        params.setdefault("action_high", env.high)
    model = cls(**params)
    return model.initialize(env.state_dim, env.action_dim, env.horizon)


def load_world_model(path) -> WorldModel:
    """Rebuild a model from a checkpoint written by ``WorldModel.save``."""
    header = json.loads(Path(path).with_suffix(".json").read_text()).get("header", {})
    try:
        cls = FAMILIES[header["family"]]
    except KeyError:
        raise ValueError(f"{path}: checkpoint header has no loadable model family") from None
    arrays = ("state_shift", "state_scale", "action_low", "action_high")
    params = {k: (np.asarray(v, dtype=float) if k in arrays else tuple(v))
              if isinstance(v, list) else v for k, v in header.get("params", {}).items()}
    model = cls(**params).initialize(header["n_state"], header["n_action"], header["horizon"])
    model.load(path)
    return model


# -- losses --------------------------------------------------------------------


def model_loss(model: WorldModel, S, A, tape: Tape | None = None) -> Value:
    """``mean over batch of sum_t ||s_{t+1} - prediction||^2`` for the model's family."""
    S, A = as_arrays((S, A))
    tape = tape if tape is not None else Tape()
    if S.shape[1] < 2:
        return tape.apply("sum", Value(np.zeros(1)))
    pred = model.sequence_prediction(tape, S, A)
    err = pred - Value(S[:, 1:])
    return err.square().sum() * (1.0 / S.shape[0])


def teacher_forced_loss(model: ActionsWorldModel, S, A, tape: Tape | None = None) -> Value:
    """Sequence loss of an identity-readout rnn AWM with true states as the recurrent input."""
    if not isinstance(model, ActionsWorldModel) or model.backbone != "rnn" or model.readout:
        raise ValueError("teacher forcing needs an actions model with rnn backbone and readout=False")
    S, A = as_arrays((S, A))
    model._check_dims(S, A)
    tape = tape if tape is not None else Tape()
    cell, H = model.net_.cell, S.shape[1]
    total = None
    for t in range(1, H):
        x_t = model._s_aff.encode(Value(S[:, t - 1]))
        a_t = Value(A[:, t - 1])
        _, out = cell.step(tape, x_t, model._cell_input(tape, a_t, _time_column(t, model.horizon_, a_t)))
        term = (model._s_aff.decode(out) - Value(S[:, t])).square().sum()
        total = term if total is None else total + term
    if total is None:
        return tape.apply("sum", Value(np.zeros(1)))
    return total * (1.0 / S.shape[0])


# -- imagined rollouts -----------------------------------------------------------


@dataclass
class Rollout:
    """An on-tape imagined episode; ``ret`` has one entry per batch row."""

    states: list
    actions: list
    log_probs: list
    rewards: list
    ret: Value
    tape: Tape

    @property
    def horizon(self) -> int:
        return len(self.states)

    def states_array(self) -> np.ndarray:
        return np.stack([s.data for s in self.states], axis=1)

    def actions_array(self) -> np.ndarray:
        m = self.actions[0].shape[-1] if self.actions else 0
        if not self.actions:
            return np.zeros((self.states[0].shape[0], 0, m))
        return np.stack([a.data for a in self.actions], axis=1)


def unroll(model: WorldModel, policy, env: EnvProblem, tape: Tape | None = None,
           batch: int = 1, noise: np.ndarray | None = None, stop_grad: bool = True) -> Rollout:
    """Roll the policy through the model from ``env``'s fixed initial state.

    ``noise`` has shape ``(H - 1, batch, m)`` (zeros give mean actions). Rewards
    use the env's known reward function on predicted states; the return is the
    sum over ``t = 1..H``.
    """
    tape = tape if tape is not None else Tape()
    H = env.horizon
    if noise is None:
        noise = np.zeros((max(H - 1, 0), batch, env.action_dim))
    s = env.initial_state(batch)
    ctx = model.start(tape, s)
    states, actions, logps, rewards = [s], [], [], []
    for t in range(1, H):
        a, logp = policy.act(tape, s, t, noise[t - 1], stop_grad=stop_grad)
        rewards.append(env.reward(s, a, t))
        s = model.predict_next(tape, ctx, s, a, t)
        states.append(s)
        actions.append(a)
        logps.append(logp)
    rewards.append(env.reward(s, None, H))
    ret = rewards[0]
    for r in rewards[1:]:
        ret = ret + r
    return Rollout(states, actions, logps, rewards, ret, tape)
