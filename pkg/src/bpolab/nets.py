"""Network backbones: MLP, vanilla RNN cell, LSTM cell, causal transformer.

All networks use the row-vector convention: inputs are ``(..., features)`` and
weights are stored as ``(in, out)`` matrices, so ``x @ W`` is a layer. The
column-vector matrices of the recurrence ``x' = sigma(W_x x) + W_a a + b`` are
the transposes of what is stored here; spectral norms are unaffected.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .autodiff import Parameter, ShapeError, Tape, Value

__all__ = [
    "Module",
    "Mlp",
    "RnnCell",
    "LstmCell",
    "SelfAttention",
    "Transformer",
    "Adam",
    "global_norm",
    "save_params",
    "load_params",
    "ACTIVATIONS",
]

# activation name -> (op kind or None for identity, bound on |sigma'|, i.e. 1/beta)
ACTIVATIONS = {
    "tanh": ("tanh", 1.0),
    "sigmoid": ("sigmoid", 0.25),
    "relu": ("relu", 1.0),
    "identity": (None, 1.0),
}


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Container of named parameters and child modules."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            value.name = value.name or name
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def get_flat(self) -> np.ndarray:
        ps = self.parameters()
        return np.concatenate([p.data.reshape(-1) for p in ps]) if ps else np.zeros(0)

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        i = 0
        for p in self.parameters():
            n = p.data.size
            p.data = flat[i : i + n].reshape(p.shape).copy()
            i += n
        if i != flat.size:
            raise ShapeError(f"set_flat: expected {i} values, got {flat.size}")

    def zero_(self) -> "Module":
        for p in self.parameters():
            p.data = np.zeros_like(p.data)
        return self


class Mlp(Module):
    """Feed-forward net; hidden layers use ``activation``, the last layer is linear."""

    def __init__(self, in_dim: int, out_dim: int, hidden: Sequence[int] = (64, 64),
                 activation: str = "tanh", rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.in_dim, self.out_dim = in_dim, out_dim
        self.hidden = tuple(hidden)
        self.activation = activation
        sizes = [in_dim, *self.hidden, out_dim]
        self.layers: list[tuple[Parameter, Parameter]] = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            W = Parameter(uniform_init(rng, a, (a, b)), f"W{i}")
            bias = Parameter(np.zeros(b), f"b{i}")
            setattr(self, f"W{i}", W)
            setattr(self, f"b{i}", bias)
            self.layers.append((W, bias))

    def forward(self, tape: Tape, x: Value) -> Value:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"mlp: expected input width {self.in_dim}, got shape {x.shape}")
        h = x
        last = len(self.layers) - 1
        for i, (W, b) in enumerate(self.layers):
            h = tape.apply("add", tape.apply("matmul", h, tape.param(W)), tape.param(b))
            if i < last:
                h = _act(tape, h, self.activation)
        return h


def _act(tape: Tape, x: Value, kind: str) -> Value:
    op = ACTIVATIONS[kind][0]
    return x if op is None else tape.apply(op, x)


class RnnCell(Module):
    """Vanilla recurrence ``x' = sigma(x W_x) + a W_a + b`` with readout ``s = x W_o``.

    ``W_s`` maps the initial state to the first hidden state (``b_s`` bias).
    With ``readout=False`` there is no ``W_o`` and the hidden state is the output,
    which makes the cell a one-step state model.
    """

    def __init__(self, in_dim: int, hidden: int, out_dim: int, activation: str = "tanh",
                 state_dim: int | None = None, rng: np.random.Generator | None = None,
                 readout: bool = True):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.in_dim, self.hidden_dim, self.out_dim = in_dim, hidden, out_dim
        self.activation = activation
        self.W_x = Parameter(uniform_init(rng, hidden, (hidden, hidden)))
        self.W_a = Parameter(uniform_init(rng, in_dim, (in_dim, hidden)))
        self.b = Parameter(np.zeros(hidden))
        self.readout = readout
        if readout:
            self.W_o = Parameter(uniform_init(rng, hidden, (hidden, out_dim)))
        elif out_dim != hidden:
            raise ShapeError(f"identity readout needs hidden == out_dim, got {hidden} and {out_dim}")
        if state_dim is not None:
            self.W_s = Parameter(uniform_init(rng, state_dim, (state_dim, hidden)))
            self.b_s = Parameter(np.zeros(hidden))

    @property
    def inv_beta(self) -> float:
        """Upper bound on the activation's derivative (1/beta)."""
        return ACTIVATIONS[self.activation][1]

    def init_hidden(self, tape: Tape, s1: Value) -> Value:
        return tape.apply("add", tape.apply("matmul", s1, tape.param(self.W_s)), tape.param(self.b_s))

    def step(self, tape: Tape, x: Value, a: Value) -> tuple[Value, Value]:
        if x.shape[-1] != self.hidden_dim or a.shape[-1] != self.in_dim:
            raise ShapeError(f"rnn_step: hidden {x.shape} / input {a.shape} do not match "
                             f"({self.hidden_dim}, {self.in_dim})")
        rec = _act(tape, tape.apply("matmul", x, tape.param(self.W_x)), self.activation)
        drive = tape.apply("add", tape.apply("matmul", a, tape.param(self.W_a)), tape.param(self.b))
        x_next = tape.apply("add", rec, drive)
        if not self.readout:
            return x_next, x_next
        return x_next, tape.apply("matmul", x_next, tape.param(self.W_o))


class LstmCell(Module):
    """Four-gate LSTM (sigmoid gates, tanh candidate) with a linear readout."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, state_dim: int | None = None,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.hidden_dim, self.out_dim = in_dim, hidden, out_dim
        # gate order along the last axis: input, forget, output, candidate
        self.W = Parameter(uniform_init(rng, in_dim + hidden, (in_dim + hidden, 4 * hidden)))
        self.b = Parameter(np.zeros(4 * hidden))
        self.W_o = Parameter(uniform_init(rng, hidden, (hidden, out_dim)))
        if state_dim is not None:
            self.W_s = Parameter(uniform_init(rng, state_dim, (state_dim, 2 * hidden)))
            self.b_s = Parameter(np.zeros(2 * hidden))

    def init_carry(self, tape: Tape, s1: Value) -> tuple[Value, Value]:
        hc = tape.apply("add", tape.apply("matmul", s1, tape.param(self.W_s)), tape.param(self.b_s))
        n = self.hidden_dim
        h = tape.apply("slice", hc, index=(Ellipsis, slice(0, n)))
        c = tape.apply("slice", hc, index=(Ellipsis, slice(n, 2 * n)))
        return h, c

    def step(self, tape: Tape, carry: tuple[Value, Value], a: Value):
        h, c = carry
        if a.shape[-1] != self.in_dim or h.shape[-1] != self.hidden_dim:
            raise ShapeError(f"lstm_step: input {a.shape} / hidden {h.shape} do not match "
                             f"({self.in_dim}, {self.hidden_dim})")
        z = tape.concatenate([a, h], axis=-1)
        z = tape.apply("add", tape.apply("matmul", z, tape.param(self.W)), tape.param(self.b))
        n = self.hidden_dim

        def gate(k):
            return tape.apply("slice", z, index=(Ellipsis, slice(k * n, (k + 1) * n)))

        i = tape.apply("sigmoid", gate(0))
        f = tape.apply("sigmoid", gate(1))
        o = tape.apply("sigmoid", gate(2))
        g = tape.apply("tanh", gate(3))
        c_next = tape.apply("add", tape.apply("multiply", f, c), tape.apply("multiply", i, g))
        h_next = tape.apply("multiply", o, tape.apply("tanh", c_next))
        return (h_next, c_next), tape.apply("matmul", h_next, tape.param(self.W_o))


class SelfAttention(Module):
    """Single-head attention without scaling: ``softmax(q K^T) V`` for the last query.

    Given tokens ``(B, t, d)``, the output at the last position is
    ``sum_i c_i (a_i W_v)`` with ``c = softmax(a_t W_q (a_{1:t} W_k)^T)``.
    """

    def __init__(self, in_dim: int, key_dim: int, out_dim: int,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.key_dim, self.out_dim = in_dim, key_dim, out_dim
        self.W_q = Parameter(uniform_init(rng, in_dim, (in_dim, key_dim)))
        self.W_k = Parameter(uniform_init(rng, in_dim, (in_dim, key_dim)))
        self.W_v = Parameter(uniform_init(rng, in_dim, (in_dim, out_dim)))

    def forward_last(self, tape: Tape, tokens: Value) -> Value:
        if tokens.ndim != 3 or tokens.shape[-1] != self.in_dim or tokens.shape[1] < 1:
            raise ShapeError(f"attention: expected (B, t>=1, {self.in_dim}), got {tokens.shape}")
        t = tokens.shape[1]
        q = tape.apply("matmul", tape.apply("slice", tokens, index=(slice(None), slice(t - 1, t))),
                       tape.param(self.W_q))  # (B, 1, k)
        k = tape.apply("matmul", tokens, tape.param(self.W_k))  # (B, t, k)
        v = tape.apply("matmul", tokens, tape.param(self.W_v))  # (B, t, o)
        scores = tape.apply("matmul", q, tape.apply("transpose", k))  # (B, 1, t)
        c = tape.apply("softmax", scores)
        out = tape.apply("matmul", c, v)  # (B, 1, o)
        return tape.apply("reshape", out, shape=(out.shape[0], self.out_dim))


def _causal_mask(n: int, past: int = 0) -> np.ndarray:
    """Additive mask for ``n`` new queries over ``past`` cached plus ``n`` new keys."""
    return np.concatenate([np.zeros((n, past)), np.triu(np.full((n, n), -1e30), k=1)], axis=1)


class KVCache:
    """Keys and values of already-processed tokens, one entry per layer.

    Used for incremental causal evaluation: feeding a sequence in chunks through
    :meth:`Transformer.forward` with a cache gives the same outputs as one pass
    over the whole sequence. The cached arrays are tape values, so gradients
    flow back into earlier tokens.
    """

    def __init__(self, n_layers: int):
        self.keys: list[Value | None] = [None] * n_layers
        self.values: list[Value | None] = [None] * n_layers
        self.length = 0


class Transformer(Module):
    """GPT-2 style causal stack over pre-embedded tokens.

    Each block is ``x + Attn(LN(x))`` followed by ``x + FF(LN(x))`` with a GELU
    feed-forward. Layer norms carry no learned gain (following linear layers can
    absorb it). Learned position embeddings are added to the input tokens.
    """

    def __init__(self, d_model: int = 72, n_layers: int = 2, n_heads: int = 3,
                 d_ff: int = 256, max_len: int = 512, rng: np.random.Generator | None = None,
                 context: int | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.d_model, self.n_layers, self.n_heads, self.d_ff = d_model, n_layers, n_heads, d_ff
        self.max_len = max_len  # rows of the position table
        self.context = max_len if context is None else context  # max tokens per sequence
        self.pos = Parameter(rng.normal(0.0, 0.02, size=(max_len, d_model)))
        self.blocks = []
        for i in range(n_layers):
            block = _Block(d_model, n_heads, d_ff, rng)
            setattr(self, f"block{i}", block)
            self.blocks.append(block)

    def new_cache(self) -> KVCache:
        return KVCache(self.n_layers)

    def forward(self, tape: Tape, tokens: Value, positions: np.ndarray | None = None,
                cache: KVCache | None = None) -> Value:
        """Outputs ``(B, T, d)`` for tokens ``(B, T, d)``; each token sees itself and earlier ones.

        ``positions`` gives the embedding row of each token (default: running
        token index). With ``cache``, the tokens continue the cached sequence and
        the cache is extended in place.
        """
        if tokens.ndim != 3 or tokens.shape[-1] != self.d_model:
            raise ShapeError(f"transformer: expected (B, T, {self.d_model}), got {tokens.shape}")
        B, T, _ = tokens.shape
        if T < 1:
            raise ShapeError("transformer: empty sequence")
        past = cache.length if cache is not None else 0
        positions = np.arange(past, past + T) if positions is None else np.asarray(positions)
        if past + T > self.context:
            raise ValueError(f"sequence of length {past + T} exceeds context {self.context}")
        if positions.min() < 0 or positions.max() >= self.max_len:
            raise ValueError(f"positions must lie in [0, {self.max_len}), got {positions}")
        onehot = np.zeros((B, T, self.max_len))
        onehot[:, np.arange(T), positions] = 1.0
        x = tape.apply("add", tokens, tape.apply("matmul", Value(onehot), tape.param(self.pos)))
        mask = None
        if T > 1:
            mask = Value(np.broadcast_to(_causal_mask(T, past), (B, self.n_heads, T, past + T)).copy())
        for i, block in enumerate(self.blocks):
            past_kv = (cache.keys[i], cache.values[i]) if cache is not None and past else None
            x, (k, v) = block.forward(tape, x, mask, past_kv)
            if cache is not None:
                cache.keys[i], cache.values[i] = k, v
        if cache is not None:
            cache.length = past + T
        return tape.apply("layernorm", x)


class _Block(Module):
    def __init__(self, d: int, n_heads: int, d_ff: int, rng: np.random.Generator):
        super().__init__()
        self.d, self.h = d, n_heads
        self.W_q = Parameter(uniform_init(rng, d, (d, d)))
        self.W_k = Parameter(uniform_init(rng, d, (d, d)))
        self.W_v = Parameter(uniform_init(rng, d, (d, d)))
        # no key bias: it shifts every score of a query equally, so softmax ignores it
        self.b_q = Parameter(np.zeros(d))
        self.b_v = Parameter(np.zeros(d))
        self.W_proj = Parameter(uniform_init(rng, d, (d, d)))
        self.b_proj = Parameter(np.zeros(d))
        self.W_ff1 = Parameter(uniform_init(rng, d, (d, d_ff)))
        self.b_ff1 = Parameter(np.zeros(d_ff))
        self.W_ff2 = Parameter(uniform_init(rng, d_ff, (d_ff, d)))
        self.b_ff2 = Parameter(np.zeros(d))

    def _heads(self, tape, x, W, b=None):
        B, T, _ = x.shape
        y = tape.apply("matmul", x, tape.param(W))
        if b is not None:
            y = tape.apply("add", y, tape.param(b))
        y = tape.apply("reshape", y, shape=(B, T, self.h, self.d // self.h))
        return tape.apply("transpose", y, axes=(0, 2, 1, 3))  # (B, h, T, dh)

    def forward(self, tape: Tape, x: Value, mask: Value | None, past_kv=None):
        B, T, d = x.shape
        z = tape.apply("layernorm", x)
        q = self._heads(tape, z, self.W_q, self.b_q)
        k = self._heads(tape, z, self.W_k)
        v = self._heads(tape, z, self.W_v, self.b_v)
        if past_kv is not None:
            k = tape.concatenate([past_kv[0], k], axis=2)
            v = tape.concatenate([past_kv[1], v], axis=2)
        scores = tape.apply("scale", tape.apply("matmul", q, tape.apply("transpose", k, axes=(0, 1, 3, 2))),
                            factor=1.0 / np.sqrt(d // self.h))
        if mask is not None:
            scores = tape.apply("add", scores, mask)
        att = tape.apply("matmul", tape.apply("softmax", scores), v)  # (B, h, T, dh)
        att = tape.apply("reshape", tape.apply("transpose", att, axes=(0, 2, 1, 3)), shape=(B, T, d))
        att = tape.apply("add", tape.apply("matmul", att, tape.param(self.W_proj)), tape.param(self.b_proj))
        x = tape.apply("add", x, att)
        z = tape.apply("layernorm", x)
        z = tape.apply("gelu", tape.apply("add", tape.apply("matmul", z, tape.param(self.W_ff1)),
                                          tape.param(self.b_ff1)))
        z = tape.apply("add", tape.apply("matmul", z, tape.param(self.W_ff2)), tape.param(self.b_ff2))
        return tape.apply("add", x, z), (k, v)


# -- optimization -----------------------------------------------------------


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


class Adam:
    """Adam over a list of parameters, with optional global-norm gradient clipping.

    ``step`` descends; pass negated gradients to ascend.
    """

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads, clip: float | None = None) -> tuple[float, float]:
        """Apply one update; returns ``(norm before clipping, norm after clipping)``."""
        norm = global_norm(grads)
        if not np.isfinite(norm):
            raise FloatingPointError("non-finite gradient")
        post = norm
        if clip is not None and norm > clip:
            grads = [g * (clip / norm) for g in grads]
            post = global_norm(grads)
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm, post


# -- serialization ----------------------------------------------------------


def save_params(module: Module, path, header: dict | None = None) -> tuple[Path, Path]:
    """Write ``<path>.bin`` (flat little-endian float64) and ``<path>.json`` (shapes)."""
    path = Path(path)
    entries, offset, chunks = [], 0, []
    for name, p in module.named_parameters():
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += p.data.size
        chunks.append(p.data.reshape(-1))
    flat = np.concatenate(chunks) if chunks else np.zeros(0)
    bin_path, json_path = path.with_suffix(".bin"), path.with_suffix(".json")
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    flat.astype("<f8").tofile(bin_path)
    manifest = {"dtype": "<f8", "count": int(offset), "params": entries}
    if header:
        manifest["header"] = header
    json_path.write_text(json.dumps(manifest, indent=2))
    return bin_path, json_path


def load_params(module: Module, path) -> dict:
    """Load parameters written by :func:`save_params`; returns the manifest header."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    flat = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    if flat.size != manifest["count"]:
        raise ValueError(f"{path}: expected {manifest['count']} floats, found {flat.size}")
    named = dict(module.named_parameters())
    names = [e["name"] for e in manifest["params"]]
    if sorted(names) != sorted(named):
        raise ValueError(f"{path}: parameter names do not match the module")
    for e in manifest["params"]:
        p = named[e["name"]]
        if list(p.shape) != e["shape"]:
            raise ShapeError(f"{e['name']}: stored shape {e['shape']} vs module {list(p.shape)}")
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        p.data = flat[e["offset"] : e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    return manifest.get("header", {})
