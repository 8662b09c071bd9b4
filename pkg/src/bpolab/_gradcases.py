"""Random gradient-check instances for every op kind and every backbone.

Each case builds ``(x, f)`` from an rng: ``x`` is one flat input array and ``f``
maps ``(tape, leaf)`` to a scalar by contracting the op's output with fixed
random weights. Backbone cases read their parameters out of ``x``.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Value, grad_check
from .nets import LstmCell, Mlp, Module, RnnCell, SelfAttention, Transformer

__all__ = ["OP_CASES", "BACKBONE_CASES", "run_case", "run_corpus"]


def _contract(tape: Tape, out: Value, w: np.ndarray) -> Value:
    return tape.apply("sum", tape.apply("multiply", out, Value(w)))


def _split(tape, xv, shapes):
    parts, off = [], 0
    for shp in shapes:
        n = int(np.prod(shp)) if shp else 1
        part = tape.apply("slice", xv, index=slice(off, off + n))
        parts.append(tape.apply("reshape", part, shape=shp))
        off += n
    return parts


def _away_from(x, points, gap=1e-2):
    # keep inputs off kinks so central differences see one smooth piece
    for p in points:
        x = np.where(np.abs(x - p) < gap, p + 2 * gap * np.where(x >= p, 1.0, -1.0), x)
    return x


def _op_case(kind, shapes, sampler=None, **attrs):
    def make(rng):
        arrays = [sampler(rng, s) if sampler else rng.normal(size=s) for s in shapes]
        x = np.concatenate([a.ravel() for a in arrays])
        probe_tape = Tape()
        out_shape = probe_tape.apply(kind, *(Value(a) for a in arrays), **attrs).shape
        w = rng.normal(size=out_shape)

        def f(tape, xv):
            return _contract(tape, tape.apply(kind, *_split(tape, xv, shapes), **attrs), w)

        return x, f

    return make


def _positive(rng, s):
    return rng.uniform(0.5, 2.0, size=s)


def _nonzero(rng, s):
    return _away_from(rng.normal(size=s), [0.0])


def _clip_safe(rng, s):
    return _away_from(rng.normal(size=s), [-0.5, 0.5])


OP_CASES = {
    "matmul": _op_case("matmul", [(3, 4), (4, 2)]),
    "matmul_batched": _op_case("matmul", [(2, 3, 3, 4), (2, 3, 4, 2)]),
    "add": _op_case("add", [(3, 4), (3, 4)]),
    "add_bias": _op_case("add", [(3, 4), (4,)]),
    "subtract": _op_case("subtract", [(3, 4), (3, 4)]),
    "subtract_bias": _op_case("subtract", [(2, 3, 4), (4,)]),
    "multiply": _op_case("multiply", [(3, 4), (3, 4)]),
    "divide": _op_case("divide", [(3, 4), (3, 4)], lambda r, s: r.uniform(0.5, 2.0, s) * r.choice([-1, 1], s)),
    "scale": _op_case("scale", [(3, 4)], factor=-1.7),
    "tanh": _op_case("tanh", [(3, 4)]),
    "sigmoid": _op_case("sigmoid", [(3, 4)]),
    "relu": _op_case("relu", [(3, 4)], _nonzero),
    "exp": _op_case("exp", [(3, 4)]),
    "log": _op_case("log", [(3, 4)], _positive),
    "square": _op_case("square", [(3, 4)]),
    "sin": _op_case("sin", [(3, 4)]),
    "cos": _op_case("cos", [(3, 4)]),
    "softplus": _op_case("softplus", [(3, 4)]),
    "gelu": _op_case("gelu", [(3, 4)]),
    "softmax": _op_case("softmax", [(3, 5)]),
    "layernorm": _op_case("layernorm", [(3, 5)]),
    "sum": _op_case("sum", [(3, 4)]),
    "sum_axis": _op_case("sum", [(3, 4)], axis=0),
    "mean": _op_case("mean", [(3, 4)]),
    "mean_axis": _op_case("mean", [(3, 4)], axis=-1),
    "concatenate": _op_case("concatenate", [(3, 2), (3, 4)], axis=1),
    "stack": _op_case("stack", [(3, 2), (3, 2)], axis=1),
    "slice": _op_case("slice", [(4, 5)], index=(slice(1, 3), slice(None, None, 2))),
    "reshape": _op_case("reshape", [(3, 4)], shape=(2, 6)),
    "transpose": _op_case("transpose", [(2, 3, 4)], axes=(2, 0, 1)),
    "clip": _op_case("clip", [(3, 4)], _clip_safe, lo=-0.5, hi=0.5),
}


# -- backbones -----------------------------------------------------------------


def _bind_all(tape: Tape, module: Module, xv: Value) -> None:
    params = module.parameters()
    shapes = [p.shape for p in params]
    for p, v in zip(params, _split(tape, xv, shapes)):
        tape.bind(p, v)


def _backbone_case(build, run, n_coords=24):
    def make(rng):
        module = build(rng)
        x = module.get_flat()
        inputs, w = run(None, module, None, rng)

        def f(tape, xv):
            _bind_all(tape, module, xv)
            out, _ = run(tape, module, inputs, None)
            return _contract(tape, out, w)

        coords = rng.choice(x.size, size=min(n_coords, x.size), replace=False)
        return x, f, coords

    return make


def _mlp_run(tape, mod, inputs, rng):
    if tape is None:
        x = rng.normal(size=(4, 3))
        return x, rng.normal(size=(4, 2))
    return mod.forward(tape, Value(inputs)), None


def _rnn_run(tape, mod, inputs, rng):
    if tape is None:
        s1, acts = rng.normal(size=(2, 2)), rng.normal(size=(5, 2, 2))
        return (s1, acts), rng.normal(size=(5, 2, 2))
    s1, acts = inputs
    x = mod.init_hidden(tape, Value(s1))
    outs = []
    for a in acts:
        x, y = mod.step(tape, x, Value(a))
        outs.append(y)
    return tape.stack(outs, axis=0), None


def _lstm_run(tape, mod, inputs, rng):
    if tape is None:
        s1, acts = rng.normal(size=(2, 2)), rng.normal(size=(5, 2, 2))
        return (s1, acts), rng.normal(size=(5, 2, 2))
    s1, acts = inputs
    carry = mod.init_carry(tape, Value(s1))
    outs = []
    for a in acts:
        carry, y = mod.step(tape, carry, Value(a))
        outs.append(y)
    return tape.stack(outs, axis=0), None


def _transformer_run(tape, mod, inputs, rng):
    if tape is None:
        return rng.normal(size=(2, 4, mod.d_model)), rng.normal(size=(2, 4, mod.d_model))
    return mod.forward(tape, Value(inputs)), None


def _attention_run(tape, mod, inputs, rng):
    if tape is None:
        return rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 2))
    return mod.forward_last(tape, Value(inputs)), None


BACKBONE_CASES = {
    "mlp": _backbone_case(lambda r: Mlp(3, 2, (64, 64), "tanh", r), _mlp_run),
    "rnn": _backbone_case(lambda r: RnnCell(2, 8, 2, "tanh", state_dim=2, rng=r), _rnn_run),
    "lstm": _backbone_case(lambda r: LstmCell(2, 8, 2, state_dim=2, rng=r), _lstm_run),
    "transformer": _backbone_case(lambda r: Transformer(72, 2, 3, 256, max_len=8, rng=r), _transformer_run),
    "attention": _backbone_case(lambda r: SelfAttention(3, 4, 2, rng=r), _attention_run),
}


def run_case(name: str, rng: np.random.Generator) -> float:
    if name in OP_CASES:
        x, f = OP_CASES[name](rng)
        return grad_check(f, x, eps=1e-5)
    x, f, coords = BACKBONE_CASES[name](rng)
    return grad_check(f, x, eps=1e-5, coords=coords)


def run_corpus(n_instances: int = 100, seed: int = 0, names=None) -> dict:
    names = list(OP_CASES) + list(BACKBONE_CASES) if names is None else list(names)
    out = {}
    for i, name in enumerate(names):
        rng = np.random.default_rng([seed, i])
        out[name] = max(run_case(name, rng) for _ in range(n_instances))
    return out
