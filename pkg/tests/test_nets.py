import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bpolab import _gradcases
from bpolab.autodiff import Parameter, ShapeError, Tape, Value, backward
from bpolab.nets import Adam, LstmCell, Mlp, RnnCell, SelfAttention, Transformer, global_norm, load_params, save_params


@pytest.mark.parametrize("name", sorted(_gradcases.BACKBONE_CASES))
def test_backbone_matches_finite_differences(name):
    rng = np.random.default_rng(11)
    assert _gradcases.run_case(name, rng) <= 1e-5


def test_mlp_shapes_and_input_check():
    mlp = Mlp(3, 2, (8, 8), "relu", np.random.default_rng(0))
    assert mlp.forward(Tape(), Value(np.ones((5, 3)))).shape == (5, 2)
    assert mlp.num_parameters() == 3 * 8 + 8 + 8 * 8 + 8 + 8 * 2 + 2
    with pytest.raises(ShapeError):
        mlp.forward(Tape(), Value(np.ones((5, 4))))
    with pytest.raises(ValueError):
        Mlp(3, 2, (8,), "swish")


def test_flat_roundtrip():
    mlp = Mlp(2, 2, (4,), rng=np.random.default_rng(1))
    flat = mlp.get_flat()
    mlp.zero_()
    assert not mlp.get_flat().any()
    mlp.set_flat(flat)
    np.testing.assert_array_equal(mlp.get_flat(), flat)
    with pytest.raises(ShapeError):
        mlp.set_flat(np.ones(flat.size + 1))


def test_rnn_without_readout_outputs_its_hidden_state():
    cell = RnnCell(2, 3, 3, "identity", state_dim=3, readout=False, rng=np.random.default_rng(0))
    tape = Tape()
    x = cell.init_hidden(tape, Value(np.ones((1, 3))))
    x2, y = cell.step(tape, x, Value(np.ones((1, 2))))
    np.testing.assert_array_equal(x2.data, y.data)


def test_lstm_step_shapes():
    cell = LstmCell(2, 5, 3, state_dim=3, rng=np.random.default_rng(0))
    tape = Tape()
    carry = cell.init_carry(tape, Value(np.zeros((4, 3))))
    carry, y = cell.step(tape, carry, Value(np.ones((4, 2))))
    assert y.shape == (4, 3) and carry[0].shape == (4, 5)


def test_raw_attention_by_hand():
    att = SelfAttention(1, 1, 1)
    att.W_q.data[...] = 1.0
    att.W_k.data[...] = 1.0
    att.W_v.data[...] = 2.0
    tokens = np.array([[[0.0], [1.0]]])
    out = att.forward_last(Tape(), Value(tokens)).data
    c = np.exp([0.0, 1.0]) / np.exp([0.0, 1.0]).sum()  # scores q k = 1 * [0, 1], unscaled
    np.testing.assert_allclose(out, [[c @ np.array([0.0, 2.0])]])


def _transformer(rng=0, **kw):
    return Transformer(12, 2, 3, 16, max_len=10, rng=np.random.default_rng(rng), **kw)


def test_transformer_is_causal():
    tf = _transformer()
    x = np.random.default_rng(1).normal(size=(2, 6, 12))
    y = x.copy()
    y[:, 4:] += np.random.default_rng(9).normal(size=(2, 2, 12))
    out_x = tf.forward(Tape(), Value(x)).data
    out_y = tf.forward(Tape(), Value(y)).data
    np.testing.assert_array_equal(out_x[:, :4], out_y[:, :4])
    assert not np.allclose(out_x[:, 4:], out_y[:, 4:])


def test_kv_cache_matches_full_pass_values_and_gradients():
    tf = _transformer()
    x = np.random.default_rng(2).normal(size=(2, 7, 12))
    w = np.random.default_rng(3).normal(size=(2, 7, 12))
    tape = Tape()
    xv = tape.leaf(x)
    full = tf.forward(tape, xv)
    g_full = backward(tape, (full * Value(w)).sum()).wrt(xv)
    tape = Tape()
    xv = tape.leaf(x)
    cache = tf.new_cache()
    outs = [tf.forward(tape, xv[:, :3], cache=cache)]
    for t in range(3, 7):
        outs.append(tf.forward(tape, xv[:, t : t + 1], cache=cache))
    inc = tape.concatenate(outs, axis=1)
    np.testing.assert_allclose(inc.data, full.data, rtol=0, atol=1e-12)
    g_inc = backward(tape, (inc * Value(w)).sum()).wrt(xv)
    np.testing.assert_allclose(g_inc, g_full, rtol=0, atol=1e-12)


def test_transformer_context_and_position_limits():
    tf = _transformer(context=4)
    with pytest.raises(ValueError, match="context"):
        tf.forward(Tape(), Value(np.zeros((1, 5, 12))))
    with pytest.raises(ValueError, match="positions"):
        tf.forward(Tape(), Value(np.zeros((1, 2, 12))), positions=np.array([3, 10]))
    with pytest.raises(ValueError):
        Transformer(10, n_heads=3)


def test_adam_descends_a_quadratic():
    p = Parameter(np.array([3.0, -2.0]))
    opt = Adam([p], lr=0.1)
    for _ in range(300):
        opt.step([2 * p.data])
    np.testing.assert_allclose(p.data, 0.0, atol=1e-2)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e6), st.floats(1e-2, 1e3))
def test_adam_clip_bounds_post_norm(scale, clip):
    p = Parameter(np.zeros(5))
    g = np.linspace(-1, 1, 5) * scale
    pre, post = Adam([p]).step([g], clip=clip)
    assert pre == pytest.approx(global_norm([g]))
    assert post <= clip + 1e-9
    assert post == pytest.approx(min(pre, clip))


def test_adam_rejects_non_finite_gradients():
    p = Parameter(np.zeros(2))
    with pytest.raises(FloatingPointError):
        Adam([p]).step([np.array([np.nan, 0.0])])
    np.testing.assert_array_equal(p.data, 0.0)


def test_save_load_roundtrip(tmp_path):
    a = Mlp(3, 2, (5,), rng=np.random.default_rng(0))
    b = Mlp(3, 2, (5,), rng=np.random.default_rng(1))
    save_params(a, tmp_path / "m", {"kind": "mlp"})
    assert load_params(b, tmp_path / "m") == {"kind": "mlp"}
    np.testing.assert_array_equal(a.get_flat(), b.get_flat())
    with pytest.raises(ValueError):
        load_params(Mlp(3, 2, (6,)), tmp_path / "m")
