import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bpolab.autodiff import Tape, Value, backward
from bpolab.envs import make_env
from bpolab.policy import LOG_STD_RANGE, SquashedGaussianPolicy, action_jacobian, policy_objective
from bpolab.worldmodels import f_rnn_awm, unroll


def _policy(low=(-2.0,), high=(1.0,), seed=0, **kw):
    return SquashedGaussianPolicy(2, len(low), low, high, horizon=10, rng=np.random.default_rng(seed), **kw)


@settings(max_examples=30, deadline=None)
@given(st.floats(-1e3, 1e3), st.integers(1, 9))
def test_actions_stay_strictly_inside_bounds(noise, t):
    pol = _policy()
    a, logp = pol.act(Tape(), Value(np.array([[0.3, -5.0]])), t, noise)
    assert np.all(a.data > -2.0) and np.all(a.data < 1.0)
    assert np.all(np.isfinite(logp.data))


def test_log_prob_matches_change_of_variables():
    pol = _policy()
    s = np.array([[0.1, 0.2]])
    out = pol.mlp.forward(Tape(), pol._features(Tape(), Value(s), 3)).data[0]
    mu, log_std = out[0], np.clip(out[1], *LOG_STD_RANGE)
    for eps in (-1.3, 0.0, 2.1):
        a, logp = pol.act(Tape(), Value(s), 3, eps)
        u = mu + math.exp(log_std) * eps
        gauss = -0.5 * eps**2 - log_std - 0.5 * math.log(2 * math.pi)
        expected = gauss - math.log(pol.half[0] * (1 - math.tanh(u) ** 2))
        assert logp.data[0] == pytest.approx(expected, rel=1e-10)
        assert a.data[0, 0] == pytest.approx(pol.mid[0] + pol.half[0] * math.tanh(u))


def test_log_prob_is_a_density():
    # integrate the 1-D action density numerically over the action interval
    pol = _policy(low=(0.0,), high=(1.0,))
    s = Value(np.array([[0.5, 0.5]]))
    eps = np.linspace(-8, 8, 4001)
    a, logp = pol.act(Tape(), Value(np.repeat(s.data, eps.size, axis=0)), 1, eps[:, None])
    order = np.argsort(a.data[:, 0])
    mass = np.trapezoid(np.exp(logp.data[order]), a.data[order, 0])
    assert mass == pytest.approx(1.0, abs=1e-3)


def test_mean_action_and_noise_broadcast():
    pol = _policy(low=(-1.0, 0.0), high=(1.0, 3.0))
    s = np.zeros((4, 2))
    a0, _ = pol.act(Tape(), Value(s), 1, 0.0)
    np.testing.assert_array_equal(pol.mean_action(s, 1), a0.data)
    assert a0.shape == (4, 2)


def test_invalid_bounds_and_non_finite_state():
    with pytest.raises(ValueError):
        _policy(low=(1.0,), high=(1.0,))
    with pytest.raises(FloatingPointError):
        _policy().act(Tape(), Value(np.array([[np.inf, 0.0]])), 1, 0.0)


def test_action_jacobian_matches_finite_differences():
    pol = _policy(low=(-1.0, 0.0), high=(1.0, 2.0))
    s = np.array([0.4, -0.7])
    J = action_jacobian(pol, s, 2, noise=np.array([0.3, -0.2]))
    flat = pol.get_flat()
    rng = np.random.default_rng(0)
    for i in rng.choice(flat.size, 12, replace=False):
        h = 1e-6
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        pol.set_flat(up)
        a_up = pol.act(Tape(), Value(s[None]), 2, np.array([0.3, -0.2]))[0].data[0]
        pol.set_flat(dn)
        a_dn = pol.act(Tape(), Value(s[None]), 2, np.array([0.3, -0.2]))[0].data[0]
        pol.set_flat(flat)
        np.testing.assert_allclose(J[:, i], (a_up - a_dn) / (2 * h), rtol=1e-5, atol=1e-9)


def test_objective_includes_entropy_bonus():
    env = make_env("harvest", 6)
    pol = SquashedGaussianPolicy.for_env(env, entropy_coef=0.5, rng=np.random.default_rng(0))
    noise = np.random.default_rng(1).normal(size=(5, 3, 1))
    ro = unroll(f_rnn_awm(env), pol, env, batch=3, noise=noise)
    neg_logp = -sum(lp.data for lp in ro.log_probs)
    assert policy_objective(ro, pol).data == pytest.approx(np.mean(ro.ret.data + 0.5 * neg_logp))


def test_stop_gradient_changes_the_policy_gradient():
    env = make_env("harvest", 12)
    pol = SquashedGaussianPolicy.for_env(env, rng=np.random.default_rng(2))
    grads = []
    for sg in (True, False):
        tape = Tape()
        ro = unroll(f_rnn_awm(env), pol, env, tape, stop_grad=sg)
        g = tape.param_grads(backward(tape, ro.ret.sum()), pol.parameters())
        grads.append(np.concatenate([x.ravel() for x in g]))
    assert not np.allclose(grads[0], grads[1])
