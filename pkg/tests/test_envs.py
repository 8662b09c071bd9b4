import csv
import math

import numpy as np
import pytest

from bpolab.autodiff import Tape, Value, backward
from bpolab.envs import (
    REGISTRY,
    DoublePendulum,
    DynamicsError,
    LinearSystem,
    make_env,
    normalized_return,
    random_baseline,
    set_reference_returns,
    simulate,
    trajopt_oracle,
    write_trajectory_csv,
)


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_rollout_shapes_and_finiteness(name):
    env = make_env(name, 24)
    acts = env.sample_actions(np.random.default_rng(0), (3, 23))
    assert np.all((acts >= env.low) & (acts <= env.high))
    states, rewards = simulate(env, acts)
    assert states.shape == (3, 24, env.state_dim)
    assert rewards.shape == (3, 24)
    assert np.all(np.isfinite(states)) and np.all(np.isfinite(rewards))
    np.testing.assert_array_equal(states[:, 0], np.tile(env.s1, (3, 1)))


def test_unknown_env_and_bad_horizon():
    with pytest.raises(ValueError, match="unknown environment"):
        make_env("cartpole", 10)
    with pytest.raises(ValueError):
        make_env("harvest", 0)
    with pytest.raises(ValueError, match="shape"):
        simulate(make_env("harvest", 5), np.zeros((1, 5, 1)))


def test_harvest_euler_step_by_hand():
    env = make_env("harvest", 10)  # dt = 1
    s, a = Value(np.array([[0.5]])), Value(np.array([[0.2]]))
    # 0.5 + 1 * (0.5 * 0.5 - 0.2 * 0.5)
    assert env.step(s, a, 1).data[0, 0] == pytest.approx(0.65)
    assert env.reward(s, a, 1).data[0] == pytest.approx(0.1)
    assert env.reward(s, None, 10).data[0] == 0.0


def test_cancer_step_by_hand():
    env = make_env("cancer", 20)  # dt = 1
    x, u = 0.5, 1.0
    expected = x + 0.3 * x * math.log(1 / x) - 0.45 * u * x
    assert env.step(Value(np.array([[x]])), Value(np.array([[u]])), 1).data[0, 0] == pytest.approx(expected)
    assert env.reward(Value(np.array([[x]])), Value(np.array([[u]])), 1).data[0] == pytest.approx(-(x + u * u))


def test_cancer_rejects_coarse_steps():
    with pytest.raises(ValueError, match="H >= 19"):
        make_env("cancer", 18)
    make_env("cancer", 19)


def test_bacteria_terminal_reward():
    env = make_env("bacteria", 4)
    assert env.reward(Value(np.array([[3.0]])), None, 4).data[0] == 3.0


def test_one_bounce_reflects_and_uses_only_first_action():
    env = make_env("one_bounce", 10)  # dt = 0.1
    acts = np.zeros((2, 9, 1))
    acts[0, 0] = -0.5  # never reaches the wall: x_H = 1 - 0.5 * 0.9
    acts[1, 0] = -3.0
    acts[:, 1:] = -1.0  # ignored
    states, rewards = simulate(env, acts)
    assert states[0, -1, 0] == pytest.approx(0.55)
    # 1 - 3 * 0.9 = -1.7 before reflection
    assert states[1, -1, 0] == pytest.approx(1.7)
    assert states[1, -1, 1] == pytest.approx(3.0)
    assert rewards[0, :-1].tolist() == [0.0] * 9
    assert rewards[0, -1] == pytest.approx(-(0.05**2))


def test_one_bounce_gradient_flips_sign_after_bounce():
    env = make_env("one_bounce", 10)
    out = []
    for a1 in (-0.5, -3.0):
        tape = Tape()
        a = tape.leaf(np.array([[a1]]))
        s = env.initial_state(1)
        for t in range(1, 10):
            s = env.step(s, a if t == 1 else Value(np.zeros((1, 1))), t)
        out.append(backward(tape, s[:, 0].sum()).wrt(a)[0, 0])
    assert out[0] == pytest.approx(0.9)
    assert out[1] == pytest.approx(-0.9)


def test_double_pendulum_conserves_energy():
    env = DoublePendulum(100)
    acts = env.sample_actions(np.random.default_rng(3), (5, 99))
    states, _ = simulate(env, acts, rewards=False)
    e = env.energy(states[:, 1:])
    drift = np.abs(e - e[:, :1]).max() / np.abs(e[:, :1]).max()
    assert drift < 5e-3


def test_double_pendulum_goal_and_state_only_reward():
    env = DoublePendulum(20)
    acts = np.full((1, 19, 1), env.goal_action)
    _, r = simulate(env, acts)
    assert r[0, -1] == pytest.approx(0.0, abs=1e-20)
    assert env.state_only_reward and not make_env("harvest", 5).state_only_reward


def test_double_pendulum_frozen_sensitivity():
    from bpolab.analysis import grad_norm_sweep

    res = grad_norm_sweep({"true": "true"}, make_env("double_pendulum", 100), (5, 10, 20, 50, 100))
    frozen = [1.68696713e01, 4.55670757e01, 8.80040439e01, 1.05033272e03, 3.62445491e05]
    np.testing.assert_allclose(res.outputs["true"], frozen, rtol=1e-6)


def test_double_pendulum_raises_on_blowup():
    env = DoublePendulum(3)
    with pytest.raises(DynamicsError):
        env.step(Value(np.array([[np.nan, 0.0, 0.0, 0.0]])), Value(np.zeros((1, 1))), 2)


def test_linear_quadratic_oracle_matches_riccati():
    env = LinearSystem(6)
    # backward Riccati for x' = x + u, cost x^2 + u^2 per step and x_H^2 at the end
    P = 1.0
    for _ in range(env.horizon - 1):
        P = 1.0 + P - P * P / (1.0 + P)
    _, j = trajopt_oracle(env, iters=2000, lr=0.05)
    assert j == pytest.approx(-P * env.s1[0] ** 2, rel=1e-4)


def test_oracle_beats_random_on_harvest_frozen():
    env = make_env("harvest", 20)
    j_rand = random_baseline(env)
    _, j_star = trajopt_oracle(env)
    assert j_rand == pytest.approx(2.305361827867263, rel=1e-9)
    assert j_star == pytest.approx(2.5944078521922243, rel=1e-6)
    assert j_star > j_rand


def test_normalized_return():
    env = make_env("harvest", 7)
    set_reference_returns(env, 1.0, 3.0)
    assert normalized_return(env, 2.0) == 0.5
    np.testing.assert_allclose(normalized_return(env, np.array([1.0, 3.0])), [0.0, 1.0])
    with pytest.raises(ValueError):
        normalized_return(env, 1.0, (2.0, 2.0))


def test_trajectory_csv(tmp_path):
    env = make_env("double_pendulum", 4)
    acts = np.zeros((1, 3, 1))
    states, rewards = simulate(env, acts)
    path = write_trajectory_csv(tmp_path / "tr.csv", states[0], acts[0], rewards[0])
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["t", "s0", "s1", "s2", "s3", "a0", "r"]
    assert len(rows) == 5 and rows[-1][5] == ""
    assert float(rows[2][1]) == states[0, 1, 0]
