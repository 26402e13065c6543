from __future__ import annotations

import math

import numpy as np
import pytest

from protorep.agents import (
    AgentSpec,
    BonusConfig,
    ShapingConfig,
    count_bonus,
    epsilon_greedy,
    greedy_rollout,
    q_learning_update,
    q_value_iteration,
    run_control_loop,
    sarsa_update,
    shaping_reward,
)
from protorep.mdp import TransitionSample, chain_mdp, make_environment, parse_grid_map
from protorep.representations import EigenSummary

from oracles import optimal_q_vi


def test_epsilon_greedy_examples():
    rng = np.random.default_rng(0)
    assert all(epsilon_greedy([0.0, 3.0, 1.0], 0.0, rng) == 1 for _ in range(100))
    assert epsilon_greedy([2.0, 2.0, 2.0], 0.0, rng) == 0
    with pytest.raises(ValueError):
        epsilon_greedy([], 0.1, rng)
    with pytest.raises(ValueError):
        epsilon_greedy([1.0], 1.5, rng)


def test_epsilon_one_is_uniform():
    rng = np.random.default_rng(1)
    n, k = 100_000, 4
    draws = np.bincount([epsilon_greedy([0.0, 5.0, 1.0, 2.0], 1.0, rng) for _ in range(n)], minlength=k)
    p = 1 / k
    sigma = math.sqrt(n * p * (1 - p))
    assert np.all(np.abs(draws - n * p) <= 3 * sigma)


def test_q_learning_done_target_is_reward():
    q = np.array([[1.0, 1.0], [50.0, 50.0]])
    q_learning_update(q, TransitionSample(0, 0, -2.0, 1, True), 1.0, 0.9)
    assert q[0, 0] == -2.0
    q_learning_update(q, TransitionSample(0, 1, -2.0, 1, False), 1.0, 0.9)
    assert q[0, 1] == pytest.approx(-2.0 + 0.9 * 50.0)


def test_q_learning_backward_sweeps_on_chain():
    m = chain_mdp([-1.0, -1.0, -1.0, -1.0, 0.0])
    q = np.zeros((5, 1))
    # |S| backward sweeps with alpha = 1 reach the optimal values
    for _ in range(m.n_states):
        for s in range(3, -1, -1):
            q_learning_update(q, TransitionSample(s, 0, -1.0, s + 1, s + 1 == 4), 1.0, 1.0)
    oracle = optimal_q_vi(m.transition, m.reward_state, m.terminal, gamma=1.0)
    # the update leaves the terminal arrival reward (0 here) out of the target
    assert np.allclose(q[:4], oracle[:4], atol=1e-12)


def test_q_learning_fixed_point_is_optimal_q():
    m = parse_grid_map("S..\n.L.\n..G")
    oracle = optimal_q_vi(m.transition, m.reward_state, m.terminal, gamma=0.9)
    q = np.zeros((m.n_states, m.n_actions))
    samples = []
    for s in np.flatnonzero(~m.terminal):
        for a in range(m.n_actions):
            s2 = int(np.argmax(m.transition[s, a]))
            samples.append(TransitionSample(int(s), a, m.reward_state[s], s2, bool(m.terminal[s2])))
    for _ in range(500):
        for t in samples:
            r_term = m.reward_state[t.s_next] if t.done else 0.0
            q_learning_update(q, t, 0.5, 0.9, terminal_reward=r_term)
    nt = ~m.terminal
    assert np.allclose(q[nt], oracle[nt], atol=1e-6)
    assert np.allclose(q_value_iteration(m, gamma=0.9)[nt], oracle[nt], atol=1e-8)


def test_sarsa_examples():
    q = np.array([[0.0, 0.0], [4.0, 7.0]])
    sarsa_update(q, 0, 0, -1.0, 1, 0, True, 1.0, 0.9)
    assert q[0, 0] == -1.0
    sarsa_update(q, 0, 1, -1.0, 1, 0, False, 0.5, 0.9)
    assert q[0, 1] == pytest.approx(0.5 * (-1.0 + 0.9 * 4.0))
    # greedy next action: Sarsa and Q-learning agree
    q1, q2 = q.copy(), q.copy()
    sarsa_update(q1, 0, 0, -1.0, 1, int(np.argmax(q[1])), False, 0.3, 0.9)
    q_learning_update(q2, TransitionSample(0, 0, -1.0, 1, False), 0.3, 0.9)
    assert np.array_equal(q1, q2)


def test_sarsa_expected_update_zero_at_policy_q():
    # Q of the epsilon-greedy policy, by linear policy evaluation, is a fixed point
    m = parse_grid_map("S.\n.G")
    eps, gamma = 0.2, 0.9
    n_s, n_a = m.n_states, m.n_actions
    r = m.reward_state
    rng = np.random.default_rng(0)
    q = rng.normal(0, 1, (n_s, n_a))
    for _ in range(200):
        pi = np.full((n_s, n_a), eps / n_a)
        pi[np.arange(n_s), np.argmax(q, axis=1)] += 1 - eps
        # solve Q = r + gamma P (terminal reward or pi-weighted Q)
        idx = lambda s, a: s * n_a + a  # noqa: E731
        a_mat = np.eye(n_s * n_a)
        b = np.zeros(n_s * n_a)
        for s in range(n_s):
            for a in range(n_a):
                b[idx(s, a)] = r[s]
                for s2 in range(n_s):
                    p = m.transition[s, a, s2]
                    if not p or m.terminal[s]:
                        continue
                    if m.terminal[s2]:
                        b[idx(s, a)] += gamma * p * r[s2]
                    else:
                        for a2 in range(n_a):
                            a_mat[idx(s, a), idx(s2, a2)] -= gamma * p * pi[s2, a2]
        q_new = np.linalg.solve(a_mat, b).reshape(n_s, n_a)
        if np.array_equal(np.argmax(q_new, axis=1), np.argmax(q, axis=1)):
            q = q_new
            break
        q = q_new
    pi = np.full((n_s, n_a), eps / n_a)
    pi[np.arange(n_s), np.argmax(q, axis=1)] += 1 - eps
    for s in np.flatnonzero(~m.terminal):
        for a in range(n_a):
            expected = 0.0
            for s2 in range(n_s):
                p = m.transition[s, a, s2]
                if not p:
                    continue
                done = bool(m.terminal[s2])
                for a2 in range(n_a):
                    w = p * (1.0 if done else pi[s2, a2])
                    qq = q.copy()
                    sarsa_update(qq, s, a, r[s], s2, a2, done, 1.0, gamma, terminal_reward=r[s2] if done else 0.0)
                    expected += w * (qq[s, a] - q[s, a])
                    if done:
                        break
            assert abs(expected) <= 1e-12


def eig(values):
    v = np.asarray(values, dtype=float)
    return EigenSummary(1.0, v, False, np.ones(len(v), dtype=bool))


def test_shaping_examples():
    none = ShapingConfig("none")
    assert shaping_reward(none, 0, 1, -3.0) == -3.0
    cfg = ShapingConfig("dr_pot", eig([1.0, 2.0]), beta=1.0, gamma=0.99)
    assert shaping_reward(cfg, 0, 1, -1.0) == pytest.approx(0.98, abs=1e-15)
    prior = ShapingConfig("sr_prior", eig([0.3, 0.7, 0.7]), beta=1.0, goal_state=2)
    assert shaping_reward(prior, 0, 1, -1.0) == 0.0
    half = ShapingConfig("sr_pot", eig([1.0, 2.0]), beta=0.5, gamma=0.5)
    assert shaping_reward(half, 0, 1, -1.0) == pytest.approx(0.5 * -1.0 + 0.5 * 0.0)


def test_shaping_missing_entry_is_an_error():
    e = EigenSummary(1.0, np.array([1.0, 0.0]), True, np.array([True, False]))
    cfg = ShapingConfig("dr_pot", e, beta=1.0)
    with pytest.raises(KeyError):
        shaping_reward(cfg, 0, 1, -1.0)
    with pytest.raises(KeyError):
        shaping_reward(ShapingConfig("dr_pot", eig([1.0]), beta=1.0), 0, 3, -1.0)
    with pytest.raises(ValueError):
        ShapingConfig("dr_pot", None, beta=0.5)
    with pytest.raises(ValueError):
        ShapingConfig("none", beta=1.5)


def test_count_bonus_examples():
    assert count_bonus(np.eye(4)[2], 100.0) == 0.0
    row = np.array([math.e, 0.0, 0.0])
    assert count_bonus(row, 100.0) == pytest.approx(100.0, abs=1e-12)
    with pytest.raises(ValueError):
        count_bonus(np.zeros(3), 1.0)


def test_control_loop_optimal_init_on_c3():
    m = chain_mdp([-1.0, -1.0, 0.0])
    q0 = optimal_q_vi(m.transition, m.reward_state, m.terminal)
    res = run_control_loop(m, AgentSpec(epsilon=0.0), episodes=5, seed=0, q_table=q0)
    assert res.returns == [-2.0] * 5


def test_control_loop_determinism_and_refusal():
    m = make_environment("grid_task")
    spec = AgentSpec(alpha=0.3)
    cfg = ShapingConfig("none")
    a = run_control_loop(m, spec, shaping=cfg, episodes=20, seed=11)
    b = run_control_loop(m, spec, shaping=cfg, episodes=20, seed=11)
    assert a.returns == b.returns and np.array_equal(a.q, b.q)
    shaped = ShapingConfig("dr_pot", eig(np.ones(m.n_states)), beta=0.5)
    with pytest.raises(ValueError):
        run_control_loop(m, spec, shaping=shaped, bonus=BonusConfig(), episodes=1)
    with pytest.raises(ValueError):
        run_control_loop(m, spec, episodes=1, steps=10)


def test_returns_use_environment_reward():
    m = chain_mdp([-1.0, -1.0, 0.0])
    shaped = ShapingConfig("dr_pot", eig([100.0, -50.0, 3.0]), beta=1.0)
    res = run_control_loop(m, AgentSpec(epsilon=0.0), shaping=shaped, episodes=3, seed=0)
    assert res.returns == [-2.0] * 3
    res = run_control_loop(make_environment("riverswim"), AgentSpec("sarsa", epsilon=0.01),
                           bonus=BonusConfig(beta=1e6), steps=300, seed=0)
    # bonus rewards are huge; environment rewards on RiverSwim are at most 10000 per step
    assert res.total_reward <= 300 * 10_000


def test_unvisited_pair_bonus_is_zero():
    assert count_bonus(np.eye(12)[5], 37.0) == 0.0


def test_no_shaping_reaches_goal_on_four_rooms():
    m = make_environment("four_rooms")
    res = run_control_loop(m, AgentSpec(alpha=0.3), episodes=150, seed=0)
    assert np.mean(res.returns[-10:]) > -500


def test_potential_shaping_preserves_greedy_policy():
    m = parse_grid_map("S.L\n...\nL.G")
    gamma = 0.9
    e = np.random.default_rng(3).normal(0, 2, m.n_states)
    # the convex mix with beta = 1 drops the environment reward entirely, so the
    # check uses beta = 0.5: (r + F) / 2 has the same greedy policy as r
    cfg = ShapingConfig("dr_pot", eig(e), beta=0.5, gamma=gamma, zero_terminal_potential=True)
    samples = []
    for s in np.flatnonzero(~m.terminal):
        for a in range(m.n_actions):
            s2 = int(np.argmax(m.transition[s, a]))
            samples.append(TransitionSample(int(s), a, m.reward_state[s], s2, bool(m.terminal[s2])))

    def converge(shaped: bool):
        q = np.zeros((m.n_states, m.n_actions))
        for _ in range(800):
            for t in samples:
                r_term = m.reward_state[t.s_next] if t.done else 0.0
                if shaped:
                    r = shaping_reward(cfg, t.s, t.s_next, t.r, t.done)
                    r_term = 0.5 * r_term
                else:
                    r = t.r
                q_learning_update(q, t, 1.0, gamma, r_term, reward=r)
        return q

    plain, shaped = converge(False), converge(True)
    nt = ~m.terminal
    assert np.array_equal(np.argmax(plain[nt], axis=1), np.argmax(shaped[nt], axis=1))
    assert np.allclose(shaped[nt], 0.5 * (plain[nt] - e[nt, None]), atol=1e-8)


def test_greedy_rollout_cap():
    m = parse_grid_map("S.G")
    # a policy that always moves left never finishes
    q = np.zeros((3, 4))
    q[:, 2] = 1
    assert greedy_rollout(m, q, max_steps=7) == -7.0
    q = np.zeros((3, 4))
    q[:, 3] = 1
    assert greedy_rollout(m, q) == -2.0
