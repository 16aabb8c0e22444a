import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dmpo_lab.errors import ConfigError, ValidationError
from dmpo_lab.mdp import (
    Mdp,
    Trajectory,
    discounted_return,
    expected_final_reward,
    make_env,
    rollout,
)
from dmpo_lab.policy import TabularPolicy

from conftest import random_mdp, random_policy, single_state_mdp


def test_self_loop_rollout_has_one_trajectory():
    mdp = single_state_mdp(horizon=3)
    rep = rollout(mdp, TabularPolicy.uniform(1, 1), n=5, seed=0, gamma=0.5)
    assert all(t.steps == ((0, 0), (0, 0), (0, 0)) for t in rep.trajectories)
    assert rep.avg_return == pytest.approx(1.75, abs=1e-12)


def test_greedy_rollout_in_deterministic_mdp_is_constant():
    base = make_env("chain", {"N": 6, "slip": 0.0})
    init = np.eye(base.n_states)[0]
    mdp = Mdp(base.transition, base.reward, init, base.terminal_states, base.max_horizon)
    policy = TabularPolicy(np.random.default_rng(3).normal(size=(mdp.n_states, mdp.n_actions)))
    rep = rollout(mdp, policy, n=50, seed=1, temperature_zero=True, gamma=0.9)
    assert len({t.steps for t in rep.trajectories}) == 1
    assert rep.avg_return == discounted_return(rep.trajectories[0], mdp, 0.9)


def test_uniform_two_action_frequency():
    # Binomial(10000, 0.5) has sd 0.005, so +-0.02 is a 4-sigma band.
    mdp = single_state_mdp(n_actions=2, horizon=1)
    rep = rollout(mdp, TabularPolicy.uniform(1, 2), n=10000, seed=11)
    freq = np.mean([t.steps[0][1] == 0 for t in rep.trajectories])
    assert abs(freq - 0.5) < 0.02


def test_rollout_dimension_mismatch():
    with pytest.raises(ConfigError):
        rollout(single_state_mdp(), TabularPolicy.uniform(2, 1), n=1, seed=0)


def test_rollout_is_reproducible_and_prefix_stable():
    mdp = make_env("grid", {"width": 3, "height": 3, "slip": 0.2})
    policy = TabularPolicy.uniform(mdp.n_states, mdp.n_actions)
    a = rollout(mdp, policy, n=40, seed=5)
    b = rollout(mdp, policy, n=40, seed=5)
    c = rollout(mdp, policy, n=10, seed=5)
    dump = lambda rep: json.dumps([t.to_dict() for t in rep.trajectories])
    assert dump(a) == dump(b)
    # episode i is a function of (seed, i) only
    assert a.trajectories[:10] == c.trajectories


def test_avg_return_is_mean_of_returns(rng):
    mdp = random_mdp(rng, n_terminal=1, horizon=6)
    rep = rollout(mdp, random_policy(rng, 4, 3), n=300, seed=2, gamma=0.8)
    mean = np.mean([discounted_return(t, mdp, 0.8) for t in rep.trajectories])
    assert abs(rep.avg_return - mean) < 1e-12


def test_sampled_trajectories_are_reachable(rng):
    for env, params in [("chain", {"N": 8, "slip": 0.3}), ("shop", {"slip": 0.2}), ("grid", {"pits": [(1, 1)]})]:
        mdp = make_env(env, params)
        rep = rollout(mdp, random_policy(rng, mdp.n_states, mdp.n_actions), n=200, seed=9)
        for t in rep.trajectories:
            t.check_against(mdp)
            assert not (set(t.states.tolist()) & mdp.terminal_states)


def test_discounted_return_examples():
    mdp = single_state_mdp(reward=0.7)
    assert discounted_return(Trajectory(((0, 0),)), mdp, 0.3) == pytest.approx(0.7)
    assert discounted_return(Trajectory(((0, 0),) * 3), single_state_mdp(), 0.5) == pytest.approx(1.75)
    two = Mdp(np.ones((1, 2, 1)), [[0.2, 0.9]], [1.0], frozenset(), 2)
    assert discounted_return(Trajectory(((0, 0), (0, 1))), two, 0.9) == pytest.approx(0.2 + 0.81, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(c=st.floats(0.0, 1.0), seed=st.integers(0, 10**6), gamma=st.floats(0.0, 0.99))
def test_discounted_return_is_linear_in_reward(c, seed, gamma):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng)
    scaled = Mdp(mdp.transition, c * mdp.reward, mdp.initial_dist, mdp.terminal_states, mdp.max_horizon)
    traj = Trajectory.from_arrays(rng.integers(4, size=5).tolist(), rng.integers(3, size=5).tolist())
    assert discounted_return(traj, scaled, gamma) == pytest.approx(c * discounted_return(traj, mdp, gamma),
                                                                    rel=1e-12, abs=1e-15)


def test_mdp_invariants_are_enforced():
    P = np.ones((1, 1, 1))
    with pytest.raises(ValidationError):
        Mdp(P * 0.9, [[0.5]], [1.0], frozenset(), 1)
    with pytest.raises(ValidationError):
        Mdp(P, [[1.5]], [1.0], frozenset(), 1)
    with pytest.raises(ValidationError):
        Mdp(P, [[0.5]], [0.5], frozenset(), 1)
    with pytest.raises(ValidationError):
        Mdp(P, [[0.5]], [1.0], frozenset(), 0)


def test_mdp_is_immutable():
    mdp = single_state_mdp()
    with pytest.raises(ValueError):
        mdp.reward[0, 0] = 0.0


def test_mdp_json_round_trip():
    mdp = make_env("shop", {"depth": 2, "branching": 2, "slip": 0.1})
    back = Mdp.from_json(mdp.to_json())
    assert np.array_equal(back.transition, mdp.transition)
    assert np.array_equal(back.reward, mdp.reward)
    assert back.terminal_states == mdp.terminal_states
    assert back.max_horizon == mdp.max_horizon
    d = json.loads(mdp.to_json())
    assert {"n_states", "n_actions", "transition", "reward", "initial_dist", "terminal_states",
            "max_horizon"} <= set(d)


def test_chain_degenerate_case():
    mdp = make_env("chain", {"N": 2, "slip": 0.0})
    assert (mdp.n_states, mdp.n_actions) == (2, 3)
    assert mdp.is_deterministic()
    assert mdp.terminal_states == {1}
    # the advancing action at m_0 reaches the goal in one step
    assert mdp.reward[0].max() == 1.0


def test_chain_with_slip_is_row_stochastic():
    mdp = make_env("chain", {"N": 10, "slip": 0.1})
    assert np.allclose(mdp.transition.sum(axis=2), 1.0, atol=1e-12, rtol=0)
    assert not mdp.is_deterministic()


def test_shop_state_count_matches_tree_size():
    depth, b = 3, 3
    mdp = make_env("shop", {"depth": depth, "branching": b})
    tree = sum(b**k for k in range(depth + 1))
    assert tree == 1 + 3 + 9 + 27
    assert mdp.n_states == tree + b ** (depth + 1)
    assert len(mdp.terminal_states) == b ** (depth + 1)
    scores = mdp.terminal_reward[sorted(mdp.terminal_states)]
    assert scores.max() == 1.0 and scores.min() >= 0.0


def test_grid_goal_and_pits():
    mdp = make_env("grid", {"width": 3, "height": 2, "slip": 0.0, "pits": [(0, 2)]})
    assert mdp.terminal_states == {5, 2}
    assert mdp.terminal_reward[5] == 1.0 and mdp.terminal_reward[2] == 0.0


def test_make_env_errors():
    with pytest.raises(ConfigError):
        make_env("webshop")
    with pytest.raises(ValidationError):
        make_env("chain", {"slip": 1.5})
    with pytest.raises(ConfigError):
        make_env("chain", {"bogus": 1})


def test_expected_final_reward_matches_rollout_mean():
    mdp = make_env("chain", {"N": 6, "slip": 0.2})
    policy = random_policy(np.random.default_rng(0), mdp.n_states, mdp.n_actions)
    exact = expected_final_reward(mdp, policy, temperature_zero=False)
    est = rollout(mdp, policy, n=40000, seed=4).avg_final_reward
    # sd of a mean of 40000 Bernoulli draws is at most 0.0025
    assert abs(exact - est) < 0.0125
