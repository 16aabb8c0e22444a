import numpy as np
import pytest

from dmpo_lab.datagen import PreferencePair
from dmpo_lab.mdp import Mdp, Trajectory
from dmpo_lab.policy import TabularPolicy


def single_state_mdp(n_actions=1, reward=1.0, horizon=3):
    P = np.ones((1, n_actions, 1))
    r = np.full((1, n_actions), reward)
    return Mdp(P, r, [1.0], frozenset(), horizon)


def two_state_chain(horizon=2):
    """s0 -> s1 deterministically, s1 absorbing (not terminal), one action."""
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = 1.0
    P[1, 0, 1] = 1.0
    return Mdp(P, np.array([[0.2], [0.9]]), [1.0, 0.0], frozenset(), horizon)


def random_mdp(rng, n_states=4, n_actions=3, horizon=5, n_terminal=0):
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    r = rng.uniform(0, 1, size=(n_states, n_actions))
    terminals = frozenset(range(n_states - n_terminal, n_states))
    p0 = rng.dirichlet(np.ones(n_states - n_terminal))
    p0 = np.concatenate([p0, np.zeros(n_terminal)])
    return Mdp(P, r, p0, terminals, horizon)


def random_policy(rng, n_states, n_actions, scale=1.0, frozen=False):
    return TabularPolicy(rng.normal(scale=scale, size=(n_states, n_actions)), frozen=frozen)


def random_traj(rng, n_states, n_actions, T, s0=None):
    s = rng.integers(n_states, size=T)
    if s0 is not None:
        s[0] = s0
    return Trajectory.from_arrays(s.tolist(), rng.integers(n_actions, size=T).tolist())


def random_pair(rng, n_states, n_actions, max_T=5):
    Tw, Tl = rng.integers(1, max_T + 1, size=2)
    win = random_traj(rng, n_states, n_actions, Tw)
    lose = random_traj(rng, n_states, n_actions, Tl, s0=win.initial_state)
    return PreferencePair(win, lose)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is not None and module.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(module.LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
