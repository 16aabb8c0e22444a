"""Finite MDPs, trajectories, seeded rollouts and the built-in toy environments."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

from dmpo_lab.errors import ConfigError, ValidationError

if TYPE_CHECKING:
    from dmpo_lab.policy import TabularPolicy

PROB_TOL = 1e-12
DEFAULT_GAMMA = 0.99


def _frozen(x, dtype=np.float64) -> np.ndarray:
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Mdp:
    """Tabular MDP with transition[s, a, s'], reward[s, a] and a horizon cap.

    Entering a state in ``terminal_states`` ends the episode. ``terminal_reward``
    is the task score credited on entry (e.g. the graded product score in
    ``shop``); it feeds ``avg_final_reward`` only. The reward table used by
    returns and occupancy measures is ``reward``.
    """

    transition: np.ndarray
    reward: np.ndarray
    initial_dist: np.ndarray
    terminal_states: frozenset = frozenset()
    max_horizon: int = 1
    terminal_reward: np.ndarray | None = None
    name: str = "custom"

    def __post_init__(self):
        P = _frozen(self.transition)
        r = _frozen(self.reward)
        p0 = _frozen(self.initial_dist)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "initial_dist", p0)
        object.__setattr__(self, "terminal_states", frozenset(int(s) for s in self.terminal_states))
        if self.terminal_reward is not None:
            object.__setattr__(self, "terminal_reward", _frozen(self.terminal_reward))
        self._validate()

    def _validate(self):
        P, r, p0 = self.transition, self.reward, self.initial_dist
        if P.ndim != 3 or P.shape[0] != P.shape[2] or P.shape[0] < 1 or P.shape[1] < 1:
            raise ValidationError(f"transition must have shape (S, A, S), got {P.shape}")
        S, A = P.shape[:2]
        if r.shape != (S, A):
            raise ValidationError(f"reward must have shape {(S, A)}, got {r.shape}")
        if p0.shape != (S,):
            raise ValidationError(f"initial_dist must have shape {(S,)}, got {p0.shape}")
        if not (np.all(np.isfinite(P)) and np.all(P >= 0)):
            raise ValidationError("transition entries must be finite and nonnegative")
        if np.max(np.abs(P.sum(axis=2) - 1.0)) > PROB_TOL:
            raise ValidationError("every transition row must sum to 1 within 1e-12")
        if np.any(p0 < 0) or abs(p0.sum() - 1.0) > PROB_TOL:
            raise ValidationError("initial_dist must be a distribution within 1e-12")
        if not np.all(np.isfinite(r)) or np.any(r < 0) or np.any(r > 1):
            raise ValidationError("rewards must lie in [0, 1]")
        if int(self.max_horizon) < 1:
            raise ValidationError("max_horizon must be >= 1")
        object.__setattr__(self, "max_horizon", int(self.max_horizon))
        for s in self.terminal_states:
            if not 0 <= s < S:
                raise ValidationError(f"terminal state {s} out of range")
            if p0[s] > 0:
                raise ValidationError(f"initial_dist puts mass on terminal state {s}")
        if self.terminal_reward is not None and self.terminal_reward.shape != (S,):
            raise ValidationError(f"terminal_reward must have shape {(S,)}")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def terminal_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_states, dtype=bool)
        mask[list(self.terminal_states)] = True
        return mask

    def is_deterministic(self) -> bool:
        return bool(np.all((self.transition == 0) | (self.transition == 1)))

    def to_dict(self) -> dict:
        d = {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "initial_dist": self.initial_dist.tolist(),
            "terminal_states": sorted(self.terminal_states),
            "max_horizon": self.max_horizon,
            "name": self.name,
        }
        if self.terminal_reward is not None:
            d["terminal_reward"] = self.terminal_reward.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Mdp:
        mdp = cls(
            transition=d["transition"],
            reward=d["reward"],
            initial_dist=d["initial_dist"],
            terminal_states=frozenset(d.get("terminal_states", ())),
            max_horizon=d["max_horizon"],
            terminal_reward=d.get("terminal_reward"),
            name=d.get("name", "custom"),
        )
        if (mdp.n_states, mdp.n_actions) != (d["n_states"], d["n_actions"]):
            raise ValidationError("n_states/n_actions disagree with the transition tensor")
        return mdp

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> Mdp:
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Trajectory:
    """Ordered (state, action) steps; ``length`` is the realized T."""

    steps: tuple

    def __post_init__(self):
        steps = tuple((int(s), int(a)) for s, a in self.steps)
        if not steps:
            raise ValidationError("a trajectory needs at least one step")
        object.__setattr__(self, "steps", steps)

    @classmethod
    def from_arrays(cls, states: Sequence[int], actions: Sequence[int]) -> Trajectory:
        if len(states) != len(actions):
            raise ValidationError("states and actions must have equal length")
        return cls(tuple(zip(states, actions)))

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def states(self) -> np.ndarray:
        return np.array([s for s, _ in self.steps], dtype=np.int64)

    @property
    def actions(self) -> np.ndarray:
        return np.array([a for _, a in self.steps], dtype=np.int64)

    @property
    def initial_state(self) -> int:
        return self.steps[0][0]

    def to_dict(self) -> dict:
        return {"states": [s for s, _ in self.steps], "actions": [a for _, a in self.steps]}

    @classmethod
    def from_dict(cls, d: dict) -> Trajectory:
        return cls.from_arrays(d["states"], d["actions"])

    def check_against(self, mdp: Mdp) -> None:
        """Raise unless every index is in range, T <= max_horizon and each step is reachable."""
        s, a = self.states, self.actions
        if s.min() < 0 or s.max() >= mdp.n_states or a.min() < 0 or a.max() >= mdp.n_actions:
            raise ConfigError("trajectory indices do not fit the MDP")
        if self.length > mdp.max_horizon:
            raise ValidationError(f"trajectory length {self.length} exceeds max_horizon {mdp.max_horizon}")
        if self.length > 1 and np.any(mdp.transition[s[:-1], a[:-1], s[1:]] <= 0):
            raise ValidationError("trajectory contains an unreachable transition")


@dataclass(frozen=True)
class RolloutReport:
    trajectories: list
    avg_return: float
    avg_final_reward: float
    returns: np.ndarray = field(repr=False)
    final_rewards: np.ndarray = field(repr=False)
    end_states: np.ndarray = field(repr=False)


def discounted_return(traj: Trajectory, mdp: Mdp, gamma: float) -> float:
    """sum_t gamma^t r(s_t, a_t)."""
    if not 0.0 <= gamma < 1.0:
        raise ValidationError("gamma must lie in [0, 1)")
    s, a = traj.states, traj.actions
    if s.max() >= mdp.n_states or a.max() >= mdp.n_actions:
        raise ConfigError("trajectory indices do not fit the MDP")
    return float(np.sum(gamma ** np.arange(traj.length) * mdp.reward[s, a]))


# -- simulation ---------------------------------------------------------------

def _cdf(p: np.ndarray) -> np.ndarray:
    # exact 1.0 in the last slot keeps inverse-CDF lookups off zero-probability entries
    c = np.cumsum(p, axis=-1)
    return c / c[..., -1:]


def _inverse_cdf(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    return (cdf_rows <= u[:, None]).sum(axis=1)


# chooser(states, prev_actions, t, uniforms) -> actions; uniforms has shape (n, k)
Chooser = Callable[[np.ndarray, np.ndarray, int, np.ndarray], np.ndarray]


def simulate(
    mdp: Mdp,
    choose: Chooser,
    n: int,
    rng: np.random.Generator,
    *,
    uniforms_per_step: int = 3,
    init_states: np.ndarray | int | None = None,
    horizon: int | None = None,
):
    """Vectorized episode sampler.

    Randomness is drawn as one row of a fixed-width matrix per episode, so
    episode i depends only on the generator state and i, never on n.
    Returns (states, actions, lengths, end_states) with states/actions padded
    by -1 past each episode's end.
    """
    H = mdp.max_horizon if horizon is None else int(horizon)
    k = uniforms_per_step
    width = 1 + H * (k + 1)
    U = rng.random((n, width))
    term = mdp.terminal_mask
    if init_states is None:
        s = np.minimum(_inverse_cdf(np.broadcast_to(_cdf(mdp.initial_dist), (n, mdp.n_states)), U[:, 0]),
                       mdp.n_states - 1)
    else:
        s = np.broadcast_to(np.asarray(init_states, dtype=np.int64), (n,)).copy()
    P_cdf = _cdf(mdp.transition)
    states = np.full((n, H), -1, dtype=np.int64)
    actions = np.full((n, H), -1, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    lengths = np.zeros(n, dtype=np.int64)
    prev = np.full(n, -1, dtype=np.int64)
    for t in range(H):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        base = 1 + t * (k + 1)
        st = s[idx]
        at = np.asarray(choose(st, prev[idx], t, U[idx, base:base + k]), dtype=np.int64)
        states[idx, t] = st
        actions[idx, t] = at
        lengths[idx] += 1
        prev[idx] = at
        nxt = _inverse_cdf(P_cdf[st, at], U[idx, base + k])
        s[idx] = nxt
        alive[idx[term[nxt]]] = False
    return states, actions, lengths, s


def policy_chooser(policy: TabularPolicy, temperature_zero: bool) -> Chooser:
    if temperature_zero:
        greedy = np.argmax(policy.logits, axis=1)
        return lambda s, prev, t, u: greedy[s]
    cdf = _cdf(policy.probs())
    return lambda s, prev, t, u: _inverse_cdf(cdf[s], u[:, 0])


def trajectories_from_arrays(states, actions, lengths) -> list:
    return [Trajectory(tuple(zip(states[i, :L].tolist(), actions[i, :L].tolist())))
            for i, L in enumerate(lengths.tolist())]


def summarize(mdp: Mdp, states, actions, lengths, end_states, gamma: float) -> RolloutReport:
    n, H = states.shape
    valid = states >= 0
    r = np.where(valid, mdp.reward[np.maximum(states, 0), np.maximum(actions, 0)], 0.0)
    returns = (r * gamma ** np.arange(H)).sum(axis=1)
    terminated = mdp.terminal_mask[end_states] & (lengths > 0)
    if mdp.terminal_reward is not None:
        final = np.where(terminated, mdp.terminal_reward[end_states], 0.0)
    else:
        final = r[np.arange(n), lengths - 1]
    return RolloutReport(
        trajectories=trajectories_from_arrays(states, actions, lengths),
        avg_return=float(np.mean(returns)),
        avg_final_reward=float(np.mean(final)),
        returns=returns,
        final_rewards=final,
        end_states=end_states,
    )


def expected_final_reward(mdp: Mdp, policy: TabularPolicy, temperature_zero: bool = True) -> float:
    """Exact expectation of the per-episode final reward that rollouts average."""
    check_dims(mdp, policy)
    if temperature_zero:
        pi = np.zeros((mdp.n_states, mdp.n_actions))
        pi[np.arange(mdp.n_states), np.argmax(policy.logits, axis=1)] = 1.0
    else:
        pi = policy.probs()
    term = mdp.terminal_mask
    H = mdp.max_horizon
    alive = mdp.initial_dist.copy()
    total = 0.0
    for t in range(H):
        p_sa = alive[:, None] * pi
        if mdp.terminal_reward is not None:
            total += float(np.einsum("sa,sak,k->", p_sa, mdp.transition, mdp.terminal_reward * term))
        else:
            p_end = mdp.transition[:, :, term].sum(axis=2) if t < H - 1 else np.ones_like(p_sa)
            total += float(np.sum(p_sa * p_end * mdp.reward))
        alive = np.einsum("sa,sak->k", p_sa, mdp.transition) * ~term
    return total


def check_dims(mdp: Mdp, policy: TabularPolicy) -> None:
    if policy.logits.shape != (mdp.n_states, mdp.n_actions):
        raise ConfigError(
            f"policy shape {policy.logits.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})"
        )


def rollout(
    mdp: Mdp,
    policy: TabularPolicy,
    n: int,
    seed: int,
    temperature_zero: bool = False,
    *,
    gamma: float = DEFAULT_GAMMA,
) -> RolloutReport:
    """Sample n episodes; temperature_zero takes argmax actions (lowest index on ties)."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    if not 0.0 <= gamma < 1.0:
        raise ValidationError("gamma must lie in [0, 1)")
    check_dims(mdp, policy)
    rng = np.random.default_rng(seed)
    out = simulate(mdp, policy_chooser(policy, temperature_zero), n, rng)
    return summarize(mdp, *out, gamma=gamma)


# -- built-in environments ----------------------------------------------------

def _expected_reward(P: np.ndarray, terminal_reward: np.ndarray) -> np.ndarray:
    return P @ terminal_reward


def chain(N: int = 10, slip: float = 0.1, n_actions: int = 3, max_horizon: int | None = None,
          dense: bool = True, pockets: int = 6) -> Mdp:
    """Linear chain m_0 .. m_{N-1}; m_{N-1} is the terminal goal (task reward 1).

    At m_s one action advances (which one varies with s); every other action
    wastes the turn. Any move at m_s slips with probability ``slip`` into one
    of ``pockets`` side states d_{s,j}, chosen uniformly; these exist only
    when slip > 0 because nothing else reaches them. In d_{s,j} one action
    climbs back to m_s, one falls into a terminal pit and the rest stay put;
    which is which depends on (s, j). Episodes start uniformly on
    m_0 .. m_{N-2}. ``dense`` adds progress credit (1-slip)/(N-1) to each
    advancing move; the goal move always earns its success probability.

    States: m_s = s, d_{s,j} = N + s * pockets + j, pit = last.
    """
    if N < 2:
        raise ValidationError("chain needs N >= 2")
    if not 0.0 <= slip <= 1.0:
        raise ValidationError("slip must lie in [0, 1]")
    if n_actions < (3 if slip > 0 else 2):
        raise ValidationError("chain needs n_actions >= 2 (>= 3 with slip)")
    if pockets < 1:
        raise ValidationError("pockets must be >= 1")
    H = 2 * N if max_horizon is None else int(max_horizon)
    A = n_actions
    goal = N - 1
    n_side = (N - 1) * pockets if slip > 0 else 0
    pit = N + n_side if slip > 0 else None
    S = N + n_side + (1 if slip > 0 else 0)
    P = np.zeros((S, A, S))
    for s in range(N - 1):
        adv = advance_action(s, A)
        for a in range(A):
            P[s, a, s + 1 if a == adv else s] += 1.0 - slip
            for j in range(pockets if slip > 0 else 0):
                P[s, a, N + s * pockets + j] += slip / pockets
        for j in range(pockets if slip > 0 else 0):
            d = N + s * pockets + j
            up, fall = recovery_action(s, j, A), pit_action(s, j, A)
            for a in range(A):
                P[d, a, s if a == up else pit if a == fall else d] = 1.0
    # terminal rows are never used by rollouts; keep them stochastic
    P[goal, :, goal] = 1.0
    if pit is not None:
        P[pit, :, pit] = 1.0
    term_r = np.zeros(S)
    term_r[goal] = 1.0
    reward = _expected_reward(P, term_r)
    if dense:
        for s in range(N - 2):
            reward[s, advance_action(s, A)] += (1.0 - slip) / (N - 1)
    p0 = np.zeros(S)
    p0[: N - 1] = 1.0 / (N - 1)
    terminals = {goal} | ({pit} if pit is not None else set())
    reward[list(terminals)] = 0.0
    return Mdp(P, reward, p0, frozenset(terminals), H, term_r, name="chain")


def advance_action(s: int, n_actions: int) -> int:
    return (2 * s + 1) % n_actions


def recovery_action(s: int, j: int, n_actions: int) -> int:
    return (s + j + 2) % n_actions


def pit_action(s: int, j: int, n_actions: int) -> int:
    return (s + j + 1) % n_actions


def shop(depth: int = 3, branching: int = 3, slip: float = 0.0, score_seed: int = 0,
         max_horizon: int | None = None) -> Mdp:
    """Decision tree of search/refine clicks ending in a purchase with graded credit.

    Tree states are numbered breadth-first (root 0); a node at depth < depth
    has ``branching`` children, one per action. At a leaf, action a buys
    product a, entering one of branching**(depth+1) terminal states whose
    task score lies in [0, 1]; exactly one product scores 1. With
    probability ``slip`` a click lands on a uniformly random sibling.
    """
    if depth < 1 or branching < 2:
        raise ValidationError("shop needs depth >= 1 and branching >= 2")
    if not 0.0 <= slip <= 1.0:
        raise ValidationError("slip must lie in [0, 1]")
    b = branching
    n_tree = sum(b ** k for k in range(depth + 1))
    n_leaves = b ** depth
    first_leaf = n_tree - n_leaves
    n_term = n_leaves * b
    S = n_tree + n_term
    P = np.zeros((S, b, S))

    def children(node: int) -> list:
        return [node * b + 1 + c for c in range(b)]

    for node in range(n_tree):
        kids = children(node) if node < first_leaf else [n_tree + (node - first_leaf) * b + c for c in range(b)]
        for a in range(b):
            P[node, a, kids[a]] += 1.0 - slip
            for k in kids:
                P[node, a, k] += slip / b
    for t in range(n_tree, S):
        P[t, :, t] = 1.0
    rng = np.random.default_rng(score_seed)
    scores = np.round(rng.uniform(0.0, 0.9, size=n_term), 3)
    scores[rng.integers(n_term)] = 1.0
    term_r = np.zeros(S)
    term_r[n_tree:] = scores
    reward = _expected_reward(P, term_r)
    reward[n_tree:] = 0.0
    p0 = np.zeros(S)
    p0[0] = 1.0
    H = depth + 1 if max_horizon is None else int(max_horizon)
    return Mdp(P, reward, p0, frozenset(range(n_tree, S)), H, term_r, name="shop")


_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))  # up, down, left, right


def grid(width: int = 4, height: int = 4, slip: float = 0.1, pits: Sequence = (),
         max_horizon: int | None = None) -> Mdp:
    """Gridworld from (0, 0) to a terminal goal at (height-1, width-1), binary task reward.

    With probability ``slip`` a move goes to one of the two perpendicular
    directions instead. Cells listed in ``pits`` are terminal with reward 0.
    Cell (row, col) is state row * width + col.
    """
    if width < 1 or height < 1 or width * height < 2:
        raise ValidationError("grid needs at least two cells")
    if not 0.0 <= slip <= 1.0:
        raise ValidationError("slip must lie in [0, 1]")
    S = width * height
    goal = S - 1
    pit_states = {int(r) * width + int(c) for r, c in pits}
    if goal in pit_states or 0 in pit_states:
        raise ValidationError("pits may not cover the start or the goal")
    P = np.zeros((S, 4, S))

    def move(s, d):
        r, c = divmod(s, width)
        dr, dc = _MOVES[d]
        r2, c2 = r + dr, c + dc
        if 0 <= r2 < height and 0 <= c2 < width:
            return r2 * width + c2
        return s

    perp = {0: (2, 3), 1: (2, 3), 2: (0, 1), 3: (0, 1)}
    for s in range(S):
        for a in range(4):
            P[s, a, move(s, a)] += 1.0 - slip
            for d in perp[a]:
                P[s, a, move(s, d)] += slip / 2
    terminals = {goal} | pit_states
    for t in terminals:
        P[t] = 0.0
        P[t, :, t] = 1.0
    term_r = np.zeros(S)
    term_r[goal] = 1.0
    reward = _expected_reward(P, term_r)
    reward[list(terminals)] = 0.0
    p0 = np.zeros(S)
    p0[0] = 1.0
    H = 3 * (width + height) if max_horizon is None else int(max_horizon)
    return Mdp(P, reward, p0, frozenset(terminals), H, term_r, name="grid")


ENVIRONMENTS = {"chain": chain, "shop": shop, "grid": grid}


def make_env(name: str, params: dict | None = None) -> Mdp:
    try:
        factory = ENVIRONMENTS[name]
    except KeyError:
        raise ConfigError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    try:
        return factory(**(params or {}))
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {name}: {exc}") from None
