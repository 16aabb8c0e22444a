"""State-action occupancy measures and the KL-tilted closed-form optimum.

The occupancy measure of a policy is

    d(s, a) = E_tau[ c(T_tau) * sum_{t < T_tau} gamma^t 1{s_t = s, a_t = a} ],
    c(T) = (1 - gamma) / (1 - gamma^T),

with T_tau the realized episode length (the horizon cap unless a terminal
state is entered first). Each episode contributes exactly mass one, so d is a
distribution. When no terminal state is reachable every T_tau equals the cap
and the normalizer is the usual constant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.special import logsumexp

from dmpo_lab.errors import SupportMismatchError, ValidationError
from dmpo_lab.losses import length_norm
from dmpo_lab.mdp import Mdp, Trajectory, check_dims, policy_chooser, simulate
from dmpo_lab.policy import TabularPolicy

SAOM_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class Saom:
    d: np.ndarray
    horizon: int
    gamma: float

    def __post_init__(self):
        d = np.array(self.d, dtype=np.float64, copy=True)
        d.setflags(write=False)
        object.__setattr__(self, "d", d)

    def check(self, tol: float = SAOM_TOL) -> None:
        if np.any(self.d < 0):
            raise ValidationError("occupancy measure has negative entries")
        if abs(self.d.sum() - 1.0) > tol:
            raise ValidationError(f"occupancy measure sums to {self.d.sum()!r}, not 1")

    def to_dict(self) -> dict:
        return {"d": self.d.tolist(), "horizon": self.horizon, "gamma": self.gamma}


@dataclass(frozen=True, eq=False)
class SaomSolution:
    d_star: Saom
    partition_z: float
    objective_value: float
    log_z: float

    def to_dict(self) -> dict:
        return {
            "d_star": self.d_star.to_dict(),
            "partition_z": self.partition_z,
            "log_z": self.log_z,
            "objective_value": self.objective_value,
        }


def _check_args(horizon: int, gamma: float) -> None:
    if int(horizon) < 1:
        raise ValidationError("horizon must be >= 1")
    if not 0.0 <= gamma < 1.0:
        raise ValidationError("gamma must lie in [0, 1)")


def state_action_marginals(mdp: Mdp, policy: TabularPolicy, horizon: int) -> np.ndarray:
    """p[t, s, a] = P(s_t = s, a_t = a, episode still running at t)."""
    check_dims(mdp, policy)
    pi = policy.probs()
    live = ~mdp.terminal_mask
    p = np.zeros((horizon, mdp.n_states, mdp.n_actions))
    p[0] = mdp.initial_dist[:, None] * pi
    for t in range(horizon - 1):
        nxt = np.einsum("sa,sak->k", p[t], mdp.transition) * live
        p[t + 1] = nxt[:, None] * pi
    return p


def expected_length_norm(mdp: Mdp, policy: TabularPolicy, horizon: int, gamma: float) -> np.ndarray:
    """g[t, s, a] = E[c(T_tau) | s_t = s, a_t = a] by backward recursion."""
    pi = policy.probs()
    term = mdp.terminal_mask
    c = np.array([length_norm(L, gamma) for L in range(1, horizon + 1)])
    g = np.empty((horizon, mdp.n_states, mdp.n_actions))
    g[horizon - 1] = c[horizon - 1]
    p_term = mdp.transition[:, :, term].sum(axis=2)
    for t in range(horizon - 2, -1, -1):
        cont = (pi * g[t + 1]).sum(axis=1) * ~term
        g[t] = p_term * c[t] + mdp.transition @ cont
    return g


def saom_exact(mdp: Mdp, policy: TabularPolicy, horizon: int, gamma: float) -> Saom:
    _check_args(horizon, gamma)
    p = state_action_marginals(mdp, policy, horizon)
    g = expected_length_norm(mdp, policy, horizon, gamma)
    disc = (np.arange(horizon) == 0).astype(float) if gamma == 0.0 else gamma ** np.arange(horizon)
    d = np.einsum("t,tsa->sa", disc, p * g)
    return Saom(d, horizon, gamma)


def saom_monte_carlo(mdp: Mdp, policy: TabularPolicy, horizon: int, gamma: float, n: int, seed: int) -> Saom:
    """Average of per-episode normalized discounted visit counts over n sampled episodes."""
    _check_args(horizon, gamma)
    if n < 1:
        raise ValidationError("n must be >= 1")
    check_dims(mdp, policy)
    rng = np.random.default_rng(seed)
    states, actions, lengths, _ = simulate(mdp, policy_chooser(policy, False), n, rng, horizon=horizon)
    c = np.array([length_norm(L, gamma) for L in range(1, horizon + 1)])
    disc = (np.arange(horizon) == 0).astype(float) if gamma == 0.0 else gamma ** np.arange(horizon)
    w = c[lengths - 1][:, None] * disc[None, :]
    valid = states >= 0
    d = np.zeros((mdp.n_states, mdp.n_actions))
    np.add.at(d, (states[valid], actions[valid]), w[valid])
    return Saom(d / n, horizon, gamma)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """sum p log(p/q) with 0 log 0 = 0; inf if p puts mass where q has none."""
    p, q = np.asarray(p, float), np.asarray(q, float)
    mask = p > 0
    if np.any(q[mask] == 0):
        return float("inf")
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def regularized_objective(d: np.ndarray, reward: np.ndarray, ref: np.ndarray, beta: float) -> float:
    """E_d[r] - beta * KL(d || ref)."""
    return float(np.sum(d * reward)) - beta * kl_divergence(d, ref)


def optimal_saom(mdp: Mdp, ref_saom: Saom, beta: float) -> SaomSolution:
    """d*(s,a) = d_ref(s,a) exp(r(s,a)/beta) / Z with one scalar Z over all pairs."""
    if not beta > 0:
        raise ValidationError("beta must be > 0")
    ref = ref_saom.d
    if ref.shape != mdp.reward.shape:
        raise ValidationError("occupancy measure shape does not match the MDP")
    support = ref > 0
    logits = np.where(support, np.log(np.where(support, ref, 1.0)) + mdp.reward / beta, -np.inf)
    log_z = float(logsumexp(logits))
    d_star = np.exp(logits - log_z)
    value = regularized_objective(d_star, mdp.reward, ref, beta)
    return SaomSolution(
        d_star=Saom(d_star, ref_saom.horizon, ref_saom.gamma),
        partition_z=float(np.exp(log_z)),
        objective_value=value,
        log_z=log_z,
    )


def implied_reward(d_star, ref_saom, beta: float, partition_z: float) -> np.ndarray:
    """beta * log(d*/d_ref) + beta * log Z; NaN where both measures vanish."""
    ds = np.asarray(getattr(d_star, "d", d_star), dtype=float)
    dr = np.asarray(getattr(ref_saom, "d", ref_saom), dtype=float)
    if ds.shape != dr.shape:
        raise ValidationError("occupancy measures have different shapes")
    if not partition_z > 0:
        raise ValidationError("partition_z must be > 0")
    both = (ds > 0) & (dr > 0)
    neither = (ds == 0) & (dr == 0)
    if not np.all(both | neither):
        raise SupportMismatchError("log-ratio undefined: exactly one measure is zero at some (s, a)")
    out = np.full(ds.shape, np.nan)
    out[both] = beta * (np.log(ds[both]) - np.log(dr[both])) + beta * np.log(partition_z)
    return out


def realizability_gap(mdp: Mdp, d: Saom) -> float:
    """L1 distance between d and the occupancy of the policy it induces.

    Zero iff d satisfies the MDP's flow constraints (up to states it never
    visits). The closed-form optimum is not constrained to be realizable, so
    this is a diagnostic only.
    """
    mass = d.d.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        pi = np.where(mass > 0, d.d / np.where(mass > 0, mass, 1.0), 1.0 / mdp.n_actions)
    logits = np.log(np.maximum(pi, 1e-300))
    induced = saom_exact(mdp, TabularPolicy(logits), d.horizon, d.gamma)
    return float(np.abs(induced.d - d.d).sum())


# -- compounding error -------------------------------------------------------------

def expert_support(expert_trajs: Iterable[Trajectory]) -> set:
    return {step for traj in expert_trajs for step in traj.steps}


def support_mask(expert_trajs: Iterable[Trajectory], n_states: int, n_actions: int) -> np.ndarray:
    mask = np.zeros((n_states, n_actions), dtype=bool)
    for s, a in expert_support(expert_trajs):
        mask[s, a] = True
    return mask


def compounding_error(traj: Trajectory, expert_trajs) -> float:
    """Fraction of steps whose (s, a) appears in no expert trajectory."""
    support = expert_trajs if isinstance(expert_trajs, (set, frozenset)) else expert_support(expert_trajs)
    if not support:
        raise ValidationError("expert set must be nonempty")
    off = sum(1 for step in traj.steps if step not in support)
    return off / traj.length


def off_support_rates(states: np.ndarray, actions: np.ndarray, lengths: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Vectorized compounding_error over padded (n, H) arrays."""
    valid = states >= 0
    off = valid & ~mask[np.maximum(states, 0), np.maximum(actions, 0)]
    return off.sum(axis=1) / lengths
