"""DMPO, trajectory-DPO and SFT losses with analytic gradients.

Every preference loss here has the form  mean_i -log sigmoid(x_i)  with

    x_i = Phi(win_i) - Phi(lose_i),
    Phi(tau) = beta * sum_t w(t, T) * [log pi(a_t|s_t) - log ref(a_t|s_t)],

where w = phi(t, T) for DMPO and w = 1 for the trajectory-level DPO baseline.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from dmpo_lab.errors import ConfigError, UpdateRefusedError, ValidationError
from dmpo_lab.mdp import Mdp, Trajectory
from dmpo_lab.policy import TabularPolicy, log_softmax, traj_log_ratio_terms

LOSS_KINDS = ("dmpo", "dpo_traj", "sft")


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 0.1
    gamma: float = 0.9
    learning_rate: float = 0.1
    epochs: int = 500
    batch_size: int = 32
    seed: int = 0
    loss_kind: str = "dmpo"
    eval_episodes: int = 200
    stochastic_eval: bool = False

    def __post_init__(self):
        if not self.beta > 0:
            raise ValidationError("beta must be > 0")
        if not 0.0 <= self.gamma < 1.0:
            raise ValidationError("gamma must lie in [0, 1)")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")
        if int(self.epochs) < 0 or int(self.batch_size) < 1 or int(self.eval_episodes) < 1:
            raise ValidationError("epochs must be >= 0, batch_size and eval_episodes >= 1")
        if self.loss_kind not in LOSS_KINDS:
            raise ValidationError(f"loss_kind must be one of {LOSS_KINDS}")

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> TrainConfig:
        return TrainConfig(**{**asdict(self), **changes})


@dataclass(frozen=True)
class LossReport:
    value: float
    win_score: float
    lose_score: float
    pair_weight: float


# -- discount function and scores ----------------------------------------------

def phi(t: int, T: int, gamma: float) -> float:
    """gamma^t (1 - gamma^(T-t)) / (1 - gamma^T); the gamma=0 limit is [t == 0]."""
    if not 0 <= t < T:
        raise ValidationError(f"need 0 <= t < T, got t={t}, T={T}")
    if not 0.0 <= gamma < 1.0:
        raise ValidationError("gamma must lie in [0, 1)")
    return float(phi_weights(T, gamma)[t])


def phi_weights(T: int, gamma: float) -> np.ndarray:
    """phi(t, T) for t = 0..T-1."""
    t = np.arange(T, dtype=np.float64)
    if gamma == 0.0:
        return (t == 0).astype(np.float64)
    lg = np.log(gamma)
    # expm1 keeps 1 - gamma^k accurate when gamma^k is close to 1
    return np.exp(t * lg) * np.expm1((T - t) * lg) / np.expm1(T * lg)


def traj_score(policy: TabularPolicy, ref: TabularPolicy, traj: Trajectory, beta: float, gamma: float) -> float:
    terms = traj_log_ratio_terms(policy, ref, traj)
    return float(beta * np.dot(phi_weights(traj.length, gamma), terms))


def softplus(x):
    return np.logaddexp(0.0, x)


def bt_prob_single(r_win: float, r_lose: float) -> float:
    """exp(r_w) / (exp(r_w) + exp(r_l))."""
    return float(expit(r_win - r_lose))


def length_norm(T: int, gamma: float) -> float:
    """(1 - gamma) / (1 - gamma^T), equal to 1 at gamma = 0."""
    if gamma == 0.0:
        return 1.0
    return float(np.expm1(np.log(gamma)) / np.expm1(T * np.log(gamma)))


def bt_logit_traj(pair, mdp: Mdp, gamma: float, normalized: bool) -> float:
    def disc(traj: Trajectory) -> float:
        total = float(np.sum(gamma ** np.arange(traj.length) * mdp.reward[traj.states, traj.actions]))
        return total * length_norm(traj.length, gamma) if normalized else total

    return disc(pair.win) - disc(pair.lose)


def bt_prob_traj(pair, mdp: Mdp, gamma: float, normalized: bool) -> float:
    """Trajectory-level BT preference probability, optionally length-normalized."""
    if not 0.0 <= gamma < 1.0:
        raise ValidationError("gamma must lie in [0, 1)")
    return float(expit(bt_logit_traj(pair, mdp, gamma, normalized)))


# -- batched evaluation ----------------------------------------------------------

@dataclass(frozen=True)
class PairSteps:
    pair: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    weight: np.ndarray  # signed: + for win steps, - for lose steps
    n_pairs: int


def compile_pairs(batch: Sequence, gamma: float, discounted: bool) -> PairSteps:
    if len(batch) == 0:
        raise ValidationError("batch must be nonempty")
    pair, states, actions, weight = [], [], [], []
    for i, p in enumerate(batch):
        for traj, sign in ((p.win, 1.0), (p.lose, -1.0)):
            T = traj.length
            w = phi_weights(T, gamma) if discounted else np.ones(T)
            pair.append(np.full(T, i))
            states.append(traj.states)
            actions.append(traj.actions)
            weight.append(sign * w)
    return PairSteps(np.concatenate(pair), np.concatenate(states), np.concatenate(actions),
                  np.concatenate(weight), len(batch))


def _scores(steps: PairSteps, policy: TabularPolicy, ref: TabularPolicy, beta: float):
    if policy.logits.shape != ref.logits.shape:
        raise ConfigError("policy and reference have different shapes")
    lr = log_softmax(policy.logits)[steps.states, steps.actions] - log_softmax(ref.logits)[steps.states, steps.actions]
    contrib = beta * steps.weight * lr
    win = np.bincount(steps.pair, weights=np.where(steps.weight > 0, contrib, 0.0), minlength=steps.n_pairs)
    lose = -np.bincount(steps.pair, weights=np.where(steps.weight < 0, contrib, 0.0), minlength=steps.n_pairs)
    return win, lose


def _report(win: np.ndarray, lose: np.ndarray) -> LossReport:
    x = win - lose
    return LossReport(
        value=float(np.mean(softplus(-x))),
        win_score=float(np.mean(win)),
        lose_score=float(np.mean(lose)),
        pair_weight=float(np.mean(expit(-x))),
    )


def _grad(steps: PairSteps, policy: TabularPolicy, win, lose, beta: float, subset=None) -> np.ndarray:
    if policy.frozen:
        raise UpdateRefusedError("frozen policies have no trainable parameters")
    # dL/dx_i = -sigmoid(-x_i) / n ;  dx_i/dtheta = beta * sum_steps w * (onehot(a) - pi(.|s))
    if subset is None:
        coef = -expit(-(win - lose)) / steps.n_pairs
    else:
        coef = np.zeros(steps.n_pairs)
        coef[subset] = -expit(-(win[subset] - lose[subset])) / len(subset)
    c = coef[steps.pair] * beta * steps.weight
    g = np.zeros_like(policy.logits)
    np.add.at(g, (steps.states, steps.actions), c)
    per_state = np.bincount(steps.states, weights=c, minlength=policy.n_states)
    g -= per_state[:, None] * np.exp(log_softmax(policy.logits))
    return g


def pair_objective(steps: PairSteps, policy: TabularPolicy, ref: TabularPolicy, beta: float,
                   subset: np.ndarray | None = None, with_grad: bool = True):
    """(report, gradient) of the loss restricted to the pairs in ``subset`` (all pairs if None)."""
    win, lose = _scores(steps, policy, ref, beta)
    grad = _grad(steps, policy, win, lose, beta, subset) if with_grad else None
    if subset is not None:
        win, lose = win[subset], lose[subset]
    return _report(win, lose), grad


def dmpo_loss(batch, policy: TabularPolicy, ref: TabularPolicy, cfg: TrainConfig) -> LossReport:
    steps = compile_pairs(batch, cfg.gamma, discounted=True)
    return _report(*_scores(steps, policy, ref, cfg.beta))


def dmpo_grad(batch, policy: TabularPolicy, ref: TabularPolicy, cfg: TrainConfig) -> np.ndarray:
    """Gradient of dmpo_loss w.r.t. policy.logits, shape (S, A)."""
    if policy.frozen:
        raise UpdateRefusedError("frozen policies have no trainable parameters")
    steps = compile_pairs(batch, cfg.gamma, discounted=True)
    win, lose = _scores(steps, policy, ref, cfg.beta)
    return _grad(steps, policy, win, lose, cfg.beta)


def dpo_traj_loss(batch, policy: TabularPolicy, ref: TabularPolicy, cfg: TrainConfig) -> LossReport:
    """Whole-trajectory DPO: beta * sum of per-step log-ratios, no phi, no length normalization."""
    steps = compile_pairs(batch, cfg.gamma, discounted=False)
    return _report(*_scores(steps, policy, ref, cfg.beta))


def dpo_traj_grad(batch, policy: TabularPolicy, ref: TabularPolicy, cfg: TrainConfig) -> np.ndarray:
    if policy.frozen:
        raise UpdateRefusedError("frozen policies have no trainable parameters")
    steps = compile_pairs(batch, cfg.gamma, discounted=False)
    win, lose = _scores(steps, policy, ref, cfg.beta)
    return _grad(steps, policy, win, lose, cfg.beta)


def dpo_single_turn_loss(batch, policy: TabularPolicy, ref: TabularPolicy, beta: float) -> float:
    """Single-turn DPO on (s_0, a_0^w, a_0^l) of each pair, written out step by step."""
    if len(batch) == 0:
        raise ValidationError("batch must be nonempty")
    lp, lr = log_softmax(policy.logits), log_softmax(ref.logits)
    total = 0.0
    for p in batch:
        (s, aw), (_, al) = p.win.steps[0], p.lose.steps[0]
        x = beta * ((lp[s, aw] - lr[s, aw]) - (lp[s, al] - lr[s, al]))
        total += float(softplus(-x))
    return total / len(batch)


def _sft_arrays(batch: Sequence[Trajectory]):
    if len(batch) == 0:
        raise ValidationError("batch must be nonempty")
    s = np.concatenate([t.states for t in batch])
    a = np.concatenate([t.actions for t in batch])
    return s, a


def sft_loss(batch: Sequence[Trajectory], policy: TabularPolicy) -> LossReport:
    """Mean negative log-likelihood over every (s_t, a_t) in the batch."""
    s, a = _sft_arrays(batch)
    nll = float(-np.mean(log_softmax(policy.logits)[s, a]))
    return LossReport(value=nll, win_score=nll, lose_score=nll, pair_weight=0.5)


def sft_grad(batch: Sequence[Trajectory], policy: TabularPolicy) -> np.ndarray:
    if policy.frozen:
        raise UpdateRefusedError("frozen policies have no trainable parameters")
    s, a = _sft_arrays(batch)
    n = s.size
    g = np.zeros_like(policy.logits)
    np.add.at(g, (s, a), -1.0 / n)
    counts = np.bincount(s, minlength=policy.n_states) / n
    g += counts[:, None] * np.exp(log_softmax(policy.logits))
    return g
