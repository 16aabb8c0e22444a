"""Tabular softmax policies and their score-function gradients."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from dmpo_lab.errors import ConfigError, UpdateRefusedError, ValidationError
from dmpo_lab.mdp import Trajectory


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass(eq=False)
class TabularPolicy:
    """pi(a|s) = softmax(logits[s])[a].

    A frozen policy (reference or expert) has read-only logits and refuses
    gradient requests.
    """

    logits: np.ndarray
    frozen: bool = False

    def __post_init__(self):
        logits = np.array(self.logits, dtype=np.float64, copy=True)
        if logits.ndim != 2 or 0 in logits.shape:
            raise ValidationError(f"logits must be a nonempty (S, A) table, got shape {logits.shape}")
        if not np.all(np.isfinite(logits)):
            raise ValidationError("logits must be finite")
        if self.frozen:
            logits.setflags(write=False)
        self.logits = logits

    @classmethod
    def uniform(cls, n_states: int, n_actions: int, frozen: bool = False) -> TabularPolicy:
        return cls(np.zeros((n_states, n_actions)), frozen=frozen)

    @property
    def n_states(self) -> int:
        return self.logits.shape[0]

    @property
    def n_actions(self) -> int:
        return self.logits.shape[1]

    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits)

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs())

    def frozen_copy(self) -> TabularPolicy:
        return TabularPolicy(self.logits, frozen=True)

    def trainable_copy(self) -> TabularPolicy:
        return TabularPolicy(self.logits, frozen=False)

    def apply_update(self, delta: np.ndarray) -> None:
        """logits += delta, in place."""
        if self.frozen:
            raise UpdateRefusedError("frozen policies cannot be updated")
        self.logits += delta

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.logits).tobytes()).hexdigest()

    def to_dict(self) -> dict:
        return {"logits": self.logits.tolist(), "frozen": bool(self.frozen)}

    @classmethod
    def from_dict(cls, d: dict) -> TabularPolicy:
        return cls(d["logits"], frozen=bool(d.get("frozen", False)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> TabularPolicy:
        return cls.from_dict(json.loads(text))


def _check_index(policy: TabularPolicy, s: int, a: int) -> None:
    if not (0 <= s < policy.n_states and 0 <= a < policy.n_actions):
        raise ValidationError(f"(s={s}, a={a}) out of range for policy of shape {policy.logits.shape}")


def log_prob(policy: TabularPolicy, s: int, a: int) -> float:
    _check_index(policy, s, a)
    return float(log_softmax(policy.logits[s])[a])


def traj_log_ratio_terms(policy: TabularPolicy, ref: TabularPolicy, traj: Trajectory) -> np.ndarray:
    """Per-step log pi(a_t|s_t) - log ref(a_t|s_t), length T."""
    if policy.logits.shape != ref.logits.shape:
        raise ConfigError("policy and reference have different shapes")
    s, a = traj.states, traj.actions
    if s.min() < 0 or s.max() >= policy.n_states or a.min() < 0 or a.max() >= policy.n_actions:
        raise ConfigError("trajectory indices do not fit the policy")
    return log_softmax(policy.logits[s])[np.arange(traj.length), a] - log_softmax(ref.logits[s])[np.arange(traj.length), a]


def grad_log_prob(policy: TabularPolicy, s: int, a: int) -> np.ndarray:
    """Gradient of log pi(a|s) w.r.t. all logits; only row s is nonzero.

    Returned dense (S, A) because the tables are small; the row is
    onehot(a) - pi(.|s).
    """
    if policy.frozen:
        raise UpdateRefusedError("frozen policies have no trainable parameters")
    _check_index(policy, s, a)
    g = np.zeros_like(policy.logits)
    g[s] = -np.exp(log_softmax(policy.logits[s]))
    g[s, a] += 1.0
    return g
