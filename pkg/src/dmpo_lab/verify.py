"""Exact-math check battery behind ``dmpo-lab verify``.

Each check returns a CheckResult holding the measured worst-case quantity
next to its tolerance, so the report shows how much headroom is left.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from dmpo_lab import losses
from dmpo_lab.datagen import PreferencePair
from dmpo_lab.losses import TrainConfig, bt_logit_traj, dmpo_grad, dmpo_loss, dpo_single_turn_loss
from dmpo_lab.mdp import Mdp, Trajectory, make_env
from dmpo_lab.occupancy import (
    implied_reward,
    optimal_saom,
    regularized_objective,
    saom_exact,
    saom_monte_carlo,
)
from dmpo_lab.policy import TabularPolicy, grad_log_prob, log_softmax

VERIFY_SEED = 20240601


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    seconds: float
    detail: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


# -- numerical helpers -----------------------------------------------------------------

def fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of f over every entry of x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        up, dn = x.copy(), x.copy()
        up[idx] += h
        dn[idx] -= h
        g[idx] = (f(up) - f(dn)) / (2 * h)
    return g


def rel_error(g: np.ndarray, ref: np.ndarray) -> float:
    """max |g - ref| / max |ref| (infinity-norm relative error)."""
    scale = max(float(np.abs(ref).max()), 1e-12)
    return float(np.abs(g - ref).max()) / scale


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.flatnonzero(u - css / k > 0)[-1]
    return np.maximum(v - css[rho] / (rho + 1), 0.0)


def projected_gradient_ascent(reward: np.ndarray, ref: np.ndarray, beta: float,
                              iters: int = 20000, tol: float = 1e-15) -> np.ndarray:
    """Maximize E_d[r] - beta KL(d || ref) over the simplex with backtracking steps.

    Independent of the closed form: it only uses the objective and its gradient.
    """
    r, q = reward.ravel(), ref.ravel()

    def f(d):
        m = d > 0
        return float(d @ r - beta * np.sum(d[m] * np.log(d[m] / q[m])))

    d = q.copy()
    fd, step = f(d), 1.0
    for _ in range(iters):
        grad = r - beta * (np.log(np.maximum(d, 1e-300) / q) + 1.0)
        while True:
            cand = project_simplex(d + step * grad)
            fc = f(cand)
            if fc >= fd - 1e-18:
                break
            step *= 0.5
            if step < 1e-20:
                return d.reshape(reward.shape)
        moved = np.abs(cand - d).max()
        d, fd = cand, fc
        step *= 2.0
        if moved < tol:
            break
    return d.reshape(reward.shape)


def random_instance(rng, n_states: int, n_actions: int, horizon: int, n_terminal: int = 0) -> Mdp:
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    r = rng.uniform(0, 1, size=(n_states, n_actions))
    p0 = np.concatenate([rng.dirichlet(np.ones(n_states - n_terminal)), np.zeros(n_terminal)])
    return Mdp(P, r, p0, frozenset(range(n_states - n_terminal, n_states)), horizon)


def random_pairs(rng, n_pairs: int, n_states: int, n_actions: int, max_len: int) -> list:
    out = []
    for _ in range(n_pairs):
        Tw, Tl = rng.integers(1, max_len + 1, size=2)
        sw = rng.integers(n_states, size=Tw)
        sl = rng.integers(n_states, size=Tl)
        sl[0] = sw[0]
        out.append(PreferencePair(Trajectory.from_arrays(sw.tolist(), rng.integers(n_actions, size=Tw).tolist()),
                                  Trajectory.from_arrays(sl.tolist(), rng.integers(n_actions, size=Tl).tolist())))
    return out


def train_single_turn(dataset, ref: TabularPolicy, cfg: TrainConfig) -> TabularPolicy:
    """Mini-batch descent on first-step DPO, written with per-pair log-prob gradients.

    Uses the same batch schedule as the preference trainer so final logits
    can be compared entry by entry.
    """
    policy = ref.trainable_copy()
    rng = np.random.default_rng(cfg.seed)
    n = len(dataset)
    lr_ref = log_softmax(ref.logits)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            subset = np.sort(order[start:start + cfg.batch_size])
            lp = log_softmax(policy.logits)
            g = np.zeros_like(policy.logits)
            for i in subset:
                (s, aw), (_, al) = dataset[i].win.steps[0], dataset[i].lose.steps[0]
                x = cfg.beta * ((lp[s, aw] - lr_ref[s, aw]) - (lp[s, al] - lr_ref[s, al]))
                coef = -1.0 / (1.0 + np.exp(x)) * cfg.beta / len(subset)
                g += coef * (grad_log_prob(policy, s, aw) - grad_log_prob(policy, s, al))
            policy.apply_update(-cfg.learning_rate * g)
    return policy


def _timed(name: str, tolerance: float, fn, *, lower_is_better: bool = True) -> CheckResult:
    t0 = time.perf_counter()
    measured, detail = fn()
    ok = measured < tolerance if lower_is_better else measured >= tolerance
    return CheckResult(name, bool(ok), float(measured), tolerance, time.perf_counter() - t0, detail)


# -- checks ------------------------------------------------------------------------------

def check_phi(seed: int = VERIFY_SEED, n: int = 1000) -> CheckResult:
    rng = np.random.default_rng([seed, 1])

    def run():
        worst, bad_shape = 0.0, 0
        for _ in range(n):
            T = int(rng.integers(1, 60))
            t = int(rng.integers(T))
            gamma = float(rng.uniform(1e-6, 1 - 1e-6))
            g = Fraction(gamma)
            exact = g**t * (1 - g ** (T - t)) / (1 - g**T)
            worst = max(worst, float(abs(Fraction(losses.phi(t, T, gamma)) - exact) / exact))
            w = losses.phi_weights(T, gamma)
            bad_shape += int(w[0] != 1.0 or np.any(np.diff(w) >= 0))
        return (worst if bad_shape == 0 else float("inf")), f"{bad_shape} weight vectors not starting at 1 or not decreasing"

    return _timed("phi_exact_fraction", 1e-12, run)


def check_single_turn_limit(seed: int = VERIFY_SEED, n: int = 100) -> CheckResult:
    rng = np.random.default_rng([seed, 2])

    def run():
        worst = 0.0
        for _ in range(n):
            S, A = int(rng.integers(1, 7)), int(rng.integers(2, 5))
            batch = random_pairs(rng, int(rng.integers(1, 9)), S, A, 6)
            pol = TabularPolicy(rng.normal(size=(S, A)))
            ref = TabularPolicy(rng.normal(size=(S, A)))
            cfg = TrainConfig(beta=float(rng.uniform(0.05, 2.0)), gamma=1e-8)
            worst = max(worst, abs(dmpo_loss(batch, pol, ref, cfg).value - dpo_single_turn_loss(batch, pol, ref, cfg.beta)))
        # end to end: gamma = 0 training against a dedicated first-step trainer
        from dmpo_lab.trainer import train_preference

        S, A = 5, 3
        data = random_pairs(rng, 40, S, A, 5)
        mdp = Mdp(np.full((S, A, S), 1.0 / S), np.zeros((S, A)), np.full(S, 1.0 / S), frozenset(), 5)
        ref = TabularPolicy(rng.normal(size=(S, A)), frozen=True)
        cfg = TrainConfig(gamma=0.0, beta=0.5, learning_rate=0.5, epochs=100, batch_size=16, eval_episodes=1)
        trained, _ = train_preference(mdp, data, ref, cfg, log=False)
        oracle = train_single_turn(data, ref, cfg)
        logits_gap = float(np.abs(trained.logits - oracle.logits).max())
        return max(worst, logits_gap), f"max loss gap {worst:.3g}, trained logits gap {logits_gap:.3g}"

    return _timed("single_turn_limit", 1e-6, run)


def check_gradients(seed: int = VERIFY_SEED, n: int = 100) -> CheckResult:
    rng = np.random.default_rng([seed, 3])

    def run():
        worst = 0.0
        for _ in range(n):
            S, A = int(rng.integers(1, 7)), int(rng.integers(2, 5))
            batch = random_pairs(rng, int(rng.integers(1, 5)), S, A, 5)
            pol = TabularPolicy(rng.normal(size=(S, A)))
            ref = TabularPolicy(rng.normal(size=(S, A)))
            cfg = TrainConfig(beta=float(rng.uniform(0.05, 2.0)), gamma=float(rng.uniform(0.0, 0.99)))
            g = dmpo_grad(batch, pol, ref, cfg)
            fd = fd_gradient(lambda x: dmpo_loss(batch, TabularPolicy(x), ref, cfg).value, pol.logits)
            worst = max(worst, rel_error(g, fd))
        return worst, f"max relative error over {n} instances"

    return _timed("dmpo_grad_finite_difference", 1e-6, run)


def check_saom_mass(seed: int = VERIFY_SEED, n: int = 100) -> CheckResult:
    rng = np.random.default_rng([seed, 4])

    def run():
        worst = 0.0
        for _ in range(n):
            S, A = int(rng.integers(2, 7)), int(rng.integers(1, 5))
            mdp = random_instance(rng, S, A, int(rng.integers(1, 12)), n_terminal=int(rng.integers(0, 2)))
            pol = TabularPolicy(rng.normal(size=(S, A)))
            d = saom_exact(mdp, pol, mdp.max_horizon, float(rng.uniform(0, 0.99))).d
            worst = max(worst, abs(d.sum() - 1.0), float(-d.min()))
        return worst, f"max |sum d - 1| (or negative entry) over {n} random instances"

    return _timed("saom_total_mass", 1e-10, run)


def check_saom_monte_carlo(seed: int = VERIFY_SEED, n: int = 100_000) -> CheckResult:
    def run():
        mdp = make_env("chain", {"N": 5, "slip": 0.1})
        pol = TabularPolicy.uniform(mdp.n_states, mdp.n_actions)
        exact = saom_exact(mdp, pol, mdp.max_horizon, 0.9).d
        mc = saom_monte_carlo(mdp, pol, mdp.max_horizon, 0.9, n, seed).d
        return float(np.abs(exact - mc).max()), f"max |d_mc - d_exact| on chain(N=5, slip=0.1), n={n}"

    return _timed("saom_monte_carlo", 0.01, run)


def check_closed_form(seed: int = VERIFY_SEED, n: int = 20, n_points: int = 100_000) -> CheckResult:
    rng = np.random.default_rng([seed, 5])

    def run():
        worst_pga, worst_rt, beaten = 0.0, 0.0, 0
        for _ in range(n):
            mdp = random_instance(rng, 4, 3, 5)
            ref = saom_exact(mdp, TabularPolicy(rng.normal(size=(4, 3))), 5, float(rng.uniform(0.1, 0.95)))
            beta = float(rng.uniform(0.1, 1.0))
            sol = optimal_saom(mdp, ref, beta)
            r, q = mdp.reward.ravel(), ref.d.ravel()
            pts = rng.dirichlet(np.ones(r.size), size=n_points)
            with np.errstate(divide="ignore", invalid="ignore"):
                kl = np.where(pts > 0, pts * np.log(pts / q), 0.0).sum(axis=1)
            beaten += int(np.any(pts @ r - beta * kl > sol.objective_value + 1e-12))
            pga = projected_gradient_ascent(mdp.reward, ref.d, beta)
            worst_pga = max(worst_pga, abs(regularized_objective(pga, mdp.reward, ref.d, beta) - sol.objective_value))
            back = implied_reward(sol.d_star, ref, beta, sol.partition_z)
            worst_rt = max(worst_rt, float(np.abs(back - mdp.reward).max()))
        measured = max(worst_pga, worst_rt) if beaten == 0 else float("inf")
        return measured, (f"{beaten} instances beaten by a simplex sample; max |f(pga) - f(d*)| {worst_pga:.3g}; "
                          f"max reward round-trip error {worst_rt:.3g}")

    return _timed("closed_form_optimum", 1e-6, run)


def check_length_bias() -> CheckResult:
    def run():
        mdp = Mdp(np.ones((1, 1, 1)), np.ones((1, 1)), [1.0], frozenset(), 30)
        worst_norm, min_raw = 0.0, np.inf
        for Tw in range(1, 8):
            pair = PreferencePair(Trajectory(((0, 0),) * Tw), Trajectory(((0, 0),) * (3 * Tw)))
            for gamma in (0.1, 0.5, 0.9):
                worst_norm = max(worst_norm, abs(bt_logit_traj(pair, mdp, gamma, normalized=True)))
                min_raw = min(min_raw, abs(bt_logit_traj(pair, mdp, gamma, normalized=False)))
        measured = worst_norm if min_raw > 1e-9 else float("inf")
        return measured, f"normalized |logit| <= {worst_norm:.3g}; unnormalized |logit| >= {min_raw:.3g}"

    return _timed("length_normalization_bias", 1e-12, run)


def check_bt(seed: int = VERIFY_SEED, n: int = 1000) -> CheckResult:
    rng = np.random.default_rng([seed, 6])

    def run():
        a, b = rng.normal(scale=5, size=(2, n))
        sym = max(abs(losses.bt_prob_single(x, y) + losses.bt_prob_single(y, x) - 1.0) for x, y in zip(a, b))
        tie = max(abs(losses.bt_prob_single(x, x) - 0.5) for x in a)
        sat = abs(losses.bt_prob_single(100.0, 0.0) - 1.0)
        mdp = random_instance(rng, 3, 2, 6)
        pair = random_pairs(rng, 1, 3, 2, 6)[0]
        same = PreferencePair(pair.win, pair.win)
        ident = max(abs(losses.bt_prob_traj(same, mdp, 0.9, flag) - 0.5) for flag in (True, False))
        return max(sym, tie, sat, ident), f"symmetry {sym:.3g}, ties {tie:.3g}, saturation {sat:.3g}, identical pairs {ident:.3g}"

    return _timed("bradley_terry_symmetry", 1e-12, run)


CHECKS = (check_phi, check_single_turn_limit, check_gradients, check_saom_mass, check_saom_monte_carlo,
          check_closed_form, check_bt, check_length_bias)


def run_all(seed: int = VERIFY_SEED) -> list:
    out = []
    for fn in CHECKS:
        out.append(fn() if fn is check_length_bias else fn(seed))
    return out
