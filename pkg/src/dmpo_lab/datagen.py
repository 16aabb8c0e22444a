"""Preference data: expert wins paired with noisy or clean losing trajectories."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from dmpo_lab.errors import GenerationExhaustedError, ValidationError
from dmpo_lab.mdp import (
    DEFAULT_GAMMA,
    Mdp,
    Trajectory,
    _cdf,
    _inverse_cdf,
    check_dims,
    discounted_return,
    simulate,
    trajectories_from_arrays,
)
from dmpo_lab.policy import TabularPolicy

SETTINGS = ("noisy", "clean")
REPEAT_FILTER = 3  # clean lose trajectories may not repeat one action this many times in a row
CANDIDATES_PER_ROUND = 64
MAX_ROUNDS = 8  # 512 candidates per pair, i.e. give up below a ~0.2% acceptance rate
POOL_DOUBLINGS = 3  # bucketed data may draw up to 8x the requested expert wins
EXPERT_MARGIN = 30.0


@dataclass(frozen=True)
class NoiseSpec:
    p_rep: float = 0.3
    p_rand: float = 0.2

    def __post_init__(self):
        if not (0 <= self.p_rep <= 1 and 0 <= self.p_rand <= 1 and self.p_rep + self.p_rand <= 1 + 1e-12):
            raise ValidationError("need p_rep, p_rand in [0, 1] with p_rep + p_rand <= 1")


@dataclass(frozen=True)
class PreferencePair:
    win: Trajectory
    lose: Trajectory

    def __post_init__(self):
        if self.win.initial_state != self.lose.initial_state:
            raise ValidationError("win and lose trajectories must share their initial state")

    def to_dict(self) -> dict:
        return {"win": self.win.to_dict(), "lose": self.lose.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> PreferencePair:
        return cls(Trajectory.from_dict(d["win"]), Trajectory.from_dict(d["lose"]))


@dataclass
class DatasetManifest:
    setting: str
    pairs: int
    seed: int
    env_name: str
    length_buckets: list | None = None  # [[max lose length, pair count], ...]
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValidationError(f"setting must be one of {SETTINGS}")
        if self.length_buckets:
            counts = [c for _, c in self.length_buckets]
            if sum(counts) != self.pairs or len(set(counts)) != 1:
                raise ValidationError("bucket counts must be equal and sum to the pair count")

    def to_dict(self) -> dict:
        return asdict(self)


# -- experts -------------------------------------------------------------------------

def value_iteration(mdp: Mdp, gamma: float = DEFAULT_GAMMA, horizon: int | None = None):
    """Finite-horizon optimal Q[t, s, a] and greedy actions[t, s] (lowest index among ties)."""
    H = mdp.max_horizon if horizon is None else horizon
    live = (~mdp.terminal_mask).astype(float)
    Q = np.zeros((H, mdp.n_states, mdp.n_actions))
    V_next = np.zeros(mdp.n_states)
    for t in range(H - 1, -1, -1):
        Q[t] = mdp.reward + gamma * mdp.transition @ (live * V_next)
        V_next = Q[t].max(axis=1)
    best = Q.max(axis=2, keepdims=True)
    greedy = np.argmax(Q >= best - 1e-12, axis=2)
    return Q, greedy


def expert_policy(mdp: Mdp, gamma: float = DEFAULT_GAMMA) -> TabularPolicy:
    """Frozen near-deterministic stationary policy taking the step-0 optimal action."""
    _, greedy = value_iteration(mdp, gamma)
    logits = np.full((mdp.n_states, mdp.n_actions), -EXPERT_MARGIN)
    logits[np.arange(mdp.n_states), greedy[0]] = 0.0
    return TabularPolicy(logits, frozen=True)


def _expert_arrays(mdp, n, rng, gamma, init_states=None):
    _, greedy = value_iteration(mdp, gamma)
    return simulate(mdp, lambda s, prev, t, u: greedy[t, s], n, rng, uniforms_per_step=3,
                    init_states=init_states)


def expert_trajectories(mdp: Mdp, n: int, seed: int, gamma: float = DEFAULT_GAMMA) -> list:
    """n rollouts of the exact (time-dependent) optimal policy."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    states, actions, lengths, _ = _expert_arrays(mdp, n, np.random.default_rng(seed), gamma)
    return trajectories_from_arrays(states, actions, lengths)


# -- losing trajectories ------------------------------------------------------------

def noisy_chooser(policy: TabularPolicy, noise: NoiseSpec, n_actions: int):
    cdf = _cdf(policy.probs())

    def choose(s, prev, t, u):
        base = _inverse_cdf(cdf[s], u[:, 0])
        rand = np.minimum((u[:, 2] * n_actions).astype(np.int64), n_actions - 1)
        repeat = (u[:, 1] < noise.p_rep) & (prev >= 0)
        random = ~repeat & (u[:, 1] >= noise.p_rep) & (u[:, 1] < noise.p_rep + noise.p_rand)
        return np.where(repeat, prev, np.where(random, rand, base))

    return choose


def _noisy_arrays(mdp, base_policy, n, rng, noise, init_states=None, horizon=None):
    return simulate(mdp, noisy_chooser(base_policy, noise, mdp.n_actions), n, rng,
                    uniforms_per_step=3, init_states=init_states, horizon=horizon)


def noisy_lose_trajectories(mdp: Mdp, base_policy: TabularPolicy, n: int, seed: int,
                            noise: NoiseSpec = NoiseSpec()) -> list:
    """Rollouts of base_policy that repeat the previous action w.p. p_rep or act uniformly w.p. p_rand."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    if not isinstance(noise, NoiseSpec):
        noise = NoiseSpec(**noise)
    check_dims(mdp, base_policy)
    states, actions, lengths, _ = _noisy_arrays(mdp, base_policy, n, np.random.default_rng(seed), noise)
    return trajectories_from_arrays(states, actions, lengths)


def max_repeat_run(actions: np.ndarray) -> int:
    if actions.size == 0:
        return 0
    change = np.flatnonzero(np.diff(actions) != 0)
    bounds = np.concatenate([[-1], change, [actions.size - 1]])
    return int(np.diff(bounds).max())


def _padded_returns(mdp, states, actions, gamma):
    valid = states >= 0
    r = np.where(valid, mdp.reward[np.maximum(states, 0), np.maximum(actions, 0)], 0.0)
    return (r * gamma ** np.arange(states.shape[1])).sum(axis=1)


def _repeat_runs(actions: np.ndarray) -> np.ndarray:
    """Longest run of identical consecutive actions per padded row."""
    n, H = actions.shape
    run = np.ones(n, dtype=np.int64)
    best = np.where(actions[:, 0] >= 0, 1, 0)
    for t in range(1, H):
        same = (actions[:, t] >= 0) & (actions[:, t] == actions[:, t - 1])
        run = np.where(same, run + 1, 1)
        best = np.maximum(best, np.where(actions[:, t] >= 0, run, 0))
    return best


def _rejection_sample(mdp, generate, accept, init_states, seed, stream, strict=True):
    """For each pair i draw candidate batches until one passes ``accept``.

    Round r uses a generator keyed by (seed, stream, r) and always draws
    CANDIDATES_PER_ROUND rows for every pair, so pair i's candidates depend
    only on (seed, stream, r, i).
    """
    n = len(init_states)
    k = CANDIDATES_PER_ROUND
    chosen: list = [None] * n
    stats = {"attempts": 0, "accepted": 0}
    for r in range(MAX_ROUNDS):
        pending = [i for i in range(n) if chosen[i] is None]
        if not pending:
            break
        rng = np.random.default_rng([seed, stream, r])
        starts = np.repeat(np.asarray(init_states), k)
        states, actions, lengths, _ = generate(rng, starts)
        ok = accept(states, actions, lengths, np.repeat(np.arange(n), k))
        for i in pending:
            stats["attempts"] += k
            hits = np.flatnonzero(ok[i * k:(i + 1) * k])
            if hits.size:
                j = i * k + hits[0]
                L = lengths[j]
                chosen[i] = Trajectory(tuple(zip(states[j, :L].tolist(), actions[j, :L].tolist())))
                stats["accepted"] += 1
    missing = [i for i in range(n) if chosen[i] is None]
    if missing and strict:
        raise GenerationExhaustedError(
            f"{len(missing)} of {n} pairs found no acceptable candidate in {MAX_ROUNDS * k} attempts"
        )
    return chosen, stats


def clean_lose_trajectories(mdp: Mdp, base_policy: TabularPolicy, n: int, seed: int, *,
                            wins: Sequence[Trajectory] | None = None,
                            gamma: float = DEFAULT_GAMMA) -> list:
    """Genuine base-policy rollouts that pass the repeat filter and score below their paired win.

    Without ``wins`` the pairing experts are generated from the same seed.
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    check_dims(mdp, base_policy)
    if wins is None:
        wins = expert_trajectories(mdp, n, seed, gamma)
    lose, _ = _clean_for(mdp, base_policy, wins, seed, gamma)
    return lose


def _clean_for(mdp, base_policy, wins, seed, gamma, stream=1):
    init = [w.initial_state for w in wins]
    win_ret = np.array([discounted_return(w, mdp, gamma) for w in wins])
    base = noisy_chooser(base_policy, NoiseSpec(0.0, 0.0), mdp.n_actions)

    def generate(rng, starts):
        return simulate(mdp, base, len(starts), rng, uniforms_per_step=3, init_states=starts)

    def accept(states, actions, lengths, owner):
        ret = _padded_returns(mdp, states, actions, gamma)
        return (_repeat_runs(actions) < REPEAT_FILTER) & (ret < win_ret[owner] - 1e-12)

    return _rejection_sample(mdp, generate, accept, init, seed, stream)


def _bucketed_noisy_for(mdp, base_policy, seed, noise, ceilings, per_bucket, gamma, stream=2):
    """Shared expert wins plus one lose per bucket for each of them.

    Some initial states admit no lose trajectory of a given length (a chain
    state next to the goal rarely survives twelve noisy steps), so the wins
    are drawn from a growing pool of expert episodes and the first
    ``per_bucket`` wins whose state fills every bucket are kept.
    """
    pool = per_bucket
    for _ in range(POOL_DOUBLINGS + 1):
        wins = expert_trajectories(mdp, pool, seed, gamma)
        init = [w.initial_state for w in wins]
        per_b, stats = [], {"attempts": 0, "accepted": 0}
        for b, ceiling in enumerate(ceilings):
            floor = ceilings[b - 1] if b > 0 else 0

            def generate(rng, starts, ceiling=ceiling):
                return _noisy_arrays(mdp, base_policy, len(starts), rng, noise, init_states=starts,
                                     horizon=ceiling)

            def accept(states, actions, lengths, owner, floor=floor, ceiling=ceiling):
                return (lengths > floor) & (lengths <= ceiling)

            got, st = _rejection_sample(mdp, generate, accept, init, seed, stream * 1000 + b, strict=False)
            per_b.append(got)
            for key in stats:
                stats[key] += st[key]
        keep = [i for i in range(pool) if all(got[i] is not None for got in per_b)][:per_bucket]
        if len(keep) == per_bucket:
            stats["expert_pool"] = pool
            wins = [wins[i] for i in keep]
            loses = [got[i] for got in per_b for i in keep]
            return wins * len(ceilings), loses, stats
        pool *= 2
    raise GenerationExhaustedError(
        f"only {len(keep)} of {pool // 2} initial states admit a lose trajectory in every length bucket"
    )


def build_dataset(mdp: Mdp, setting: str, n_pairs: int, seed: int, buckets: Sequence[int] | None = None, *,
                  base_policy: TabularPolicy | None = None, noise: NoiseSpec = NoiseSpec(),
                  gamma: float = DEFAULT_GAMMA, env_name: str | None = None):
    """Pair expert wins with lose trajectories from the same initial state.

    ``base_policy`` defaults to an SFT policy fit on the expert wins. With
    ``buckets`` (increasing ceilings, noisy setting) the pairs are split
    evenly; every bucket pairs the same expert wins with lose trajectories
    generated under a time limit of ceilings[b] and kept only if longer than
    ceilings[b-1].
    """
    if setting not in SETTINGS:
        raise ValidationError(f"setting must be one of {SETTINGS}")
    if n_pairs < 1:
        raise ValidationError("n_pairs must be >= 1")
    if not isinstance(noise, NoiseSpec):
        noise = NoiseSpec(**noise)
    ceilings = None
    if buckets:
        ceilings = [int(c) for c in buckets]
        if any(b <= a for a, b in zip(ceilings, ceilings[1:])) or ceilings[0] < 1:
            raise ValidationError("bucket ceilings must be positive and strictly increasing")
        if n_pairs % len(ceilings):
            raise ValidationError("n_pairs must divide evenly into the buckets")
        if ceilings[-1] > mdp.max_horizon:
            raise ValidationError("bucket ceilings may not exceed max_horizon")
    if ceilings and setting != "noisy":
        raise ValidationError("length buckets are defined for the noisy setting only")
    # with buckets, the reference is fit on the unfiltered expert prefix
    wins = expert_trajectories(mdp, n_pairs // len(ceilings) if ceilings else n_pairs, seed, gamma)
    if base_policy is None:
        from dmpo_lab.trainer import default_reference

        base_policy = default_reference(mdp, wins, seed)
    check_dims(mdp, base_policy)

    if ceilings:
        per = n_pairs // len(ceilings)
        # every bucket reuses the same wins, so only the lose lengths differ between buckets
        wins, loses, stats = _bucketed_noisy_for(mdp, base_policy, seed, noise, ceilings, per, gamma)
        length_buckets = [[c, per] for c in ceilings]
    elif setting == "clean":
        loses, stats = _clean_for(mdp, base_policy, wins, seed, gamma)
        length_buckets = None
    else:
        rng = np.random.default_rng([seed, 3])
        states, actions, lengths, _ = _noisy_arrays(
            mdp, base_policy, n_pairs, rng, noise, init_states=np.array([w.initial_state for w in wins]))
        loses = trajectories_from_arrays(states, actions, lengths)
        stats = {"attempts": n_pairs, "accepted": n_pairs}
        length_buckets = None

    pairs = [PreferencePair(w, l) for w, l in zip(wins, loses)]
    ordered = sum(discounted_return(p.win, mdp, gamma) >= discounted_return(p.lose, mdp, gamma) for p in pairs)
    manifest = DatasetManifest(
        setting=setting,
        pairs=len(pairs),
        seed=seed,
        env_name=env_name or mdp.name,
        length_buckets=length_buckets,
        extra={
            "gamma": gamma,
            "noise": asdict(noise) if setting == "noisy" else None,
            "win_return_ge_lose": int(ordered),
            "attempts": stats["attempts"],
            "accepted": stats["accepted"],
            "expert_pool": stats.get("expert_pool", len(wins)),
            "mean_win_length": float(np.mean([p.win.length for p in pairs])),
            "mean_lose_length": float(np.mean([p.lose.length for p in pairs])),
        },
    )
    return pairs, manifest


# -- persistence ---------------------------------------------------------------------

def dumps_pairs(pairs: Sequence[PreferencePair]) -> str:
    return "".join(json.dumps(p.to_dict(), separators=(",", ":")) + "\n" for p in pairs)


def save_dataset(pairs: Sequence[PreferencePair], manifest: DatasetManifest, path) -> tuple[Path, Path]:
    """Write ``path`` (JSON lines) and a sibling ``<stem>.manifest.json``."""
    path = Path(path)
    path.write_text(dumps_pairs(pairs))
    mpath = path.with_name(path.stem + ".manifest.json")
    mpath.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return path, mpath


def load_dataset(path) -> tuple[list, DatasetManifest]:
    path = Path(path)
    pairs = [PreferencePair.from_dict(json.loads(line)) for line in path.read_text().splitlines() if line.strip()]
    mpath = path.with_name(path.stem + ".manifest.json")
    manifest = DatasetManifest(**json.loads(mpath.read_text()))
    if manifest.pairs != len(pairs):
        raise ValidationError(f"manifest lists {manifest.pairs} pairs but the file holds {len(pairs)}")
    return pairs, manifest
