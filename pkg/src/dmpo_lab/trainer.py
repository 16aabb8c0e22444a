"""Gradient-descent training on fixed data, per-epoch evaluation and the sweep experiments."""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import astuple, dataclass, fields
from typing import Sequence

import numpy as np

from dmpo_lab.datagen import NoiseSpec, PreferencePair, build_dataset
from dmpo_lab.errors import ConfigError, ValidationError
from dmpo_lab.losses import TrainConfig, compile_pairs, pair_objective, sft_grad, sft_loss
from dmpo_lab.mdp import (
    DEFAULT_GAMMA,
    Mdp,
    Trajectory,
    check_dims,
    expected_final_reward,
    policy_chooser,
    simulate,
    summarize,
)
from dmpo_lab.occupancy import off_support_rates, support_mask
from dmpo_lab.policy import TabularPolicy

METRICS_HEADER = ("epoch", "loss", "avg_reward", "avg_final_reward", "compounding_error", "pair_weight")
SWEEP_HEADER = ("setting/loss_kind", "gamma_or_bucket", "seed", "avg_final_reward")
EVAL_STREAM = 7919

# reference-model fit used when no explicit SFT config is given
SFT_DEFAULTS = TrainConfig(loss_kind="sft", learning_rate=1.0, epochs=200)


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    loss: float
    avg_reward: float
    avg_final_reward: float
    compounding_error: float
    pair_weight: float


@dataclass(frozen=True)
class SweepRow:
    group: str
    x: float
    seed: int
    avg_final_reward: float


def evaluate(mdp: Mdp, policy: TabularPolicy, mask: np.ndarray, n: int, seed: int,
             stochastic: bool = False, gamma: float = DEFAULT_GAMMA) -> tuple[float, float, float]:
    """(avg_reward, avg_final_reward, compounding_error) over n rollouts.

    The environment stream depends only on ``seed``, so every epoch and every
    method evaluated with the same seed faces identical slips.
    """
    rng = np.random.default_rng([seed, EVAL_STREAM])
    states, actions, lengths, ends = simulate(mdp, policy_chooser(policy, not stochastic), n, rng)
    rep = summarize(mdp, states, actions, lengths, ends, gamma)
    ce = float(np.mean(off_support_rates(states, actions, lengths, mask)))
    return rep.avg_return, rep.avg_final_reward, ce


def _sft_descent(policy: TabularPolicy, expert: Sequence[Trajectory], cfg: TrainConfig, on_epoch=None):
    for epoch in range(1, cfg.epochs + 1):
        policy.apply_update(-cfg.learning_rate * sft_grad(expert, policy))
        if on_epoch is not None:
            on_epoch(epoch)


def train_sft(mdp: Mdp, expert: Sequence[Trajectory], cfg: TrainConfig):
    """Full-batch descent on the expert NLL from uniform logits."""
    if not expert:
        raise ValidationError("expert set must be nonempty")
    policy = TabularPolicy.uniform(mdp.n_states, mdp.n_actions)
    mask = support_mask(expert, mdp.n_states, mdp.n_actions)
    records = []

    def log(epoch):
        rep = sft_loss(expert, policy)
        avg_r, avg_f, ce = evaluate(mdp, policy, mask, cfg.eval_episodes, cfg.seed, cfg.stochastic_eval)
        records.append(MetricsRecord(epoch, rep.value, avg_r, avg_f, ce, rep.pair_weight))

    _sft_descent(policy, expert, cfg, log)
    return policy, records


def default_reference(mdp: Mdp, wins: Sequence[Trajectory], seed: int, cfg: TrainConfig | None = None) -> TabularPolicy:
    """Frozen SFT policy fit on the expert wins (no evaluation pass)."""
    cfg = SFT_DEFAULTS.replace(seed=seed) if cfg is None else cfg
    policy = TabularPolicy.uniform(mdp.n_states, mdp.n_actions)
    _sft_descent(policy, list(wins), cfg)
    return policy.frozen_copy()


def train_preference(mdp: Mdp, dataset: Sequence[PreferencePair], ref: TabularPolicy, cfg: TrainConfig,
                     init: TabularPolicy | None = None, *, log: bool = True):
    """Mini-batch descent on the DMPO or trajectory-DPO loss, starting from ref.

    With ``log=False`` the per-epoch evaluation is skipped and no records are kept.
    """
    if cfg.loss_kind not in ("dmpo", "dpo_traj"):
        raise ConfigError("train_preference needs loss_kind dmpo or dpo_traj")
    if not dataset:
        raise ValidationError("dataset must be nonempty")
    if not ref.frozen:
        raise ConfigError("the reference policy must be frozen")
    check_dims(mdp, ref)
    policy = ref.trainable_copy() if init is None else init
    if policy.frozen:
        raise ConfigError("the trainable policy is frozen")
    steps = compile_pairs(dataset, cfg.gamma, discounted=cfg.loss_kind == "dmpo")
    mask = support_mask([p.win for p in dataset], mdp.n_states, mdp.n_actions)
    n = len(dataset)
    rng = np.random.default_rng(cfg.seed)
    records = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            subset = np.sort(order[start:start + cfg.batch_size])
            _, grad = pair_objective(steps, policy, ref, cfg.beta, subset)
            policy.apply_update(-cfg.learning_rate * grad)
        if not log:
            continue
        rep, _ = pair_objective(steps, policy, ref, cfg.beta, with_grad=False)
        avg_r, avg_f, ce = evaluate(mdp, policy, mask, cfg.eval_episodes, cfg.seed, cfg.stochastic_eval)
        records.append(MetricsRecord(epoch, rep.value, avg_r, avg_f, ce, rep.pair_weight))
    return policy, records


# -- sweeps --------------------------------------------------------------------------

def _threads() -> int:
    raw = os.environ.get("DMPO_LAB_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ConfigError("DMPO_LAB_THREADS must be an integer") from None
    return os.cpu_count() or 1


def _cell(args) -> float:
    mdp, dataset, ref, cfg = args
    policy, _ = train_preference(mdp, dataset, ref, cfg, log=False)
    return expected_final_reward(mdp, policy, temperature_zero=not cfg.stochastic_eval)


def run_cells(cells: list) -> list:
    """Train every (mdp, dataset, ref, cfg) cell; results come back in input order."""
    workers = min(_threads(), len(cells))
    if workers <= 1:
        return [_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_cell, cells))


def gamma_sweep(mdp: Mdp, datasets: dict, ref: TabularPolicy, cfg: TrainConfig, gammas: Sequence[float]) -> list:
    """One DMPO run per (setting, gamma); cells report the exact expected final reward."""
    if not gammas:
        raise ValidationError("need at least one gamma")
    for g in gammas:
        if not 0.0 <= g < 1.0:
            raise ValidationError(f"gamma {g} outside [0, 1)")
    keys = [(setting, float(g)) for setting in datasets for g in gammas]
    cells = [(mdp, datasets[s], ref, cfg.replace(gamma=g, loss_kind="dmpo")) for s, g in keys]
    return [SweepRow(s, g, cfg.seed, v) for (s, g), v in zip(keys, run_cells(cells))]


def split_buckets(pairs: Sequence[PreferencePair], n_buckets: int) -> list:
    per = len(pairs) // n_buckets
    return [list(pairs[b * per:(b + 1) * per]) for b in range(n_buckets)]


def length_sweep(mdp: Mdp, ref: TabularPolicy, cfg: TrainConfig, buckets: Sequence[int], *,
                 pairs_per_bucket: int = 60, noise: NoiseSpec = NoiseSpec(),
                 loss_kinds: Sequence[str] = ("dmpo", "dpo_traj")) -> list:
    """Train each loss on each lose-length bucket of one noisy dataset."""
    if len(buckets) < 1:
        raise ValidationError("need at least one bucket")
    pairs, _ = build_dataset(mdp, "noisy", pairs_per_bucket * len(buckets), cfg.seed, buckets,
                             base_policy=ref, noise=noise)
    parts = split_buckets(pairs, len(buckets))
    keys = [(kind, b) for kind in loss_kinds for b in range(len(buckets))]
    cells = [(mdp, parts[b], ref, cfg.replace(loss_kind=kind)) for kind, b in keys]
    return [SweepRow(kind, float(buckets[b]), cfg.seed, v) for (kind, b), v in zip(keys, run_cells(cells))]


# -- CSV -----------------------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def metrics_csv(records: Sequence[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in records:
        w.writerow([_fmt(v) for v in astuple(r)])
    return buf.getvalue()


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow([r.group, _fmt(r.x), r.seed, _fmt(r.avg_final_reward)])
    return buf.getvalue()


def read_sweep_csv(text: str) -> list:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != SWEEP_HEADER:
        raise ValidationError("not a sweep table")
    return [SweepRow(g, float(x), int(s), float(v)) for g, x, s, v in reader]


assert tuple(f.name for f in fields(MetricsRecord)) == METRICS_HEADER
