import numpy as np
import pytest

from dmpo_lab.datagen import build_dataset, expert_trajectories, value_iteration
from dmpo_lab.errors import ConfigError, ValidationError
from dmpo_lab.losses import TrainConfig, dmpo_loss, sft_loss
from dmpo_lab.mdp import Mdp, Trajectory, make_env
from dmpo_lab.policy import TabularPolicy
from dmpo_lab.trainer import (
    METRICS_HEADER,
    SWEEP_HEADER,
    SweepRow,
    default_reference,
    gamma_sweep,
    length_sweep,
    metrics_csv,
    read_sweep_csv,
    run_cells,
    split_buckets,
    sweep_csv,
    train_preference,
    train_sft,
)

FAST = TrainConfig(epochs=20, eval_episodes=50)


@pytest.fixture(scope="module")
def chain():
    return make_env("chain", {"N": 6, "slip": 0.1, "max_horizon": 8})


@pytest.fixture(scope="module")
def clean(chain):
    pairs, _ = build_dataset(chain, "clean", 40, seed=0)
    return pairs


@pytest.fixture(scope="module")
def ref(chain, clean):
    return default_reference(chain, [p.win for p in clean], seed=0)


def test_sft_learns_a_single_pair():
    mdp = Mdp(np.ones((1, 3, 1)), np.zeros((1, 3)), [1.0], frozenset(), 1)
    policy, records = train_sft(mdp, [Trajectory(((0, 2),))], TrainConfig(loss_kind="sft", learning_rate=1.0,
                                                                           epochs=200, eval_episodes=1))
    assert policy.probs()[0, 2] > 0.99
    assert [r.epoch for r in records] == list(range(1, 201))


def test_sft_loss_is_monotone_for_small_steps(chain):
    wins = expert_trajectories(chain, 30, seed=1)
    _, records = train_sft(chain, wins, TrainConfig(loss_kind="sft", learning_rate=0.05, epochs=40, eval_episodes=5))
    losses = [r.loss for r in records]
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_sft_matches_expert_on_visited_states():
    mdp = make_env("chain", {"N": 10, "slip": 0.0})
    wins = expert_trajectories(mdp, 50, seed=2)
    policy, _ = train_sft(mdp, wins, TrainConfig(loss_kind="sft", learning_rate=1.0, epochs=100, eval_episodes=5))
    _, greedy = value_iteration(mdp)
    for t in wins:
        for s, a in t.steps:
            assert np.argmax(policy.logits[s]) == a == greedy[0, s]


def test_default_reference_is_frozen(chain, clean):
    ref = default_reference(chain, [p.win for p in clean], seed=0)
    assert ref.frozen


def test_zero_epochs_returns_reference(chain, clean, ref):
    policy, records = train_preference(chain, clean, ref, FAST.replace(epochs=0))
    assert np.array_equal(policy.logits, ref.logits) and records == []
    assert not policy.frozen


def test_training_separates_wins_from_loses(chain, clean, ref):
    policy, records = train_preference(chain, clean, ref, FAST)
    rep = dmpo_loss(clean, policy, ref, FAST)
    assert rep.win_score - rep.lose_score > 0
    assert records[-1].loss < np.log(2)


def test_reference_is_never_modified(chain, clean, ref):
    digest = ref.digest()
    for kind in ("dmpo", "dpo_traj"):
        train_preference(chain, clean, ref, FAST.replace(loss_kind=kind))
    assert ref.digest() == digest


def test_training_is_deterministic(chain, clean, ref):
    a, ra = train_preference(chain, clean, ref, FAST.replace(seed=3))
    b, rb = train_preference(chain, clean, ref, FAST.replace(seed=3))
    assert a.digest() == b.digest() and metrics_csv(ra) == metrics_csv(rb)


def test_metric_records_are_well_formed(chain, clean, ref):
    _, records = train_preference(chain, clean, ref, FAST)
    assert [r.epoch for r in records] == list(range(1, FAST.epochs + 1))
    assert all(0.0 <= r.compounding_error <= 1.0 for r in records)
    assert all(0.0 < r.pair_weight < 1.0 for r in records)
    text = metrics_csv(records)
    assert text.splitlines()[0] == ",".join(METRICS_HEADER)
    assert len(text.splitlines()) == FAST.epochs + 1


def test_train_preference_preconditions(chain, clean, ref):
    with pytest.raises(ConfigError):
        train_preference(chain, clean, ref.trainable_copy(), FAST)
    with pytest.raises(ConfigError):
        train_preference(chain, clean, ref, FAST.replace(loss_kind="sft"))
    with pytest.raises(ValidationError):
        train_preference(chain, [], ref, FAST)
    with pytest.raises(ConfigError):
        train_preference(chain, clean, TabularPolicy.uniform(2, 3, frozen=True), FAST)


def test_gamma_sweep_shape_and_single_cell(chain, clean, ref):
    rows = gamma_sweep(chain, {"clean": clean}, ref, FAST, [0.5])
    assert len(rows) == 1 and rows[0].group == "clean" and rows[0].x == 0.5
    noisy, _ = build_dataset(chain, "noisy", 40, seed=0)
    rows = gamma_sweep(chain, {"noisy": noisy, "clean": clean}, ref, FAST, [0.3, 0.6, 0.9])
    assert [(r.group, r.x) for r in rows] == [(s, g) for s in ("noisy", "clean") for g in (0.3, 0.6, 0.9)]
    with pytest.raises(ValidationError):
        gamma_sweep(chain, {"clean": clean}, ref, FAST, [1.0])


def test_gamma_sweep_cell_equals_direct_training(chain, clean, ref):
    from dmpo_lab.mdp import expected_final_reward

    row = gamma_sweep(chain, {"clean": clean}, ref, FAST, [0.7])[0]
    policy, _ = train_preference(chain, clean, ref, FAST.replace(gamma=0.7))
    assert row.avg_final_reward == expected_final_reward(chain, policy)


def test_length_sweep_rows(ref):
    mdp = make_env("chain", {"N": 6, "slip": 0.1, "max_horizon": 12})
    ref = default_reference(mdp, expert_trajectories(mdp, 10, 0), 0)
    rows = length_sweep(mdp, ref, FAST, (4, 8, 12), pairs_per_bucket=10)
    assert len(rows) == 6
    assert {(r.group, r.x) for r in rows} == {(k, float(b)) for k in ("dmpo", "dpo_traj") for b in (4, 8, 12)}


def test_split_buckets():
    assert split_buckets(list(range(6)), 3) == [[0, 1], [2, 3], [4, 5]]


def test_parallel_cells_match_serial(monkeypatch, chain, clean, ref):
    cells = [(chain, clean, ref, FAST.replace(gamma=g)) for g in (0.2, 0.8)]
    monkeypatch.setenv("DMPO_LAB_THREADS", "1")
    serial = run_cells(cells)
    monkeypatch.setenv("DMPO_LAB_THREADS", "2")
    assert run_cells(cells) == serial
    monkeypatch.setenv("DMPO_LAB_THREADS", "many")
    with pytest.raises(ConfigError):
        run_cells(cells)


def test_sweep_csv_round_trip():
    rows = [SweepRow("noisy", 0.1, 0, 0.75), SweepRow("dpo_traj", 12.0, 4, 1 / 3)]
    text = sweep_csv(rows)
    assert text.splitlines()[0] == ",".join(SWEEP_HEADER)
    assert read_sweep_csv(text) == rows
    with pytest.raises(ValidationError):
        read_sweep_csv("a,b\n")


def test_sft_loss_at_uniform_start(chain):
    wins = expert_trajectories(chain, 5, seed=0)
    assert sft_loss(wins, TabularPolicy.uniform(chain.n_states, chain.n_actions)).value == pytest.approx(np.log(3))
