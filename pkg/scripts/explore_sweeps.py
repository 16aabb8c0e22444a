"""Hyperparameter grid for the two sweep directions (gamma argmax order, length drop order).

Prints one line per grid point so the sensitivity of each direction can be read off.
Usage: python3 scripts/explore_sweeps.py --axis length [--seeds 0 1 2 3 4]
"""

from __future__ import annotations

import argparse
import itertools

import numpy as np

from dmpo_lab.datagen import NoiseSpec, build_dataset, expert_trajectories
from dmpo_lab.losses import TrainConfig
from dmpo_lab.mdp import make_env
from dmpo_lab.trainer import default_reference, gamma_sweep, length_sweep

GRID = {"slip": (0.1, 0.2), "beta": (0.1, 1.0), "learning_rate": (0.1, 0.5), "epochs": (100, 400)}


def length_point(slip, beta, lr, epochs, gamma, seeds) -> tuple:
    mdp = make_env("chain", {"N": 10, "slip": slip, "max_horizon": 12})
    rows = []
    for seed in seeds:
        cfg = TrainConfig(beta=beta, gamma=gamma, learning_rate=lr, epochs=epochs, seed=seed)
        ref = default_reference(mdp, expert_trajectories(mdp, 60, seed), seed)
        rows += length_sweep(mdp, ref, cfg, (4, 8, 12), pairs_per_bucket=60, noise=NoiseSpec())
    mean = lambda k, b: np.mean([r.avg_final_reward for r in rows if r.group == k and r.x == b])
    return tuple(mean(k, 4.0) - mean(k, 12.0) for k in ("dmpo", "dpo_traj"))


def gamma_point(slip, beta, lr, epochs, seeds, gammas=(0.1, 0.3, 0.5, 0.7, 0.9, 0.99)) -> tuple:
    mdp = make_env("chain", {"N": 10, "slip": slip, "max_horizon": 8})
    rows = []
    for seed in seeds:
        cfg = TrainConfig(beta=beta, learning_rate=lr, epochs=epochs, seed=seed)
        data = {s: build_dataset(mdp, s, 200, seed)[0] for s in ("noisy", "clean")}
        ref = default_reference(mdp, [p.win for p in data["clean"]], seed)
        rows += gamma_sweep(mdp, data, ref, cfg, gammas)
    best = {}
    for s in ("noisy", "clean"):
        means = [np.mean([r.avg_final_reward for r in rows if r.group == s and r.x == g]) for g in gammas]
        best[s] = gammas[int(np.argmax(means))]
    return best["noisy"], best["clean"]


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--axis", choices=("gamma", "length"), required=True)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    args = ap.parse_args()
    for slip, beta, lr, epochs in itertools.product(*GRID.values()):
        tag = f"slip={slip} beta={beta} lr={lr} epochs={epochs}"
        if args.axis == "length":
            for gamma in (0.5, 0.9, 0.99):
                d_dmpo, d_dpo = length_point(slip, beta, lr, epochs, gamma, args.seeds)
                print(f"{tag} gamma={gamma}  drop dmpo {d_dmpo:.4f} dpo_traj {d_dpo:.4f}  "
                      f"{'holds' if d_dpo > d_dmpo else 'reversed'}")
        else:
            g_noisy, g_clean = gamma_point(slip, beta, lr, epochs, args.seeds)
            print(f"{tag}  argmax noisy {g_noisy:g} clean {g_clean:g}  {'holds' if g_noisy <= g_clean else 'reversed'}")
