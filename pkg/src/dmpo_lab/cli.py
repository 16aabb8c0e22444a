"""``dmpo-lab`` command line: gen, train, verify, sweep.

Exit codes: 0 success, 1 verification failure, 2 config or validation
error, 3 I/O error. Every file is written under the configured output_dir.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from dmpo_lab.config import ExperimentConfig
from dmpo_lab.datagen import build_dataset, expert_trajectories, load_dataset, save_dataset
from dmpo_lab.errors import DmpoLabError
from dmpo_lab.mdp import make_env
from dmpo_lab.policy import TabularPolicy
from dmpo_lab.trainer import (
    default_reference,
    gamma_sweep,
    length_sweep,
    metrics_csv,
    sweep_csv,
    train_preference,
    train_sft,
)

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

DATASET_FILE = "dataset.jsonl"
POLICY_FILE = "policy.json"
REFERENCE_FILE = "reference.json"
METRICS_FILE = "metrics.csv"
CONFIG_FILE = "config.yaml"
VERIFY_FILE = "verify_report.json"


def _out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text)
    print(f"wrote {path}")


def _dataset(cfg: ExperimentConfig, mdp, seed: int):
    if cfg.dataset.path:
        return load_dataset(cfg.dataset.path)
    return build_dataset(mdp, cfg.setting, cfg.dataset.n_pairs, seed, cfg.dataset.buckets,
                         noise=cfg.dataset.noise, env_name=cfg.env.name)


def cmd_gen(cfg: ExperimentConfig) -> int:
    mdp = make_env(cfg.env.name, cfg.env.params)
    pairs, manifest = build_dataset(mdp, cfg.setting, cfg.dataset.n_pairs, cfg.train.seed, cfg.dataset.buckets,
                                    noise=cfg.dataset.noise, env_name=cfg.env.name)
    out = _out(cfg)
    path, mpath = save_dataset(pairs, manifest, out / DATASET_FILE)
    print(f"wrote {path} ({manifest.pairs} pairs) and {mpath}")
    _write(out / CONFIG_FILE, cfg.to_yaml())
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig) -> int:
    mdp = make_env(cfg.env.name, cfg.env.params)
    out = _out(cfg)
    seed = cfg.train.seed
    if cfg.train.loss_kind == "sft":
        wins = expert_trajectories(mdp, cfg.dataset.n_pairs, seed)
        policy, records = train_sft(mdp, wins, cfg.train)
        policy = policy.frozen_copy()  # an SFT run produces a reference model
    else:
        pairs, _ = _dataset(cfg, mdp, seed)
        if cfg.reference:
            ref = TabularPolicy.from_json(Path(cfg.reference).read_text()).frozen_copy()
        else:
            ref = default_reference(mdp, [p.win for p in pairs], seed)
            _write(out / REFERENCE_FILE, ref.to_json() + "\n")
        policy, records = train_preference(mdp, pairs, ref, cfg.train)
    _write(out / POLICY_FILE, policy.to_json() + "\n")
    _write(out / METRICS_FILE, metrics_csv(records))
    _write(out / CONFIG_FILE, cfg.to_yaml())
    last = records[-1] if records else None
    if last is not None:
        print(f"final epoch {last.epoch}: loss {last.loss:.6f}, avg_final_reward {last.avg_final_reward:.4f}, "
              f"compounding_error {last.compounding_error:.4f}")
    return EXIT_OK


def cmd_verify(output_dir: str | None, seed: int | None) -> int:
    from dmpo_lab.verify import VERIFY_SEED, run_all

    results = run_all(VERIFY_SEED if seed is None else seed)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:32s} measured={r.measured:.3e}  tol={r.tolerance:.0e}  "
              f"({r.seconds:.2f}s)  {r.detail}")
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write(out / VERIFY_FILE, json.dumps([r.to_dict() for r in results], indent=2) + "\n")
    ok = all(r.passed for r in results)
    print("all checks passed" if ok else "verification FAILED")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_sweep(cfg: ExperimentConfig, axis: str) -> int:
    mdp = make_env(cfg.env.name, cfg.env.params)
    rows = []
    for seed in cfg.sweep.seeds:
        train = cfg.train.replace(seed=seed)
        if axis == "gamma":
            datasets = {}
            for setting in cfg.sweep.settings:
                datasets[setting], _ = build_dataset(mdp, setting, cfg.dataset.n_pairs, seed,
                                                     noise=cfg.dataset.noise, env_name=cfg.env.name)
            # both settings pair the same expert wins, so one reference serves both
            wins = [p.win for p in next(iter(datasets.values()))]
            ref = default_reference(mdp, wins, seed)
            rows += gamma_sweep(mdp, datasets, ref, train, cfg.sweep.gammas)
        else:
            if not cfg.dataset.buckets:
                raise DmpoLabError("length sweep needs dataset.buckets")
            ref = default_reference(mdp, expert_trajectories(mdp, cfg.sweep.pairs_per_bucket, seed), seed)
            rows += length_sweep(mdp, ref, train, cfg.dataset.buckets,
                                 pairs_per_bucket=cfg.sweep.pairs_per_bucket, noise=cfg.dataset.noise)
    out = _out(cfg)
    _write(out / f"sweep_{axis}.csv", sweep_csv(rows))
    _write(out / CONFIG_FILE, cfg.to_yaml())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmpo-lab", description="DMPO experiments on exactly solvable MDPs.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_config=True):
        if with_config:
            p.add_argument("--config", required=True, help="YAML experiment config (keys match ExperimentConfig)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the run seed (for sweeps: run this single seed)")
        p.add_argument("--output-dir", default=None, help="override output_dir; all files are written here")

    common(sub.add_parser("gen", help="generate a preference dataset and its manifest"))
    common(sub.add_parser("train", help="train sft, dmpo or dpo_traj; writes policy.json and metrics.csv"))
    common(sub.add_parser("verify", help="run the exact-math check battery"), with_config=False)
    p = sub.add_parser("sweep", help="gamma or lose-length sweep; writes sweep_<axis>.csv")
    common(p)
    p.add_argument("--axis", choices=("gamma", "length"), required=True, help="which sweep to run")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            return cmd_verify(args.output_dir, args.seed)
        cfg = ExperimentConfig.load(args.config).with_overrides(seed=args.seed, output_dir=args.output_dir)
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        return cmd_sweep(cfg, args.axis)
    except DmpoLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
