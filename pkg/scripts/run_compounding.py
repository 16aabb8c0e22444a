"""SFT vs DMPO on clean chain pairs: final reward and compounding error over seeds.

Usage: python3 scripts/run_compounding.py [--seeds 0 1 2 3 4] [--output-dir runs/compounding]
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from dmpo_lab.cli import main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def final_row(path: Path) -> dict:
    header, *rows = path.read_text().splitlines()
    return dict(zip(header.split(","), map(float, rows[-1].split(","))))


def run(seeds, output_dir: Path) -> dict:
    finals = {"sft": [], "dmpo": []}
    for seed in seeds:
        for kind, cfg in (("sft", "chain_sft.yaml"), ("dmpo", "chain_clean.yaml")):
            out = output_dir / f"{kind}_{seed}"
            code = main(["train", "--config", str(CONFIGS / cfg), "--seed", str(seed), "--output-dir", str(out)])
            if code:
                raise SystemExit(code)
            finals[kind].append(final_row(out / "metrics.csv"))
    return finals


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--output-dir", type=Path, default=Path("runs/compounding"))
    args = ap.parse_args()
    finals = run(args.seeds, args.output_dir)
    for kind, rows in finals.items():
        r = np.mean([f["avg_final_reward"] for f in rows])
        ce = np.mean([f["compounding_error"] for f in rows])
        print(f"{kind:5s} avg_final_reward {r:.4f}  compounding_error {ce:.4f}")
