"""Discount-factor sweep on noisy and clean pairs; prints the mean curve per setting.

Usage: python3 scripts/run_gamma_sweep.py [--config configs/gamma_sweep.yaml] [--output-dir runs/gamma_sweep]
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from dmpo_lab.cli import main
from dmpo_lab.trainer import read_sweep_csv

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def summarize(rows) -> dict:
    curves = {}
    for group in dict.fromkeys(r.group for r in rows):
        xs = sorted({r.x for r in rows if r.group == group})
        curves[group] = {x: float(np.mean([r.avg_final_reward for r in rows if r.group == group and r.x == x]))
                         for x in xs}
    return curves


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=CONFIGS / "gamma_sweep.yaml")
    ap.add_argument("--output-dir", type=Path, default=Path("runs/gamma_sweep"))
    args = ap.parse_args()
    code = main(["sweep", "--config", str(args.config), "--axis", "gamma", "--output-dir", str(args.output_dir)])
    if code:
        raise SystemExit(code)
    for group, curve in summarize(read_sweep_csv((args.output_dir / "sweep_gamma.csv").read_text())).items():
        best = max(curve, key=curve.get)
        print(f"{group:6s} argmax gamma {best:g}  " + " ".join(f"{g:g}:{v:.4f}" for g, v in curve.items()))
