"""Lose-length sweep: dmpo vs trajectory-level DPO per bucket, with the short-to-long drop.

Usage: python3 scripts/run_length_sweep.py [--config configs/length_sweep.yaml] [--output-dir runs/length_sweep]
"""

from __future__ import annotations

import argparse
from pathlib import Path

from dmpo_lab.cli import main
from dmpo_lab.trainer import read_sweep_csv

from run_gamma_sweep import summarize

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=CONFIGS / "length_sweep.yaml")
    ap.add_argument("--output-dir", type=Path, default=Path("runs/length_sweep"))
    args = ap.parse_args()
    code = main(["sweep", "--config", str(args.config), "--axis", "length", "--output-dir", str(args.output_dir)])
    if code:
        raise SystemExit(code)
    for kind, curve in summarize(read_sweep_csv((args.output_dir / "sweep_length.csv").read_text())).items():
        xs = sorted(curve)
        print(f"{kind:8s} drop {curve[xs[0]] - curve[xs[-1]]:.4f}  " + " ".join(f"{b:g}:{v:.4f}" for b, v in curve.items()))
