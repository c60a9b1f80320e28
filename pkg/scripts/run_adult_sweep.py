#!/usr/bin/env python
"""Run the full Adult epsilon sweep: non-private baseline, DPSGD, ExpM+NF.

Usage: python scripts/run_adult_sweep.py [--jobs N] [--smoke]
Expects data/adult_prepared.csv (see `expmnf prepare-data`).
"""

import argparse
from pathlib import Path

from expmnf.cli import load_config, run_experiment

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--smoke", action="store_true")
    args = ap.parse_args()
    for name in ("adult_nonprivate", "adult_dpsgd", "adult_expmnf"):
        config = load_config(ROOT / "configs" / f"{name}.toml")
        print(f"=== {name} ===")
        manifest = run_experiment(config, jobs=args.jobs, smoke=args.smoke)
        print(f"wall {manifest['wall_s']:.1f}s  digests {manifest['digests']}")


if __name__ == "__main__":
    main()
