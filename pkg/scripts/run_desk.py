"""Desk-scale training run: one transformer-ppo agent on the 12-device grid.

Takes about 40 seconds and writes train_metrics.csv, resolved_config.cfg,
and run_summary.json under results/desk/ (see --out). Good smoke test that
the whole pipeline behaves before launching anything bigger.
"""

import argparse
import sys
from pathlib import Path

from iotrl import cli

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(ROOT / "results" / "desk"))
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--episodes", type=int, default=200)
    args = ap.parse_args()
    return cli.main([
        "train",
        "--config", str(ROOT / "configs" / "desk.cfg"),
        "--seed", str(args.seed),
        "--out", args.out,
        "--override", f"train.n_episodes={args.episodes}",
    ])


if __name__ == "__main__":
    sys.exit(main())
