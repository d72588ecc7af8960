"""Decision-latency sweep over grid sizes 10/20/50/100 devices.

Runs a fixed balanced policy (no training) and reports the mean per-step
decision latency of the simulated pipeline at each size. Finishes in a few
seconds; writes fig4_latency.csv under results/sweep/.
"""

import argparse
import sys
from pathlib import Path

from iotrl import cli

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(ROOT / "results" / "sweep"))
    ap.add_argument("--counts", default=None, help="comma-separated ascending totals")
    args = ap.parse_args()
    argv = ["sweep-latency", "--out", args.out]
    if args.counts:
        argv += ["--counts", args.counts]
    return cli.main(argv)


if __name__ == "__main__":
    sys.exit(main())
