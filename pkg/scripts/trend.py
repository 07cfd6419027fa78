"""Train on 5 seeds and compare fused vs naive rank-1 across probe sizes, plus an M sweep.

Usage: python scripts/trend.py [--out results.json] [--quick]
"""

import argparse
import dataclasses
import json
import logging

from caface.experiments import TrendConfig, run_trend


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out")
    ap.add_argument("--quick", action="store_true", help="2 seeds, smaller gallery")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = TrendConfig()
    if args.quick:
        cfg = dataclasses.replace(cfg, seeds=(0, 1), eval_ids=300)
    summary = run_trend(cfg).summary()
    text = json.dumps(summary, indent=2)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")


if __name__ == "__main__":
    main()
