"""Single-target protocol with the default synthetic domains; prints the results table.

    python scripts/run_st.py --out results
    python scripts/run_st.py --seeds 0 --steps 200     # quick look
"""
import argparse
import logging
import time
from dataclasses import replace

from sasa.bench import ProtocolSpec, run_protocol_st
from sasa.evalmetrics import table_st


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="results")
    ap.add_argument("--seeds", type=int, nargs="+", default=None)
    ap.add_argument("--steps", type=int, default=None, help="adaptation steps per method")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    spec = ProtocolSpec()
    if args.seeds:
        spec = replace(spec, seeds=tuple(args.seeds))
    if args.steps:
        spec = replace(spec, train=replace(spec.train, steps=args.steps))
    t0 = time.time()
    res = run_protocol_st(spec, args.out)
    print(table_st(res))
    print(f"wall time {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
