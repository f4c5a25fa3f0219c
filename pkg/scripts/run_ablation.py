"""Ablation grid on one target with a pinned few-shot draw.

    python scripts/run_ablation.py --out results --target target-2
"""
import argparse
import logging
import time
from dataclasses import replace

from sasa.bench import ProtocolSpec, ablation_spec, run_ablation


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="results")
    ap.add_argument("--target", default="target-2")
    ap.add_argument("--seeds", type=int, nargs="+", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base = ProtocolSpec()
    if args.seeds:
        base = replace(base, seeds=tuple(args.seeds))
    t0 = time.time()
    rows = run_ablation(ablation_spec(base, args.target), args.out)
    flags = ("use_aux", "use_lfc", "use_cont", "use_adv", "progressive")
    print(f"{'method':22s} " + " ".join(f"{f[4:] if f.startswith('use_') else 'prog':>5s}" for f in flags)
          + "  src ACER(%)  tgt HTER(%)")
    for r in rows:
        marks = " ".join(f"{'x' if r.flags[f] else '.':>5s}" for f in flags)
        print(f"{r.method.name:22s} {marks}  {100 * r.source_acer:11.2f}  {100 * r.target_hter:11.2f}")
    print(f"wall time {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
