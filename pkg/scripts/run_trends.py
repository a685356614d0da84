#!/usr/bin/env python3
"""Train every config in scripts/configs and print a final-epoch summary table.

    python3 scripts/run_trends.py                 # all configs, CSVs under runs/
    python3 scripts/run_trends.py topK10 fw4-bw2  # a subset
    MPCOMPRESS_SEEDS=0,1 python3 scripts/run_trends.py

The table shows mean accuracy with compression on and off at the last epoch,
the paired on-minus-off gap with its standard error, and cumulative bytes.
"""

import argparse
import math
import statistics
import sys
import time
from pathlib import Path

from mpcompress.harness.config import load_config
from mpcompress.harness.runner import output_dir, run_experiment

CONFIGS = Path(__file__).parent / "configs"


def mean_se(xs):
    xs = [x for x in xs if x is not None]
    if not xs:
        return float("nan"), float("nan")
    se = statistics.stdev(xs) / math.sqrt(len(xs)) if len(xs) > 1 else float("nan")
    return statistics.fmean(xs), se


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("names", nargs="*", help="config names (file stems); default: all")
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args(argv)

    names = args.names or sorted(p.stem for p in CONFIGS.glob("*.json"))
    out = args.out or output_dir()
    print(f"{'config':<16}{'acc on':>16}{'acc off':>16}{'on-off':>16}{'MB fwd':>10}{'MB bwd':>10}{'sec':>7}")
    for name in names:
        cfg = load_config(CONFIGS / f"{name}.json")
        t0 = time.perf_counter()
        res = run_experiment(cfg, out)
        finals = [res.rows[s][-1] for s in cfg.seeds if res.rows[s]]
        on = mean_se([r.test_acc_on for r in finals])
        off = mean_se([r.test_acc_off for r in finals])
        gap = mean_se([r.test_acc_on - r.test_acc_off for r in finals if r.test_acc_on is not None and r.test_acc_off is not None])
        mb_f = statistics.fmean(r.bytes_forward for r in finals) / 1e6
        mb_b = statistics.fmean(r.bytes_backward for r in finals) / 1e6
        print(
            f"{name:<16}{on[0]:>9.3f}±{on[1]:.3f}{off[0]:>9.3f}±{off[1]:.3f}{gap[0]:>9.3f}±{gap[1]:.3f}"
            f"{mb_f:>10.2f}{mb_b:>10.2f}{time.perf_counter() - t0:>7.1f}"
        )
        sys.stdout.flush()


if __name__ == "__main__":
    main()
