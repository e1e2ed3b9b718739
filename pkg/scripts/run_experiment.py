"""Run one experiment config and print the headline table.

    python scripts/run_experiment.py configs/sin_sigmoid_scaled.json --jobs 4
"""

import argparse
import sys
import time
from dataclasses import replace

from safemogp.cli import run_experiment
from safemogp.config import load_config
from safemogp.summary import format_summary, summarize_run


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("config")
    parser.add_argument("--out", help="output directory (default: the config's output_dir)")
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--repeats", type=int, help="override the number of repeats")
    parser.add_argument("--threshold", type=float, default=0.4, help="RMSE level for the crossing column")
    args = parser.parse_args()

    config = load_config(args.config)
    if args.repeats:
        config = replace(config, repeats=args.repeats)
    out = args.out or config.output_dir
    start = time.perf_counter()
    run_experiment(config, out, jobs=args.jobs)
    print(f"finished in {time.perf_counter() - start:.0f} s, results in {out}")
    print(format_summary(summarize_run(out), args.threshold))
    return 0


if __name__ == "__main__":
    sys.exit(main())
