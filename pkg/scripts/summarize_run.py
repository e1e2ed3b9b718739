"""Print crossing points, final RMSE and safe-query rates of a finished run directory."""

import argparse

from safemogp.summary import format_summary, summarize_run

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("out_dir")
parser.add_argument("--threshold", type=float, default=0.4)
parser.add_argument("--curves", action="store_true", help="also print the seed-mean RMSE curves")
args = parser.parse_args()

summaries = summarize_run(args.out_dir)
print(format_summary(summaries, args.threshold))
if args.curves:
    for s in summaries.values():
        print(f"\n{s.pipeline}")
        for n, r, p in zip(s.n_sum, s.rmse_mean, s.safety_precision):
            print(f"  N_sum={n:5.0f}  rmse={r:.4f}  precision={p:.4f}")
