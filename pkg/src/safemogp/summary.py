"""Read a finished run directory back and reduce it to the headline numbers."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class PipelineSummary:
    pipeline: str
    n_runs: int
    n_failed: int
    n_sum: np.ndarray
    rmse_mean: np.ndarray
    safety_precision: np.ndarray
    safe_query_fraction: float
    accept_rate: float

    def crossing(self, threshold):
        """First N_sum at which the seed-mean RMSE is at or below ``threshold`` (None if never)."""
        hit = np.flatnonzero(self.rmse_mean <= threshold)
        return int(self.n_sum[hit[0]]) if hit.size else None

    def rmse_at(self, n_sum):
        hit = np.flatnonzero(self.n_sum == n_sum)
        return float(self.rmse_mean[hit[0]]) if hit.size else float("nan")


def _float(text):
    return float(text) if text not in ("", None) else float("nan")


def summarize_run(out_dir) -> dict:
    """Per-pipeline curves from ``aggregate.csv`` plus run-level rates from ``manifest.json``."""
    out_dir = Path(out_dir)
    with open(out_dir / "aggregate.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    manifest = json.loads((out_dir / "manifest.json").read_text(encoding="utf-8"))
    result = {}
    for pipe in dict.fromkeys(r["pipeline"] for r in rows):
        mine = sorted((r for r in rows if r["pipeline"] == pipe), key=lambda r: int(r["iteration"]))
        runs = [e for e in manifest["runs"] if e["pipeline"] == pipe]
        ok = [e for e in runs if e["status"] != "failed"]
        fractions = [e["safe_query_fraction"] for e in ok if e.get("safe_query_fraction") is not None]
        accepts = [e["accept_rate"] for e in ok if e.get("accept_rate") is not None]
        result[pipe] = PipelineSummary(
            pipeline=pipe,
            n_runs=len(runs),
            n_failed=len(runs) - len(ok),
            n_sum=np.array([_float(r["n_sum_mean"]) for r in mine]),
            rmse_mean=np.array([_float(r["rmse_mean_mean"]) for r in mine]),
            safety_precision=np.array([_float(r["safety_precision_mean"]) for r in mine]),
            safe_query_fraction=float(np.mean(fractions)) if fractions else float("nan"),
            accept_rate=float(np.mean(accepts)) if accepts else float("nan"),
        )
    return result


def format_summary(summaries, threshold=0.4):
    lines = [f"{'pipeline':<16}{'runs':>6}{'failed':>8}{'N_sum@RMSE<=' + str(threshold):>18}"
             f"{'final RMSE':>12}{'safe frac':>11}{'accept':>8}"]
    for s in summaries.values():
        cross = s.crossing(threshold)
        lines.append(f"{s.pipeline:<16}{s.n_runs:>6}{s.n_failed:>8}{str(cross):>18}"
                     f"{s.rmse_mean[-1]:>12.4f}{s.safe_query_fraction:>11.3f}{s.accept_rate:>8.3f}")
    return "\n".join(lines)
