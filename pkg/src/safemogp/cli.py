"""Command line entry point: ``run`` executes experiments, ``verify`` runs the bound corpus.

Exit codes: 0 success, 1 config error, 2 runtime failure, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .acquisition import Trajectory, initial_design, run_safe_al
from .config import ExperimentConfig, Pipeline, load_config
from .datasets import CsvSchema, csv_al_dataset, gen_mogp_samples, sin_sigmoid_dataset
from .errors import ConfigError, SafeMogpError
from .inference import make_rng
from .theory import CHECKS, run_corpus

log = logging.getLogger("safemogp")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3

TRAJECTORY_COLUMNS = (
    "pipeline", "repeat", "iteration", "n_sum", "queried_x", "queried_channel", "acq_score",
    "safety_prob", "truly_safe", "rmse_mean", "rmse_per_channel", "test_log_density",
    "safety_precision",
)
AGGREGATE_METRICS = ("n_sum", "rmse_mean", "test_log_density", "safety_precision", "truly_safe")

# stream ids under (seed, repeat): dataset, initial design, then one per pipeline
_STREAM_DATA, _STREAM_INIT = 0, 1
_PIPELINE_STREAM = {p: 2 + i for i, p in enumerate(Pipeline)}


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return "nan" if np.isnan(v) else repr(float(v))
    return str(v)


def _join(values):
    return ";".join(_fmt(float(v)) for v in np.ravel(values))


def trajectory_rows(traj: Trajectory):
    for r in traj.all_records():
        m = r.metrics
        yield [
            traj.pipeline.value, traj.repeat, r.iteration, r.n_sum,
            _join(r.queried_x) if r.queried_x is not None else "",
            _fmt(r.queried_channel), _fmt(r.acq_score), _fmt(r.safety_prob), _fmt(r.truly_safe),
            _fmt(m.rmse_mean), _join(m.rmse_per_channel), _fmt(m.test_log_density),
            _fmt(m.safety_precision),
        ]


def write_trajectory(path, traj: Trajectory):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        w.writerows(trajectory_rows(traj))


def read_trajectory(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def build_dataset(config: ExperimentConfig, repeat: int, cache=None):
    """The AL dataset of one repeat, derived from the base seed and repeat index."""
    spec, params = config.dataset, dict(config.dataset.params)
    if spec.kind == "sin_sigmoid":
        seed = [config.seed, repeat, _STREAM_DATA]
        return sin_sigmoid_dataset(params.get("n_pool", 200), params.get("n_test", 200), seed)
    if spec.kind == "mogp_samples":
        key = "mogp_samples"
        if cache is not None and key in cache:
            samples = cache[key]
        else:
            kwargs = {k: params[k] for k in ("D", "P", "L", "n_train", "n_test", "noise", "safety_noise")
                      if k in params}
            samples = gen_mogp_samples(repeats=config.repeats, seed=params.get("seed", config.seed), **kwargs)
            if cache is not None:
                cache[key] = samples
        return samples.repeat(repeat)
    schema_keys = ("input_columns", "output_columns", "safety_column", "test_fraction", "standardize")
    try:
        schema = CsvSchema(**{k: (tuple(params[k]) if isinstance(params[k], list) else params[k])
                              for k in schema_keys if k in params}, split_seed=config.seed + repeat)
        path = params["path"]
    except KeyError as exc:
        raise ConfigError(f"dataset.params.{exc.args[0]}", "required for csv datasets") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError("dataset.params", str(exc)) from None
    if config.safety.z_bar is None:
        raise ConfigError("safety.z_bar", "required for csv datasets")
    return csv_al_dataset(path, schema, config.safety.z_bar, config.safety.z_mode.value)


def run_repeat(config: ExperimentConfig, repeat: int, out_dir: Path, cache=None):
    """All pipelines of one repeat; writes one trajectory file per pipeline.

    Returns a manifest entry per pipeline.  Failures are caught per pipeline
    so that one numerical breakdown does not stop the others.
    """
    entries = []
    try:
        dataset = build_dataset(config, repeat, cache)
        if config.safety.z_bar is not None and config.dataset.kind == "csv":
            config = replace(config, safety=replace(config.safety, z_bar=None))
        init = initial_design(dataset, config.n_init, config.observation_mode,
                              make_rng([config.seed, repeat, _STREAM_INIT]))
    except ConfigError:
        raise
    except SafeMogpError as exc:
        return [{"pipeline": p.value, "repeat": repeat, "status": "failed", "error": str(exc)}
                for p in config.pipeline]
    for pipeline in config.pipeline:
        seed = [config.seed, repeat, _PIPELINE_STREAM[pipeline]]
        entry = {"pipeline": pipeline.value, "repeat": repeat, "seed": seed}
        try:
            traj = run_safe_al(config, dataset, make_rng(seed), pipeline=pipeline, init=init, repeat=repeat)
        except (SafeMogpError, ArithmeticError, np.linalg.LinAlgError) as exc:
            log.error("repeat %d %s failed: %s", repeat, pipeline.value, exc)
            entry.update(status="failed", error=str(exc), traceback=traceback.format_exc())
            entries.append(entry)
            continue
        path = out_dir / "trajectories" / f"{pipeline.value}_r{repeat:03d}.csv"
        write_trajectory(path, traj)
        entry.update(status=traj.status, skipped_iteration=traj.skipped_iteration, file=str(path.relative_to(out_dir)),
                     n_queries=len(traj.records), safe_query_fraction=traj.safe_query_fraction,
                     accept_rate=float(np.mean(traj.accept_rates)) if traj.accept_rates else None,
                     timing=[r.fit_seconds for r in traj.all_records()])
        entries.append(entry)
    return entries


def _repeat_job(args):
    config, repeat, out_dir = args
    return run_repeat(config, repeat, Path(out_dir))


def standard_error(values):
    values = np.asarray(values, dtype=float)
    values = values[~np.isnan(values)]
    if len(values) < 2:
        return float("nan")
    return float(np.std(values, ddof=1) / np.sqrt(len(values)))


def aggregate(out_dir: Path, entries):
    """Mean and standard error per (pipeline, iteration) across repeat files."""
    groups = {}
    for e in entries:
        if e.get("file"):
            for row in read_trajectory(out_dir / e["file"]):
                groups.setdefault((row["pipeline"], int(row["iteration"])), []).append(row)
    order = {p.value: i for i, p in enumerate(Pipeline)}
    header = ["pipeline", "iteration", "n_repeats"]
    for m in AGGREGATE_METRICS:
        header += [f"{m}_mean", f"{m}_se"]
    rows = []
    for (pipe, it), group in sorted(groups.items(), key=lambda kv: (order[kv[0][0]], kv[0][1])):
        row = [pipe, it, len(group)]
        for m in AGGREGATE_METRICS:
            vals = np.array([float(g[m]) if g[m] != "" else np.nan for g in group])
            finite = vals[~np.isnan(vals)]
            row += [_fmt(float(np.mean(finite)) if len(finite) else float("nan")), _fmt(standard_error(vals))]
        rows.append(row)
    with open(out_dir / "aggregate.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return rows


def write_timings(out_dir: Path, entries):
    with open(out_dir / "timings.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pipeline", "repeat", "iteration", "fit_seconds"])
        for e in entries:
            for it, t in enumerate(e.get("timing") or []):
                w.writerow([e["pipeline"], e["repeat"], it, f"{t:.6f}"])


def run_experiment(config: ExperimentConfig, out_dir, jobs=1):
    """Run every (pipeline, repeat), then write the aggregate and manifest.  Returns the manifest."""
    out_dir = Path(out_dir)
    (out_dir / "trajectories").mkdir(parents=True, exist_ok=True)
    entries = []
    if jobs > 1 and config.repeats > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for res in pool.map(_repeat_job, [(config, r, str(out_dir)) for r in range(config.repeats)]):
                entries.extend(res)
    else:
        cache = {}
        for r in range(config.repeats):
            entries.extend(run_repeat(config, r, out_dir, cache))
    aggregate(out_dir, entries)
    write_timings(out_dir, entries)
    manifest = {
        "config": config.to_dict(),
        "seed_scheme": "Philox stream [seed, repeat, stream]; stream 0 dataset, 1 initial design, "
                       + ", ".join(f"{v} {p.value}" for p, v in _PIPELINE_STREAM.items()),
        "versions": {"safemogp": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "runs": [{k: v for k, v in e.items() if k not in ("timing", "traceback")} for e in entries],
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    return manifest


def write_report(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["check", "lhs", "rhs", "slack", "holds", "precondition", "detail"])
        for r in rows:
            w.writerow([r.check, repr(float(r.lhs)), repr(float(r.rhs)), repr(float(r.slack)),
                        int(r.holds), int(r.precondition), r.detail])


def _u64(text):
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="safemogp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment described by a JSON config")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help="output directory (overrides output_dir)")
    run.add_argument("--seed", type=_u64, help="base seed (overrides seed)")
    run.add_argument("--jobs", type=_positive, default=1, help="repeats run in parallel")
    ver = sub.add_parser("verify", help="check the bound inequalities on a seeded random corpus")
    ver.add_argument("--seed", type=_u64, default=0)
    ver.add_argument("--count", type=_positive, default=1000, help="instances per check")
    ver.add_argument("--out", default="theory_report.csv")
    ver.add_argument("--checks", nargs="+", choices=CHECKS, default=list(CHECKS))
    ver.add_argument("--c1-scale", type=float, default=1.0, help=argparse.SUPPRESS)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "verify":
        rows = run_corpus(args.seed, args.count, tuple(args.checks), c1_scale=args.c1_scale)
        write_report(args.out, rows)
        failed = [r for r in rows if not r.holds]
        for check in args.checks:
            mine = [r for r in rows if r.check.startswith(check)]
            print(f"{check}: {sum(r.holds for r in mine)}/{len(mine)} hold, "
                  f"min slack {min(r.slack for r in mine):.3e}")
        return EXIT_VERIFY if failed else EXIT_OK
    try:
        config = load_config(args.config)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["output_dir"] = args.out
        config = replace(config, **overrides)
        manifest = run_experiment(config, config.output_dir, args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SafeMogpError, OSError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    failed = [r for r in manifest["runs"] if r["status"] == "failed"]
    print(f"{len(manifest['runs']) - len(failed)}/{len(manifest['runs'])} runs finished; "
          f"results in {config.output_dir}")
    return EXIT_RUNTIME if failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
