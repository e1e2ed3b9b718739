"""Entropy acquisition under a probabilistic safety constraint, and the safe AL loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .config import (
    ExperimentConfig,
    InferenceMethod,
    ObservationMode,
    Pipeline,
    SafetySpec,
    ZMode,
)
from .datasets import ALDataset, TestSet
from .errors import EmptySafeSet, InputError, NumericalError
from .gp_models import GPPosterior, HyperLayout, ObservationSet, PosteriorGaussian
from .inference import hmc_chain, log_posterior, make_rng, moment_match, moment_match_scalar, optimize_hyperparameters

log = logging.getLogger(__name__)

LOG_2PI_E = np.log(2.0 * np.pi * np.e)


def entropy_score(cov, R=None) -> float:
    """Differential entropy 0.5 log|cov| + (R/2) log(2 pi e) of a Gaussian."""
    cov = np.array(cov, dtype=float, ndmin=2)
    R = cov.shape[0] if R is None else R
    if cov.shape != (R, R):
        raise InputError(f"covariance must be {R}x{R}")
    sign, logdet = np.linalg.slogdet(0.5 * (cov + cov.T))
    if sign < 0 or not np.isfinite(logdet) and sign != 0:
        raise NumericalError("covariance determinant is negative or not finite")
    if sign == 0:
        return -np.inf
    return float(0.5 * logdet + 0.5 * R * LOG_2PI_E)


def entropy_scores(variances_or_covs):
    """Vectorized entropy for an array of variances (M,) or covariances (M, R, R)."""
    a = np.asarray(variances_or_covs, dtype=float)
    if a.ndim == 3:
        sign, logdet = np.linalg.slogdet(a)
        logdet = np.where(sign > 0, logdet, -np.inf)
        return 0.5 * logdet + 0.5 * a.shape[-1] * LOG_2PI_E
    with np.errstate(divide="ignore"):
        return 0.5 * np.log(a) + 0.5 * LOG_2PI_E


def safety_probability(post, spec: SafetySpec, var=None):
    """Posterior probability that h(x) respects the threshold.

    Accepts a scalar ``PosteriorGaussian`` or means (with ``var``) as arrays.
    Zero variance degenerates to an indicator.
    """
    if spec.z_bar is None:
        raise InputError("safety threshold is unset")
    if isinstance(post, PosteriorGaussian):
        mean, var = post.mean[0], post.cov[0, 0]
    else:
        mean = post
    mean = np.asarray(mean, dtype=float)
    var = np.maximum(np.asarray(var, dtype=float), 0.0)
    sd = np.sqrt(var)
    u = (spec.z_bar - mean) / np.where(sd > 0, sd, 1.0)
    if spec.z_mode is ZMode.UPPER:
        prob = np.where(sd > 0, norm.cdf(u), (mean < spec.z_bar).astype(float))
    else:
        prob = np.where(sd > 0, norm.sf(u), (mean > spec.z_bar).astype(float))
    return float(prob) if prob.ndim == 0 else prob


def _argmax_random(scores, rng):
    best = np.max(scores)
    ties = np.flatnonzero(scores == best)
    if len(ties) == 1:
        return int(ties[0])
    rng = make_rng(0 if rng is None else rng)
    return int(ties[rng.integers(len(ties))])


def select_safe(scores, safe_probs, delta, rng=None, available=None):
    """Index of the best-scoring candidate with safety probability > 1 - delta."""
    scores = np.asarray(scores, dtype=float)
    ok = np.asarray(safe_probs, dtype=float) > 1.0 - delta
    if available is not None:
        ok &= available
    idx = np.flatnonzero(ok)
    if len(idx) == 0:
        raise EmptySafeSet("no candidate passes the safety constraint")
    return int(idx[_argmax_random(scores[idx], rng)])


def safe_query(main_posteriors, safety_posteriors, spec: SafetySpec, rng=None) -> int:
    """Exhaustive constrained argmax of the entropy over per-candidate posteriors."""
    if len(main_posteriors) != len(safety_posteriors):
        raise InputError("need one safety posterior per candidate")
    scores = np.array([entropy_score(p.cov) for p in main_posteriors])
    probs = np.array([safety_probability(p, spec) for p in safety_posteriors])
    return select_safe(scores, probs, spec.delta, rng)


def random_safe_query(safety_posteriors, spec: SafetySpec, rng) -> int:
    """Uniform choice among candidates passing the safety constraint."""
    probs = np.array([safety_probability(p, spec) if isinstance(p, PosteriorGaussian) else p
                      for p in safety_posteriors])
    return select_random_safe(probs, spec.delta, rng)


def select_random_safe(safe_probs, delta, rng, available=None):
    ok = np.asarray(safe_probs, dtype=float) > 1.0 - delta
    if available is not None:
        ok &= available
    idx = np.flatnonzero(ok)
    if len(idx) == 0:
        raise EmptySafeSet("no candidate passes the safety constraint")
    return int(idx[make_rng(rng).integers(len(idx))])


@dataclass
class Metrics:
    rmse_per_channel: np.ndarray
    rmse_mean: float
    test_log_density: float
    safety_precision: float = float("nan")


def evaluate_metrics(means, variances, targets, flagged_safe=None, truly_safe=None) -> Metrics:
    """RMSE per channel, mean Gaussian log density per (point, channel) entry, and
    safety precision (fraction of flagged-safe points that are truly safe)."""
    means = np.array(means, dtype=float, ndmin=2)
    variances = np.array(variances, dtype=float, ndmin=2)
    targets = np.array(targets, dtype=float, ndmin=2)
    if targets.size == 0:
        raise InputError("empty test set")
    if means.shape != targets.shape or variances.shape != targets.shape:
        raise InputError("prediction and target shapes differ")
    err = means - targets
    rmse = np.sqrt(np.mean(err ** 2, axis=0))
    with np.errstate(divide="ignore"):
        logdens = -0.5 * (np.log(2 * np.pi * variances) + err ** 2 / variances)
    precision = float("nan")
    if flagged_safe is not None:
        flagged = np.asarray(flagged_safe, dtype=bool)
        if flagged.any():
            precision = float(np.mean(np.asarray(truly_safe, dtype=bool)[flagged]))
    return Metrics(rmse, float(np.mean(rmse)), float(np.mean(logdens)), precision)


class Ensemble:
    """Equal-weight set of conditioned GPs (one per hyperparameter sample); predictions
    are moment matched across members."""

    def __init__(self, models, obs: ObservationSet):
        self.models = list(models)
        self.posteriors = [GPPosterior(m, obs) for m in self.models]

    def predict(self, Xs, full_cov=False, include_noise=False):
        outs = [post.predict(Xs, full_cov=full_cov) for post in self.posteriors]
        means = np.stack([o[0] for o in outs])
        second = np.stack([o[1] for o in outs])
        if include_noise:
            noise = np.stack([m.noise_vars for m in self.models])
            if full_cov:
                idx = np.arange(noise.shape[1])
                second = second.copy()
                second[..., idx, idx] += noise[:, None, :]
            else:
                second = second + noise[:, None, :]
        if full_cov:
            return moment_match(means, second)
        return moment_match_scalar(means, second)


@dataclass
class IterationRecord:
    iteration: int
    n_sum: int
    queried_x: np.ndarray = None
    queried_channel: int = None
    acq_score: float = float("nan")
    safety_prob: float = float("nan")
    truly_safe: bool = None
    metrics: Metrics = None
    fit_seconds: float = 0.0


@dataclass
class PoolCandidate:
    """One queryable (x, p) pair; ``channel`` is None in fully observed mode."""
    index: int
    x: np.ndarray
    channel: int = None
    y: np.ndarray = None
    z: float = None
    queried: bool = False


def pool_candidates(dataset: ALDataset, mode) -> list:
    pool = dataset.pool
    if ObservationMode(mode) is ObservationMode.FOO:
        return [PoolCandidate(j, pool.X[j], None, pool.Y[j], pool.Z[j]) for j in range(len(pool))]
    return [PoolCandidate(j, pool.X[j], p, pool.Y[j, p], pool.Z[j])
            for j in range(len(pool)) for p in range(dataset.P)]


@dataclass
class Trajectory:
    """Per-query records of one run.  ``baseline`` holds the metrics of the
    models fit on the initial data only."""
    pipeline: Pipeline
    mode: ObservationMode
    repeat: int = 0
    baseline: IterationRecord = None
    records: list = field(default_factory=list)
    status: str = "completed"
    # iteration at which the run stopped early (no safe candidate or empty pool)
    skipped_iteration: int = None
    accept_rates: list = field(default_factory=list)
    final_obs: ObservationSet = None

    def all_records(self):
        return ([self.baseline] if self.baseline is not None else []) + list(self.records)

    @property
    def safe_query_fraction(self):
        flags = [r.truly_safe for r in self.records]
        return float(np.mean(flags)) if flags else float("nan")

    def n_sum_series(self):
        return np.array([r.n_sum for r in self.all_records()])

    def rmse_series(self):
        return np.array([r.metrics.rmse_mean for r in self.all_records()])


def initial_design(dataset: ALDataset, n_init, mode, rng):
    """Pool indices (and, for POO, channels) of the initial observations.

    Inputs are drawn among truly safe pool points.  POO observes ``n_init``
    distinct inputs with channels assigned round-robin; FOO observes
    ``n_init // P`` inputs fully.
    """
    rng = make_rng(rng)
    P = dataset.P
    mode = ObservationMode(mode)
    n_inputs = n_init if mode is ObservationMode.POO else max(n_init // P, 1)
    safe_idx = np.flatnonzero(dataset.pool.safe)
    if len(safe_idx) < n_inputs:
        raise InputError(f"only {len(safe_idx)} safe pool points for {n_inputs} initial inputs")
    chosen = np.sort(rng.choice(safe_idx, size=n_inputs, replace=False))
    if mode is ObservationMode.POO:
        channels = np.arange(n_inputs) % P
        return chosen, rng.permutation(channels)
    return chosen, None


def resolve_safety(spec: SafetySpec, dataset: ALDataset) -> SafetySpec:
    """Fill an unset threshold from the dataset's own safety rule."""
    if spec.z_bar is None:
        return replace(spec, z_bar=float(dataset.z_bar), z_mode=ZMode(dataset.z_mode))
    return spec


def _layout_for(pipeline, P, inference):
    if pipeline is Pipeline.AL_INDGPS:
        return HyperLayout.independent(P, inference.kernel)
    L = inference.latent_count or P
    return HyperLayout(P, (inference.kernel,) * L)


class _Fitter:
    """Re-infers hyperparameters of one model family on each new data set."""

    def __init__(self, layout, config: ExperimentConfig, rng, fixed_theta=None):
        self.layout = layout
        self.inf = config.inference
        self.priors = config.priors
        self.rng = rng
        self.state = layout.default_theta() if fixed_theta is None else np.asarray(fixed_theta, dtype=float)
        self.accept_rates = []

    def fit(self, obs):
        method = self.inf.method
        if method is InferenceMethod.FIXED:
            return [self.layout.unpack(self.state)]
        if method is InferenceMethod.TYPE2:
            init = self.state if self.inf.warm_start else None
            res = optimize_hyperparameters(obs, self.layout, init=init, restarts=self.inf.restarts,
                                           priors=self.priors, rng=self.rng)
            self.state = res.theta
            return [self.layout.unpack(res.theta)]
        init = self.state if self.inf.warm_start else self.layout.default_theta()
        if self.inf.hmc_init == "type2":
            init = optimize_hyperparameters(obs, self.layout, init=init, restarts=self.inf.restarts,
                                            priors=self.priors, rng=self.rng).theta
        chain = hmc_chain(log_posterior(obs, self.layout, self.priors), init, self.inf.hmc, self.rng)
        self.state = chain.last_state
        self.accept_rates.append(chain.accept_rate)
        return [self.layout.unpack(t) for t in chain.samples]


def run_safe_al(config: ExperimentConfig, dataset: ALDataset, rng, pipeline=None,
                init=None, repeat=0) -> Trajectory:
    """Pool-based safe active learning for one pipeline on one dataset.

    Each round fits the main model and the safety GP on the current data,
    scores every unqueried candidate, queries the constrained maximizer and
    refits.  ``baseline`` holds metrics of the models fit on the initial data;
    ``records[k-1]`` the k-th query and the metrics after refitting on it.
    """
    rng = make_rng(rng)
    pipeline = config.pipeline[0] if pipeline is None else Pipeline(pipeline)
    mode = config.observation_mode
    spec = resolve_safety(config.safety, dataset)
    pool, test, P = dataset.pool, dataset.test, dataset.P
    M = len(pool)
    if init is None:
        init = initial_design(dataset, config.n_init, mode, rng)
    init_idx, init_ch = init
    use_safety = pipeline is not Pipeline.AL_MOGP_NOSAFE

    obs = ObservationSet.empty(dataset.D, P)
    available = np.ones((M, P), dtype=bool)
    for k, j in enumerate(init_idx):
        chans = range(P) if init_ch is None else [int(init_ch[k])]
        obs = obs.add_point(pool.X[j], [(p, pool.Y[j, p]) for p in chans], pool.Z[j])
    available[np.asarray(init_idx, dtype=int), :] = False

    fixed = config.inference.fixed_theta
    main_fit = _Fitter(_layout_for(pipeline, P, config.inference), config, rng, fixed)
    safety_fit = _Fitter(HyperLayout.single_output(config.inference.kernel), config, rng,
                         config.inference.fixed_safety_theta)

    traj = Trajectory(pipeline, mode, repeat)

    def fit_and_measure():
        t0 = time.perf_counter()
        main = Ensemble(main_fit.fit(obs), obs)
        safety = Ensemble(safety_fit.fit(obs.safety_set()), obs.safety_set()) if use_safety else None
        elapsed = time.perf_counter() - t0
        m, v = main.predict(test.X, include_noise=test.noisy)
        flagged = truth = None
        if safety is not None:
            sm, sv = safety.predict(pool.X)
            probs = safety_probability(sm[:, 0], spec, sv[:, 0])
            flagged, truth = probs > 1.0 - spec.delta, pool.safe
        else:
            probs = None
        metrics = evaluate_metrics(m, v, test.targets, flagged, truth)
        return main, probs, metrics, elapsed

    main, probs, metrics, elapsed = fit_and_measure()
    traj.baseline = IterationRecord(0, obs.N_sum, metrics=metrics, fit_seconds=elapsed)

    for it in range(1, config.iter_num + 1):
        if mode is ObservationMode.POO:
            cand_avail = available.ravel()
        else:
            cand_avail = available.all(axis=1)
        if not cand_avail.any():
            traj.status = "exhausted"
            traj.skipped_iteration = it
            break
        if pipeline is Pipeline.RS_MOGP:
            scores = None
        elif mode is ObservationMode.POO:
            _, var = main.predict(pool.X)
            scores = entropy_scores(var.ravel())
        else:
            _, covs = main.predict(pool.X, full_cov=True)
            scores = entropy_scores(covs)
        cand_probs = None
        if use_safety:
            cand_probs = np.repeat(probs, P) if mode is ObservationMode.POO else probs
        try:
            if pipeline is Pipeline.RS_MOGP:
                c = select_random_safe(cand_probs, spec.delta, rng, cand_avail)
            elif use_safety:
                c = select_safe(scores, cand_probs, spec.delta, rng, cand_avail)
            else:
                c = select_safe(scores, np.ones_like(scores), 1.0, rng, cand_avail)
        except EmptySafeSet:
            traj.status = "truncated"
            traj.skipped_iteration = it
            break
        if mode is ObservationMode.POO:
            j, p = divmod(c, P)
            entries = [(p, pool.Y[j, p])]
            available[j, p] = False
        else:
            j, p = c, None
            entries = [(q, pool.Y[j, q]) for q in range(P)]
            available[j, :] = False
        record = IterationRecord(
            it, 0, queried_x=pool.X[j].copy(), queried_channel=p,
            acq_score=float(scores[c]) if scores is not None else float("nan"),
            safety_prob=float(cand_probs[c]) if cand_probs is not None else float("nan"),
            truly_safe=bool(pool.safe[j]))
        obs = obs.add_point(pool.X[j], entries, pool.Z[j])
        main, probs, metrics, elapsed = fit_and_measure()
        record.n_sum, record.metrics, record.fit_seconds = obs.N_sum, metrics, elapsed
        traj.records.append(record)

    traj.accept_rates = main_fit.accept_rates + safety_fit.accept_rates
    traj.final_obs = obs
    return traj
