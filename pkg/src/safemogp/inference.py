"""Hyperparameter inference: type-II maximum likelihood, HMC, and Gaussian moment matching."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaln

from .errors import InferenceError, InputError, NumericalError
from .gp_models import HyperLayout, MarginalLikelihood, ObservationSet

log = logging.getLogger(__name__)

LOG_BOUNDS = (np.log(1e-6), np.log(1e4))


def make_rng(seed):
    """Counter-based Philox stream; the package-wide portable generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class HyperPrior:
    """Gamma(shape, rate) priors on positive hyperparameters and N(0, w_scale^2) on W entries."""

    variance: tuple = (2.5, 1.0)
    lengthscale: tuple = (1.5, 1.0)
    noise: tuple = (1.5, 3.0)
    w_scale: float = 2.0

    def __post_init__(self):
        for name in ("variance", "lengthscale", "noise"):
            a, b = getattr(self, name)
            if a <= 0 or b <= 0:
                raise InputError(f"{name} prior parameters must be positive")
        if self.w_scale <= 0:
            raise InputError("w_scale must be positive")

    def _gamma_params(self, layout: HyperLayout):
        L, P = layout.L, layout.P
        shapes = [self.variance[0]] * L + [self.lengthscale[0]] * L + [self.noise[0]] * P
        rates = [self.variance[1]] * L + [self.lengthscale[1]] * L + [self.noise[1]] * P
        return np.array(shapes), np.array(rates)

    def log_prob(self, theta, layout: HyperLayout):
        """Log density of the unconstrained vector (log-Jacobian included) and its gradient."""
        return self.compile(layout)(theta)

    def compile(self, layout: HyperLayout):
        """``log_prob`` specialised to one layout, for repeated evaluation."""
        pos = layout.positive_mask
        neg = ~pos
        a, b = self._gamma_params(layout)
        s2 = self.w_scale ** 2
        const = np.sum(a * np.log(b) - gammaln(a)) - neg.sum() * 0.5 * np.log(2 * np.pi * s2)

        def fn(theta):
            theta = np.asarray(theta, dtype=float)
            u = theta[pos]
            # density of u = log(t) with t ~ Gamma(a, b): a*u - b*e^u + const
            eu = np.exp(u)
            w = theta[neg]
            lp = a @ u - b @ eu - 0.5 * (w @ w) / s2 + const
            grad = np.empty_like(theta)
            grad[pos] = a - b * eu
            grad[neg] = -w / s2
            return float(lp), grad

        return fn

    def sample(self, layout: HyperLayout, rng):
        rng = make_rng(rng)
        a, b = self._gamma_params(layout)
        theta = np.empty(layout.dim)
        theta[layout.positive_mask] = np.log(rng.gamma(a, 1.0 / b))
        theta[~layout.positive_mask] = rng.normal(0.0, self.w_scale, size=layout.n_w)
        return theta


@dataclass(frozen=True)
class HmcSettings:
    num_results: int = 100
    burn_in: int = 300
    thin: int = 20
    leapfrog_steps: int = 10
    step_size: float = 0.01
    target_accept: float = 0.75
    adaptation_fraction: float = 0.3
    adaptation: str = "dual_averaging"
    adaptation_rate: float = 0.1
    mass: tuple = None
    seed: int = 0

    def __post_init__(self):
        for name in ("num_results", "burn_in", "thin", "leapfrog_steps"):
            if int(getattr(self, name)) < 1:
                raise InputError(f"{name} must be >= 1")
        if self.step_size <= 0:
            raise InputError("step_size must be positive")
        if not 0 < self.target_accept < 1:
            raise InputError("target_accept must lie in (0, 1)")
        if not 0 <= self.adaptation_fraction <= 1:
            raise InputError("adaptation_fraction must lie in [0, 1]")
        if self.adaptation not in ("dual_averaging", "simple", "none"):
            raise InputError(f"unknown adaptation {self.adaptation!r}")

    @property
    def chain_length(self):
        return self.burn_in + self.thin * self.num_results

    @property
    def adaptation_steps(self):
        return int(self.adaptation_fraction * self.burn_in)


@dataclass
class ChainResult:
    samples: np.ndarray
    accept_rate: float
    step_size: float
    n_transitions: int
    n_divergent: int = 0
    last_state: np.ndarray = None
    log_probs: np.ndarray = field(default=None, repr=False)


class _DualAveraging:
    def __init__(self, step_size, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = np.log(10.0 * step_size)
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.h_bar = 0.0
        self.log_eps_bar = 0.0
        self.m = 0

    def update(self, accept_prob):
        self.m += 1
        w = 1.0 / (self.m + self.t0)
        self.h_bar = (1 - w) * self.h_bar + w * (self.target - accept_prob)
        log_eps = self.mu - np.sqrt(self.m) / self.gamma * self.h_bar
        eta = self.m ** (-self.kappa)
        self.log_eps_bar = eta * log_eps + (1 - eta) * self.log_eps_bar
        return float(np.exp(log_eps))

    @property
    def final(self):
        return float(np.exp(self.log_eps_bar))


def _safe_eval(fn, q):
    try:
        with np.errstate(all="ignore"):
            lp, g = fn(q)
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError):
        return -np.inf, None
    if not np.isfinite(lp) or not np.all(np.isfinite(g)):
        return -np.inf, None
    return lp, g


def leapfrog(log_prob_and_grad, q, p, grad, step_size, n_steps, inv_mass):
    """Velocity-Verlet integration; returns (q, p, log_prob, grad) or log_prob=-inf on divergence."""
    q, p = q.copy(), p.copy()
    p = p + 0.5 * step_size * grad
    lp = -np.inf
    for i in range(n_steps):
        q = q + step_size * inv_mass * p
        lp, grad = _safe_eval(log_prob_and_grad, q)
        if grad is None:
            return q, p, -np.inf, None
        if i < n_steps - 1:
            p = p + step_size * grad
    p = p + 0.5 * step_size * grad
    return q, p, lp, grad


def hmc_chain(log_prob_and_grad, init, settings: HmcSettings, rng=None) -> ChainResult:
    """Run one HMC chain with step-size adaptation during the first part of burn-in.

    Divergent trajectories (non-finite energy) are rejected.  Kept samples
    are every ``thin``-th state after ``burn_in`` transitions.
    """
    rng = make_rng(settings.seed if rng is None else rng)
    q = np.array(init, dtype=float)
    d = q.size
    mass = np.ones(d) if settings.mass is None else np.asarray(settings.mass, dtype=float)
    inv_mass = 1.0 / mass
    lp, grad = _safe_eval(log_prob_and_grad, q)
    if grad is None:
        raise InferenceError("log density is not finite at the initial state")
    eps = settings.step_size
    n_adapt = settings.adaptation_steps if settings.adaptation != "none" else 0
    adapter = _DualAveraging(eps, settings.target_accept) if settings.adaptation == "dual_averaging" else None
    samples, log_probs = [], []
    n_accept = n_kept_window = n_div = 0
    for t in range(settings.chain_length):
        p0 = rng.standard_normal(d) * np.sqrt(mass)
        q1, p1, lp1, g1 = leapfrog(log_prob_and_grad, q, p0, grad, eps, settings.leapfrog_steps, inv_mass)
        h0 = -lp + 0.5 * np.sum(p0 * p0 * inv_mass)
        with np.errstate(over="ignore", invalid="ignore"):
            h1 = -lp1 + 0.5 * np.sum(p1 * p1 * inv_mass) if g1 is not None else np.inf
        if not np.isfinite(h1):
            n_div += 1
            accept_prob = 0.0
        else:
            accept_prob = float(np.exp(min(0.0, h0 - h1)))
        u = rng.uniform()
        if u < accept_prob:
            q, lp, grad = q1, lp1, g1
            accepted = True
        else:
            accepted = False
        if t < n_adapt:
            if adapter is not None:
                eps = adapter.update(accept_prob)
                if t == n_adapt - 1:
                    eps = adapter.final
            else:
                eps *= (1 + settings.adaptation_rate) if accept_prob > settings.target_accept else (1 - settings.adaptation_rate)
        if t >= settings.burn_in:
            n_kept_window += 1
            n_accept += accepted
            if (t - settings.burn_in + 1) % settings.thin == 0:
                samples.append(q.copy())
                log_probs.append(lp)
    rate = n_accept / max(n_kept_window, 1)
    if n_accept == 0:
        raise InferenceError(f"HMC rejected every post-burn-in transition (acceptance rate {rate:.3f}, "
                             f"step size {eps:.3g}, {n_div} divergent)")
    return ChainResult(np.array(samples), rate, eps, settings.chain_length, n_div, q.copy(), np.array(log_probs))


def log_posterior(obs: ObservationSet, layout: HyperLayout, priors: HyperPrior):
    """Unnormalized log posterior over the unconstrained vector, with gradient."""
    ml = MarginalLikelihood(obs, layout)
    prior = priors.compile(layout)

    def fn(theta):
        v, g = ml.value_and_grad(theta)
        pv, pg = prior(theta)
        return v + pv, g + pg

    return fn


@dataclass
class HmcResult:
    layout: HyperLayout
    chain: ChainResult

    @property
    def samples(self):
        return self.chain.samples

    @property
    def accept_rate(self):
        return self.chain.accept_rate

    def models(self):
        return [self.layout.unpack(t) for t in self.chain.samples]


def hmc_sample(obs: ObservationSet, priors: HyperPrior, settings: HmcSettings,
               layout: HyperLayout, init=None, rng=None) -> HmcResult:
    """Sample hyperparameters from p(theta | D) proportional to exp(L(theta, D)) p(theta)."""
    if init is None:
        init = layout.default_theta()
    chain = hmc_chain(log_posterior(obs, layout, priors), init, settings, rng)
    return HmcResult(layout, chain)


@dataclass
class OptimizationResult:
    theta: np.ndarray
    value: float
    n_failed: int = 0


def optimize_hyperparameters(obs: ObservationSet, layout: HyperLayout, init=None, restarts=5,
                             priors: HyperPrior = None, rng=None, gtol=1e-8) -> OptimizationResult:
    """Type-II maximum likelihood from ``init`` plus ``restarts - 1`` prior draws, keeping the best."""
    if restarts < 1:
        raise InputError("restarts must be >= 1")
    ml = MarginalLikelihood(obs, layout)
    priors = HyperPrior() if priors is None else priors
    rng = make_rng(0 if rng is None else rng)
    starts = [layout.default_theta() if init is None else np.asarray(init, dtype=float)]
    starts += [priors.sample(layout, rng) for _ in range(restarts - 1)]
    bounds = [LOG_BOUNDS if pos else (None, None) for pos in layout.positive_mask]

    def objective(theta):
        try:
            with np.errstate(all="ignore"):
                v, g = ml.value_and_grad(theta)
        except (NumericalError, np.linalg.LinAlgError):
            return 1e25, np.zeros_like(theta)
        if not np.isfinite(v) or not np.all(np.isfinite(g)):
            return 1e25, np.zeros_like(theta)
        return -v, -g

    best, best_val, n_failed = None, -np.inf, 0
    for x0 in starts:
        x0 = np.clip(x0, [b[0] if b[0] is not None else -np.inf for b in bounds],
                     [b[1] if b[1] is not None else np.inf for b in bounds])
        try:
            start_val = ml.value(x0)
        except NumericalError:
            start_val = -np.inf
        res = minimize(objective, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"gtol": gtol, "maxiter": 500})
        cand, cand_val = res.x, -res.fun
        if start_val >= cand_val:
            cand, cand_val = x0, start_val
        if not np.isfinite(cand_val) or cand_val <= -1e24:
            n_failed += 1
            continue
        if cand_val > best_val:
            best, best_val = cand, cand_val
    if best is None:
        raise InferenceError("every optimizer restart failed numerically")
    return OptimizationResult(np.asarray(best), float(best_val), n_failed)


def mixture_moment_match(components):
    """Gaussian with the first two moments of an equal-weight mixture of (mean, cov) pairs."""
    components = list(components)
    if not components:
        raise InputError("need at least one component")
    means = [np.atleast_1d(np.asarray(m, dtype=float)) for m, _ in components]
    covs = [np.array(c, dtype=float, ndmin=2) for _, c in components]
    R = len(means[0])
    if any(len(m) != R for m in means) or any(c.shape != (R, R) for c in covs):
        raise InputError("all components must share the same dimension")
    mean, cov = moment_match(np.array(means), np.array(covs))
    return mean, cov


def moment_match(means, covs):
    """Vectorized moment matching over the leading (sample) axis.

    ``means`` has shape (S, ..., R) and ``covs`` (S, ..., R, R).
    """
    means = np.asarray(means, dtype=float)
    covs = np.asarray(covs, dtype=float)
    mu = means.mean(axis=0)
    # centred form: average covariance plus covariance of the means
    dev = means - mu
    cov = covs.mean(axis=0) + (dev[..., :, None] * dev[..., None, :]).mean(axis=0)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    return mu, cov


def moment_match_scalar(means, variances):
    """Scalar special case: returns mixture mean and variance over axis 0."""
    means = np.asarray(means, dtype=float)
    mu = means.mean(axis=0)
    var = np.asarray(variances, dtype=float).mean(axis=0) + ((means - mu) ** 2).mean(axis=0)
    return mu, var
