"""Exact GP / MOGP posteriors and marginal likelihoods for sparse (input, channel) data."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.linalg.lapack import dpotrf, dpotri, dpotrs
from scipy.spatial.distance import cdist

from .errors import InputError, NumericalError
from .kernels import (
    KernelFamily,
    KernelSpec,
    LmcModel,
    kernel_matrix,
    SQRT5,
    _as_points,
)

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
JITTER_START = 1e-10
JITTER_MAX = 1e-4


def stable_cholesky(K):
    """Lower Cholesky factor of K, escalating a relative diagonal jitter when needed.

    The first attempt uses K as given; afterwards ``jitter * mean(diag K)`` is
    added for jitter = 1e-10, 1e-9, ..., 1e-4.
    """
    chol, info = dpotrf(K, lower=1, clean=1)
    if info == 0 and np.all(np.isfinite(np.diagonal(chol))):
        return chol
    if not np.all(np.isfinite(K)):
        raise NumericalError("covariance matrix has non-finite entries")
    scale = max(float(np.mean(np.diag(K))), np.finfo(float).tiny)
    jitter = JITTER_START
    while jitter <= JITTER_MAX * 1.0001:
        try:
            chol = cholesky(K + jitter * scale * np.eye(K.shape[0]), lower=True, check_finite=False)
            log.debug("cholesky needed relative jitter %.0e", jitter)
            return chol
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NumericalError(f"Cholesky failed with relative jitter up to {JITTER_MAX:g}")


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Inputs plus sparse (input_index, channel, value) entries and optional safety values.

    Entry order realizes the flattening of observed (channel, input) pairs;
    ``(input_index, channel)`` pairs are unique.  Safety values are kept at most
    once per input (the first one wins).
    """

    inputs: np.ndarray
    index: np.ndarray
    channel: np.ndarray
    value: np.ndarray
    P: int
    safety_index: np.ndarray = None
    safety_value: np.ndarray = None

    def __post_init__(self):
        X = np.array(self.inputs, dtype=float, ndmin=2)
        if X.size == 0:
            X = X.reshape(0, X.shape[1] if X.ndim == 2 and X.shape[1] else 1)
        idx = np.asarray(self.index, dtype=int).ravel()
        ch = np.asarray(self.channel, dtype=int).ravel()
        val = np.asarray(self.value, dtype=float).ravel()
        if not (len(idx) == len(ch) == len(val)):
            raise InputError("entry arrays must have equal length")
        if self.P < 1:
            raise InputError("P must be >= 1")
        if len(idx) and (idx.min() < 0 or idx.max() >= X.shape[0]):
            raise InputError("entry input index out of range")
        if len(ch) and (ch.min() < 0 or ch.max() >= self.P):
            raise InputError(f"entry channel out of range [0, {self.P})")
        keys = idx * self.P + ch
        if len(np.unique(keys)) != len(keys):
            raise InputError("duplicate (input, channel) entries")
        s_idx = np.zeros(0, dtype=int) if self.safety_index is None else np.asarray(self.safety_index, dtype=int).ravel()
        s_val = np.zeros(0) if self.safety_value is None else np.asarray(self.safety_value, dtype=float).ravel()
        if len(s_idx) != len(s_val):
            raise InputError("safety arrays must have equal length")
        if len(s_idx) and (s_idx.min() < 0 or s_idx.max() >= X.shape[0]):
            raise InputError("safety input index out of range")
        _, first = np.unique(s_idx, return_index=True)
        if len(first) != len(s_idx):
            keep = np.sort(first)
            s_idx, s_val = s_idx[keep], s_val[keep]
        for arr in (X, idx, ch, val, s_idx, s_val):
            arr.setflags(write=False)
        for name, arr in (("inputs", X), ("index", idx), ("channel", ch), ("value", val),
                          ("safety_index", s_idx), ("safety_value", s_val)):
            object.__setattr__(self, name, arr)

    @classmethod
    def from_entries(cls, inputs, entries, P, safety=None):
        entries = list(entries)
        idx = [int(n) for n, _, _ in entries]
        ch = [int(p) for _, p, _ in entries]
        val = [float(y) for _, _, y in entries]
        s_idx = s_val = None
        if safety is not None:
            safety = list(safety)
            s_idx = [int(n) for n, _ in safety]
            s_val = [float(z) for _, z in safety]
        return cls(np.asarray(inputs, dtype=float), idx, ch, val, P, s_idx, s_val)

    @classmethod
    def fully_observed(cls, X, Y, Z=None):
        """Every channel at every input, channel-major (all of channel 0 first)."""
        X = _as_points(X)
        Y = np.array(Y, dtype=float, ndmin=2)
        if Y.shape[0] != X.shape[0]:
            Y = Y.T
        N, P = Y.shape
        idx = np.tile(np.arange(N), P)
        ch = np.repeat(np.arange(P), N)
        s_idx = None if Z is None else np.arange(N)
        return cls(X, idx, ch, Y.T.ravel(), P, s_idx, Z)

    @classmethod
    def empty(cls, D, P):
        return cls(np.zeros((0, D)), [], [], [], P)

    @property
    def N(self):
        return self.inputs.shape[0]

    @property
    def D(self):
        return self.inputs.shape[1]

    @property
    def N_sum(self):
        return len(self.index)

    @property
    def N_p(self):
        return np.bincount(self.channel, minlength=self.P)

    @property
    def is_fully_observed(self):
        return self.N_sum == self.P * self.N

    @property
    def X_obs(self):
        return self.inputs[self.index]

    @property
    def safety_X(self):
        return self.inputs[self.safety_index]

    def find_input(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        hits = np.flatnonzero(np.all(self.inputs == x[None, :], axis=1))
        return int(hits[0]) if len(hits) else None

    def add_point(self, x, entries=(), z=None):
        """Return a new set with ``x`` (appended unless already present), its (channel, value)
        entries and, if not yet recorded for ``x``, its safety value."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        n = self.find_input(x)
        inputs = self.inputs
        if n is None:
            n = self.N
            inputs = np.vstack([self.inputs, x[None, :]])
        idx = np.concatenate([self.index, [n] * len(entries)]).astype(int)
        ch = np.concatenate([self.channel, [p for p, _ in entries]]).astype(int)
        val = np.concatenate([self.value, [y for _, y in entries]])
        s_idx, s_val = self.safety_index, self.safety_value
        if z is not None and n not in set(s_idx.tolist()):
            s_idx = np.append(s_idx, n)
            s_val = np.append(s_val, z)
        return ObservationSet(inputs, idx, ch, val, self.P, s_idx, s_val)

    def permuted(self, order):
        order = np.asarray(order, dtype=int)
        return ObservationSet(self.inputs, self.index[order], self.channel[order], self.value[order],
                              self.P, self.safety_index, self.safety_value)

    def safety_set(self):
        """The safety observations as a single-output set (channel 0)."""
        X = self.safety_X
        return ObservationSet(X, np.arange(len(X)), np.zeros(len(X), dtype=int), self.safety_value, 1)


@dataclass(frozen=True, eq=False)
class PosteriorGaussian:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.array(self.cov, dtype=float, ndmin=2)
        if cov.shape != (len(mean), len(mean)):
            raise InputError(f"covariance shape {cov.shape} does not match mean length {len(mean)}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def var(self):
        return float(self.cov[0, 0])

    @property
    def dim(self):
        return len(self.mean)


def _clamp_var(var):
    neg = var < 0
    if np.any(neg):
        log.debug("clamping %d negative predictive variances (min %.3e)", int(neg.sum()), float(var.min()))
        var = np.where(neg, 0.0, var)
    return var


class GPPosterior:
    """Conditions a model on an observation set once and predicts at many targets.

    Works with any model exposing ``cross_cov``, ``prior_var``, ``output_cov``
    and ``noise_vars`` (``LmcModel`` and ``ConvProcessModel``).
    """

    def __init__(self, model, obs: ObservationSet):
        if obs.P != model.P:
            raise InputError(f"observation set has P={obs.P}, model has P={model.P}")
        self.model = model
        self.obs = obs
        self.X_obs = obs.X_obs
        self.ch = obs.channel
        if obs.N_sum:
            K = model.cross_cov(self.X_obs, self.ch, self.X_obs, self.ch)
            K[np.diag_indices_from(K)] += model.noise_vars[self.ch]
            self.chol = stable_cholesky(K)
            self.alpha = cho_solve((self.chol, True), obs.value, check_finite=False)
        else:
            self.chol = None
            self.alpha = np.zeros(0)

    def _cross_per_channel(self, Xs):
        """List over channels p of the (N_sum x M) covariance between data and f_p(Xs)."""
        model, M = self.model, Xs.shape[0]
        if isinstance(model, LmcModel):
            grams = model.latent_grams(self.X_obs, Xs)
            out = []
            for p in range(model.P):
                C = np.zeros((len(self.ch), M))
                for l, K in enumerate(grams):
                    C += (model.W[self.ch, l] * model.W[p, l])[:, None] * K
                out.append(C)
            return out
        return [model.cross_cov(self.X_obs, self.ch, Xs, np.full(M, p)) for p in range(model.P)]

    def predict(self, Xs, full_cov=False):
        """Means (M, P) and either variances (M, P) or per-input covariances (M, P, P)."""
        Xs = _as_points(Xs)
        model, M, P = self.model, Xs.shape[0], self.model.P
        prior = model.output_cov(Xs[0]) if M else np.zeros((P, P))
        means = np.zeros((M, P))
        if self.chol is None:
            if full_cov:
                return means, np.broadcast_to(prior, (M, P, P)).copy()
            return means, np.tile(np.diag(prior), (M, 1))
        cross = self._cross_per_channel(Xs)
        V = []
        for p, C in enumerate(cross):
            means[:, p] = C.T @ self.alpha
            V.append(solve_triangular(self.chol, C, lower=True, check_finite=False))
        if not full_cov:
            var = np.stack([prior[p, p] - np.einsum("ij,ij->j", V[p], V[p]) for p in range(P)], axis=1)
            return means, _clamp_var(var)
        covs = np.empty((M, P, P))
        for p in range(P):
            for q in range(p, P):
                c = prior[p, q] - np.einsum("ij,ij->j", V[p], V[q])
                covs[:, p, q] = c
                covs[:, q, p] = c
        idx = np.arange(P)
        covs[:, idx, idx] = _clamp_var(covs[:, idx, idx])
        return means, covs

    def predict_channel(self, Xs, channels):
        """Mean and variance of f_{p_i}(x_i) for paired arrays of targets."""
        Xs = _as_points(Xs)
        channels = self.model.check_channels(channels)
        prior = self.model.prior_var(Xs, channels)
        if self.chol is None:
            return np.zeros(len(channels)), prior
        C = self.model.cross_cov(self.X_obs, self.ch, Xs, channels)
        V = solve_triangular(self.chol, C, lower=True, check_finite=False)
        return C.T @ self.alpha, _clamp_var(prior - np.einsum("ij,ij->j", V, V))


def so_posterior(kernel: KernelSpec, X, y, noise_var, x_star) -> PosteriorGaussian:
    """Single-output GP regression posterior at one input."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if noise_var <= 0:
        raise InputError("noise_var must be positive")
    x_star = np.atleast_1d(np.asarray(x_star, dtype=float))[None, :]
    prior = kernel_matrix(kernel, x_star)[0, 0]
    if len(y) == 0:
        return PosteriorGaussian([0.0], [[prior]])
    X = _as_points(X)
    if X.shape[0] != len(y):
        raise InputError(f"{X.shape[0]} inputs but {len(y)} targets")
    K = kernel_matrix(kernel, X) + noise_var * np.eye(len(y))
    chol = stable_cholesky(K)
    k_star = kernel_matrix(kernel, X, x_star)[:, 0]
    mean = k_star @ cho_solve((chol, True), y)
    v = solve_triangular(chol, k_star, lower=True)
    return PosteriorGaussian([mean], [[max(prior - v @ v, 0.0)]])


def mogp_posterior_full(model, obs: ObservationSet, x_star) -> PosteriorGaussian:
    """Joint posterior of all P outputs at ``x_star`` given fully observed data."""
    if obs.N_sum and not obs.is_fully_observed:
        raise InputError("mogp_posterior_full requires a fully observed set")
    means, covs = GPPosterior(model, obs).predict(np.atleast_1d(x_star)[None, :], full_cov=True)
    return PosteriorGaussian(means[0], covs[0])


def mogp_posterior_partial(model, obs: ObservationSet, x_star, p_star: int) -> PosteriorGaussian:
    """Posterior of the single output ``p_star`` at ``x_star`` using only observed entries."""
    model.check_channels([p_star])
    m, v = GPPosterior(model, obs).predict_channel(np.atleast_1d(x_star)[None, :], [p_star])
    return PosteriorGaussian(m, [[v[0]]])


def log_marginal_likelihood(model, obs: ObservationSet) -> float:
    if obs.N_sum < 1:
        raise InputError("marginal likelihood needs at least one observation")
    post = GPPosterior(model, obs)
    return float(-0.5 * obs.value @ post.alpha - np.sum(np.log(np.diag(post.chol))) - 0.5 * obs.N_sum * LOG_2PI)


@dataclass(frozen=True, eq=False)
class HyperLayout:
    """Maps an unconstrained vector to an ``LmcModel`` with isotropic latent kernels.

    Vector layout: log kernel variances (L), log lengthscales (L), W row-major
    (P*L, only when ``train_W``), log noise variances (P).
    """

    P: int
    families: tuple
    train_W: bool = True
    fixed_W: np.ndarray = None

    def __post_init__(self):
        fams = tuple(KernelFamily(f) for f in self.families)
        if any(f is KernelFamily.SQEXP_MATRIX for f in fams):
            raise InputError("hyperparameter inference supports isotropic kernels only")
        object.__setattr__(self, "families", fams)
        if not self.train_W:
            W = np.eye(self.P, self.L) if self.fixed_W is None else np.array(self.fixed_W, dtype=float, ndmin=2)
            if W.shape != (self.P, self.L):
                raise InputError(f"fixed_W must be {self.P}x{self.L}")
            object.__setattr__(self, "fixed_W", W)

    @classmethod
    def single_output(cls, family=KernelFamily.MATERN52):
        return cls(1, (family,), train_W=False, fixed_W=np.ones((1, 1)))

    @classmethod
    def independent(cls, P, family=KernelFamily.MATERN52):
        return cls(P, (family,) * P, train_W=False, fixed_W=np.eye(P))

    @property
    def L(self):
        return len(self.families)

    @property
    def n_w(self):
        return self.P * self.L if self.train_W else 0

    @property
    def dim(self):
        return 2 * self.L + self.n_w + self.P

    @property
    def names(self):
        names = [f"log_variance[{l}]" for l in range(self.L)]
        names += [f"log_lengthscale[{l}]" for l in range(self.L)]
        names += [f"W[{p},{l}]" for p in range(self.P) for l in range(self.L)] if self.train_W else []
        names += [f"log_noise[{p}]" for p in range(self.P)]
        return names

    @property
    def positive_mask(self):
        mask = np.ones(self.dim, dtype=bool)
        mask[2 * self.L:2 * self.L + self.n_w] = False
        return mask

    def split(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise InputError(f"expected {self.dim} hyperparameters, got shape {theta.shape}")
        L = self.L
        variances = np.exp(theta[:L])
        lengthscales = np.exp(theta[L:2 * L])
        W = theta[2 * L:2 * L + self.n_w].reshape(self.P, L) if self.train_W else self.fixed_W
        noise = np.exp(theta[2 * L + self.n_w:])
        return variances, lengthscales, W, noise

    def unpack(self, theta) -> LmcModel:
        variances, lengthscales, W, noise = self.split(theta)
        kernels = tuple(KernelSpec(f, v, r) for f, v, r in zip(self.families, variances, lengthscales))
        return LmcModel(kernels, W, noise)

    def pack(self, model: LmcModel):
        if model.P != self.P or model.L != self.L:
            raise InputError("model shape does not match layout")
        parts = [np.log([k.variance for k in model.latent_kernels]),
                 np.log([k.lengthscale for k in model.latent_kernels])]
        if self.train_W:
            parts.append(model.W.ravel())
        parts.append(np.log(model.noise_vars))
        return np.concatenate(parts)

    def default_theta(self, variance=1.0, lengthscale=1.0, noise=0.1):
        parts = [np.full(self.L, np.log(variance)), np.full(self.L, np.log(lengthscale))]
        if self.train_W:
            parts.append(np.eye(self.P, self.L).ravel())
        parts.append(np.full(self.P, np.log(noise)))
        return np.concatenate(parts)


class MarginalLikelihood:
    """Log marginal likelihood and its gradient in the unconstrained layout coordinates.

    Pairwise distances of the observed inputs are cached, so repeated calls
    (optimizer steps, leapfrog steps) only rebuild the kernel matrices.
    """

    def __init__(self, obs: ObservationSet, layout: HyperLayout):
        if obs.N_sum < 1:
            raise InputError("marginal likelihood needs at least one observation")
        if obs.P != layout.P:
            raise InputError("observation set and layout disagree on P")
        self.obs = obs
        self.layout = layout
        X = obs.X_obs
        self.sqdist = cdist(X, X, "sqeuclidean")
        self.dist = np.sqrt(self.sqdist)
        self.ch = obs.channel
        self.y = obs.value
        self.n = obs.N_sum
        self._diag = np.diag_indices(self.n)
        self._triu = np.triu_indices(self.n, 1)

    def _grams(self, variances, lengthscales, with_grad):
        """Latent gram matrices and, optionally, their log-lengthscale derivatives."""
        grams, dgrams = [], []
        for f, v, r in zip(self.layout.families, variances, lengthscales):
            if f is KernelFamily.MATERN52:
                s = (SQRT5 / r) * self.dist
                e = v * np.exp(-s)
                grams.append((1.0 + s + s * s / 3.0) * e)
                if with_grad:
                    dgrams.append(s * s * (1.0 + s) / 3.0 * e)
            else:
                ratio = self.sqdist / r
                G = v * np.exp(-ratio)
                grams.append(G)
                if with_grad:
                    dgrams.append(ratio * G)
        return grams, dgrams

    def _factor(self, theta, with_grad=False):
        variances, lengthscales, W, noise = self.layout.split(theta)
        grams, dgrams = self._grams(variances, lengthscales, with_grad)
        wcols = [W[self.ch, l] for l in range(self.layout.L)]
        K = np.zeros((self.n, self.n))
        for w, G in zip(wcols, grams):
            K += np.multiply.outer(w, w) * G
        K[self._diag] += noise[self.ch]
        chol = stable_cholesky(K)
        alpha, info = dpotrs(chol, self.y, lower=1)
        value = -0.5 * self.y @ alpha - np.sum(np.log(chol[self._diag])) - 0.5 * self.n * LOG_2PI
        return value, chol, alpha, grams, dgrams, wcols, (variances, lengthscales, W, noise)

    def value(self, theta) -> float:
        return float(self._factor(theta)[0])

    def value_and_grad(self, theta):
        layout = self.layout
        value, chol, alpha, grams, dgrams, wcols, params = self._factor(theta, with_grad=True)
        noise = params[3]
        Kinv, info = dpotri(chol, lower=1)
        if info != 0:
            raise NumericalError("could not invert the covariance factor")
        Kinv[self._triu] = Kinv.T[self._triu]
        Q = np.multiply.outer(alpha, alpha)
        Q -= Kinv
        L, P = layout.L, layout.P
        grad = np.empty(layout.dim)
        for l, (w, G, dG) in enumerate(zip(wcols, grams, dgrams)):
            Qw = Q * w[:, None]
            QGw = (Qw * G).sum(axis=0)
            grad[l] = 0.5 * w @ QGw
            grad[L + l] = 0.5 * np.einsum("ij,ij,j->", Qw, dG, w)
            if layout.train_W:
                grad[2 * L + np.arange(P) * L + l] = np.bincount(self.ch, QGw, minlength=P)
        grad[2 * L + layout.n_w:] = 0.5 * np.bincount(self.ch, Q[self._diag], minlength=P) * noise
        return float(value), grad


def lml_gradient(model: LmcModel, obs: ObservationSet, layout: HyperLayout = None):
    """Gradient of the log marginal likelihood w.r.t. the layout's unconstrained vector."""
    if layout is None:
        layout = HyperLayout(model.P, tuple(k.family for k in model.latent_kernels))
    return MarginalLikelihood(obs, layout).value_and_grad(layout.pack(model))[1]
