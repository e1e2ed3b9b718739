"""Stationary kernels, the LMC cross-covariance and the Gaussian convolution process.

Channels are 0-based throughout.  Two conventions worth knowing:

* ``SqExpIso`` is ``variance * exp(-r**2 / lengthscale)``: the lengthscale
  divides the squared distance directly (no factor of two, no square).
* ``SqExpMatrix`` is ``variance * exp(-0.5 * d.T @ Lambda @ d)`` where the
  "lengthscale" matrix ``Lambda`` acts as a precision.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import InputError, InvalidSpecError, NumericalError

SQRT5 = np.sqrt(5.0)
_SPD_PIVOT_TOL = 1e-12


class KernelFamily(str, enum.Enum):
    MATERN52 = "Matern52"
    SQEXP_ISO = "SqExpIso"
    SQEXP_MATRIX = "SqExpMatrix"


def _check_spd(matrix, name="matrix"):
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise InvalidSpecError(f"{name} must be square, got shape {matrix.shape}")
    if not np.allclose(matrix, matrix.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(matrix).max())):
        raise InvalidSpecError(f"{name} must be symmetric")
    try:
        chol = np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError as exc:
        raise InvalidSpecError(f"{name} is not positive definite") from exc
    if np.min(np.diag(chol)) ** 2 <= _SPD_PIVOT_TOL:
        raise InvalidSpecError(f"{name} is numerically singular")
    return chol


@dataclass(frozen=True, eq=False)
class KernelSpec:
    family: KernelFamily
    variance: float = 1.0
    lengthscale: float | np.ndarray = 1.0

    def __post_init__(self):
        object.__setattr__(self, "family", KernelFamily(self.family))
        if not np.isfinite(self.variance) or self.variance <= 0:
            raise InvalidSpecError(f"kernel variance must be positive, got {self.variance}")
        if self.family is KernelFamily.SQEXP_MATRIX:
            lam = np.array(self.lengthscale, dtype=float, ndmin=2)
            chol = _check_spd(lam, "matrix lengthscale")
            lam.setflags(write=False)
            object.__setattr__(self, "lengthscale", lam)
            object.__setattr__(self, "_chol", chol)
        else:
            ls = float(np.asarray(self.lengthscale).squeeze())
            if not np.isfinite(ls) or ls <= 0:
                raise InvalidSpecError(f"lengthscale must be positive, got {self.lengthscale}")
            object.__setattr__(self, "lengthscale", ls)

    @property
    def is_isotropic(self):
        return self.family is not KernelFamily.SQEXP_MATRIX

    def with_params(self, variance=None, lengthscale=None):
        return KernelSpec(
            self.family,
            self.variance if variance is None else variance,
            self.lengthscale if lengthscale is None else lengthscale,
        )

    def __repr__(self):
        return f"KernelSpec({self.family.value}, variance={self.variance!r}, lengthscale={self.lengthscale!r})"


def _as_points(X, name="X"):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise InputError(f"{name} must be a 2-D array of points, got shape {X.shape}")
    return X


def sq_distances(spec: KernelSpec, X1, X2):
    """Squared distances in the metric the kernel uses (Mahalanobis for the matrix SE)."""
    if spec.family is KernelFamily.SQEXP_MATRIX:
        chol = spec._chol
        if X1.shape[1] != chol.shape[0]:
            raise InputError(f"input dimension {X1.shape[1]} does not match lengthscale matrix {chol.shape}")
        return cdist(X1 @ chol, X2 @ chol, "sqeuclidean")
    return cdist(X1, X2, "sqeuclidean")


def kernel_from_sqdist(family, variance, lengthscale, sqdist):
    """Evaluate an isotropic family on precomputed squared distances."""
    family = KernelFamily(family)
    if family is KernelFamily.MATERN52:
        s = SQRT5 * np.sqrt(sqdist) / lengthscale
        return variance * (1.0 + s + s * s / 3.0) * np.exp(-s)
    if family is KernelFamily.SQEXP_ISO:
        return variance * np.exp(-sqdist / lengthscale)
    # matrix SE: sqdist already carries the precision
    return variance * np.exp(-0.5 * sqdist)


def dkernel_dlog_lengthscale(family, variance, lengthscale, sqdist):
    """Derivative of an isotropic kernel with respect to log(lengthscale)."""
    family = KernelFamily(family)
    if family is KernelFamily.MATERN52:
        s = SQRT5 * np.sqrt(sqdist) / lengthscale
        return variance * s * s * (1.0 + s) / 3.0 * np.exp(-s)
    if family is KernelFamily.SQEXP_ISO:
        ratio = sqdist / lengthscale
        return variance * ratio * np.exp(-ratio)
    raise InputError("matrix-lengthscale kernels have no scalar lengthscale gradient")


def kernel_matrix(spec: KernelSpec, X1, X2=None):
    X1 = _as_points(X1, "X1")
    X2 = X1 if X2 is None else _as_points(X2, "X2")
    if X1.shape[1] != X2.shape[1]:
        raise InputError(f"dimension mismatch: {X1.shape[1]} vs {X2.shape[1]}")
    return kernel_from_sqdist(spec.family, spec.variance, spec.lengthscale, sq_distances(spec, X1, X2))


def eval_kernel(spec: KernelSpec, x, x2) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != x2.shape or x.ndim != 1:
        raise InputError(f"points must be vectors of equal length, got {x.shape} and {x2.shape}")
    return float(kernel_matrix(spec, x[None, :], x2[None, :])[0, 0])


class IndexSet(NamedTuple):
    """Parallel arrays of inputs and 0-based channels describing (input, channel) pairs."""

    X: np.ndarray
    channels: np.ndarray


def as_index_set(pairs) -> IndexSet:
    if isinstance(pairs, IndexSet):
        return IndexSet(_as_points(pairs.X), np.asarray(pairs.channels, dtype=int))
    pairs = list(pairs)
    if not pairs:
        raise InputError("index set must be nonempty")
    X = np.array([np.atleast_1d(np.asarray(x, dtype=float)) for x, _ in pairs])
    ch = np.array([int(p) for _, p in pairs], dtype=int)
    return IndexSet(X, ch)


@dataclass(frozen=True, eq=False)
class LmcModel:
    """Linear model of coregionalization: f = W g with independent latent GPs g_l ~ GP(0, k_l)."""

    latent_kernels: tuple
    W: np.ndarray
    noise_vars: np.ndarray

    def __post_init__(self):
        kernels = tuple(self.latent_kernels)
        W = np.array(self.W, dtype=float, ndmin=2)
        noise = np.atleast_1d(np.array(self.noise_vars, dtype=float))
        if len(kernels) < 1:
            raise InvalidSpecError("at least one latent kernel is required")
        if W.shape != (W.shape[0], len(kernels)) or W.shape[0] < 1:
            raise InvalidSpecError(f"W must be P x L with L={len(kernels)}, got {W.shape}")
        if not np.all(np.isfinite(W)):
            raise InvalidSpecError("W entries must be finite")
        if noise.shape != (W.shape[0],) or np.any(~(noise > 0)):
            raise InvalidSpecError(f"need {W.shape[0]} positive noise variances, got {noise}")
        W.setflags(write=False)
        noise.setflags(write=False)
        object.__setattr__(self, "latent_kernels", kernels)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "noise_vars", noise)

    @property
    def P(self):
        return self.W.shape[0]

    @property
    def L(self):
        return self.W.shape[1]

    def check_channels(self, channels):
        channels = np.asarray(channels, dtype=int)
        if channels.size and (channels.min() < 0 or channels.max() >= self.P):
            raise InputError(f"channel out of range [0, {self.P}): {channels}")
        return channels

    def latent_grams(self, X1, X2):
        return [kernel_matrix(k, X1, X2) for k in self.latent_kernels]

    def cross_cov(self, X1, ch1, X2, ch2):
        """Matrix of eta_{p_i, p_j}(x_i, x_j) for two index sets."""
        X1, X2 = _as_points(X1), _as_points(X2)
        ch1, ch2 = self.check_channels(ch1), self.check_channels(ch2)
        out = np.zeros((X1.shape[0], X2.shape[0]))
        for l, K in enumerate(self.latent_grams(X1, X2)):
            out += np.outer(self.W[ch1, l], self.W[ch2, l]) * K
        return out

    def output_cov(self, x):
        """P x P prior covariance of f(x) (Omega_** in the full-output notation)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))[None, :]
        diag = np.array([kernel_matrix(k, x, x)[0, 0] for k in self.latent_kernels])
        return (self.W * diag) @ self.W.T

    def prior_var(self, X, channels):
        """Diagonal eta_{p,p}(x, x); stationary kernels make this input independent."""
        channels = self.check_channels(channels)
        kdiag = np.array([k.variance for k in self.latent_kernels])
        return (self.W[channels] ** 2) @ kdiag * np.ones(len(channels))


def lmc_cov(model: LmcModel, p: int, p2: int, x, x2) -> float:
    model.check_channels([p, p2])
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    return float(sum(model.W[p, l] * model.W[p2, l] * eval_kernel(k, x, x2)
                     for l, k in enumerate(model.latent_kernels)))


def assemble_gram(model, obs_index_set, targets) -> np.ndarray:
    """Cross-covariance between two (input, channel) index sets; no jitter is added."""
    a = as_index_set(obs_index_set)
    b = as_index_set(targets)
    if len(a.channels) == 0 or len(b.channels) == 0:
        raise InputError("index sets must be nonempty")
    return model.cross_cov(a.X, a.channels, b.X, b.channels)


def full_index_set(X, P) -> IndexSet:
    """Channel-major layout of all P outputs at every input, (p=0: x_1..x_N), (p=1: ...), ..."""
    X = _as_points(X)
    N = X.shape[0]
    return IndexSet(np.tile(X, (P, 1)), np.repeat(np.arange(P), N))


@dataclass(frozen=True, eq=False)
class ConvProcessModel:
    """Convolution process with Gaussian smoothing kernels G_{p,l}(z) = W_pl N(z | 0, A_p^-1)
    and Gaussian latent kernels k_l(z, z') = c_l N(z - z' | 0, Lambda_l^-1)."""

    A: np.ndarray
    Lambda: np.ndarray
    c: np.ndarray
    W: np.ndarray
    noise_vars: np.ndarray = field(default=None)

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        Lam = np.array(self.Lambda, dtype=float)
        c = np.atleast_1d(np.array(self.c, dtype=float))
        W = np.array(self.W, dtype=float, ndmin=2)
        if A.ndim != 3 or Lam.ndim != 3:
            raise InvalidSpecError("A and Lambda must be stacks of square matrices")
        P, L = A.shape[0], Lam.shape[0]
        if W.shape != (P, L) or c.shape != (L,):
            raise InvalidSpecError(f"W must be {P}x{L} and c length {L}")
        if np.any(c <= 0):
            raise InvalidSpecError("latent scales c_l must be positive")
        for i, m in enumerate(A):
            _check_spd(m, f"A[{i}]")
        for i, m in enumerate(Lam):
            _check_spd(m, f"Lambda[{i}]")
        noise = np.ones(P) if self.noise_vars is None else np.atleast_1d(np.array(self.noise_vars, dtype=float))
        if noise.shape != (P,) or np.any(noise <= 0):
            raise InvalidSpecError("noise variances must be positive, one per channel")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Lambda", Lam)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "noise_vars", noise)
        object.__setattr__(self, "_A_inv", np.linalg.inv(A))
        object.__setattr__(self, "_Lam_inv", np.linalg.inv(Lam))

    @property
    def P(self):
        return self.W.shape[0]

    @property
    def L(self):
        return self.W.shape[1]

    @property
    def D(self):
        return self.A.shape[1]

    def check_channels(self, channels):
        channels = np.asarray(channels, dtype=int)
        if channels.size and (channels.min() < 0 or channels.max() >= self.P):
            raise InputError(f"channel out of range [0, {self.P}): {channels}")
        return channels

    def _pair_cov(self, p, p2, diff):
        """Covariance for one channel pair over an array of differences (..., D)."""
        out = np.zeros(diff.shape[:-1])
        D = self.D
        for l in range(self.L):
            S = self._A_inv[p] + self._A_inv[p2] + self._Lam_inv[l]
            try:
                chol = np.linalg.cholesky(S)
            except np.linalg.LinAlgError as exc:
                raise NumericalError("smoothing covariance sum is singular") from exc
            z = np.linalg.solve(chol, diff.reshape(-1, D).T).T.reshape(diff.shape)
            logdet = 2.0 * np.sum(np.log(np.diag(chol)))
            dens = np.exp(-0.5 * np.sum(z * z, axis=-1) - 0.5 * (D * np.log(2 * np.pi) + logdet))
            out += self.W[p, l] * self.W[p2, l] * self.c[l] * dens
        return out

    def cross_cov(self, X1, ch1, X2, ch2):
        X1, X2 = _as_points(X1), _as_points(X2)
        ch1, ch2 = self.check_channels(ch1), self.check_channels(ch2)
        out = np.zeros((X1.shape[0], X2.shape[0]))
        diff = X1[:, None, :] - X2[None, :, :]
        for p in np.unique(ch1):
            for p2 in np.unique(ch2):
                rows, cols = ch1 == p, ch2 == p2
                out[np.ix_(rows, cols)] = self._pair_cov(p, p2, diff[np.ix_(rows, cols)])
        return out

    def output_cov(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        zero = np.zeros((1, self.D))
        return np.array([[self._pair_cov(p, q, zero)[0] for q in range(self.P)] for p in range(self.P)])

    def prior_var(self, X, channels):
        channels = self.check_channels(channels)
        zero = np.zeros((1, self.D))
        diag = np.array([self._pair_cov(p, p, zero)[0] for p in range(self.P)])
        return diag[channels]


def conv_cov(model: ConvProcessModel, p: int, p2: int, x, x2) -> float:
    model.check_channels([p, p2])
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != (model.D,) or x2.shape != (model.D,):
        raise InputError(f"points must have dimension {model.D}")
    return float(model._pair_cov(p, p2, (x - x2)[None, :])[0])
