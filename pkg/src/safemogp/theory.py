"""Numerical checks of the finite-sample inequalities behind the convergence results.

Every ``check_*`` function returns a :class:`CheckReport` whose ``holds``
flag compares ``lhs <= rhs`` with an absolute slack of ``INEQ_TOL``.
Identities between log-determinants use the looser ``IDENTITY_TOL``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericalError
from .inference import make_rng
from .kernels import KernelFamily, KernelSpec, LmcModel, full_index_set, kernel_matrix

INEQ_TOL = 1e-9
IDENTITY_TOL = 1e-6


@dataclass(frozen=True)
class BoundConstants:
    w_hat: float
    v_hat: float
    psi: float
    L: int
    P: int

    def __post_init__(self):
        if min(self.w_hat, self.v_hat, self.psi) <= 0 or self.L < 1 or self.P < 1:
            raise InputError("bound constants must be positive")

    @property
    def var_bound(self):
        """L * w_hat**2 * v_hat, a bound on every prior output variance."""
        return self.L * self.w_hat ** 2 * self.v_hat

    @property
    def C1(self):
        t = self.var_bound
        return t / np.log1p(t / self.psi)

    @property
    def C2(self):
        t = self.var_bound
        return t ** self.P / np.log1p((t / self.psi) ** self.P)


def bound_constants(model: LmcModel) -> BoundConstants:
    """Constants of the variance-sum bound for an LMC model.

    The kernel bound uses each latent kernel's variance, which is its maximum
    for the stationary families implemented here.
    """
    return BoundConstants(
        w_hat=float(np.max(np.abs(model.W))),
        v_hat=float(max(k.variance for k in model.latent_kernels)),
        psi=float(np.max(model.noise_vars)),
        L=model.L,
        P=model.P,
    )


@dataclass
class CheckReport:
    check: str
    lhs: float
    rhs: float
    holds: bool
    precondition: bool = True
    detail: str = ""

    @property
    def slack(self):
        return self.rhs - self.lhs


def _index_arrays(model, index_set):
    X, ch = index_set
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None] if len(X) else X.reshape(0, 1)
    ch = model.check_channels(np.asarray(ch, dtype=int).reshape(-1))
    if X.shape[0] != len(ch):
        raise InputError("inputs and channels differ in length")
    return X, ch


def _noise_scaled(model, X, ch):
    """I + S^{-1/2} Omega S^{-1/2} with S the per-entry noise variances."""
    K = model.cross_cov(X, ch, X, ch)
    s = 1.0 / np.sqrt(model.noise_vars[ch])
    return np.eye(len(ch)) + s[:, None] * K * s[None, :]


def _logdet_spd(A):
    sign, logdet = np.linalg.slogdet(0.5 * (A + A.T))
    if sign <= 0:
        raise NumericalError("matrix expected positive definite")
    return float(logdet)


def mutual_info_direct(model, index_set) -> float:
    """0.5 log|I + diag(noise)^{-1} Omega| for noisy observations at the index set."""
    X, ch = _index_arrays(model, index_set)
    if len(ch) == 0:
        return 0.0
    return 0.5 * _logdet_spd(_noise_scaled(model, X, ch))


def sequential_variances(model, index_set) -> np.ndarray:
    """Prior variance of entry k given noisy observations of entries 0..k-1.

    Uses a fresh dense solve per step, independently of the incremental
    Cholesky machinery of the posterior module.
    """
    X, ch = _index_arrays(model, index_set)
    K = model.cross_cov(X, ch, X, ch)
    noise = model.noise_vars[ch]
    out = np.empty(len(ch))
    for k in range(len(ch)):
        if k == 0:
            out[k] = K[0, 0]
            continue
        A = K[:k, :k] + np.diag(noise[:k])
        b = K[:k, k]
        out[k] = K[k, k] - b @ np.linalg.solve(A, b)
    return np.maximum(out, 0.0)


def mutual_info_chain(model, index_set) -> float:
    """Mutual information accumulated one entry at a time."""
    X, ch = _index_arrays(model, index_set)
    var = sequential_variances(model, (X, ch))
    return float(0.5 * np.sum(np.log1p(var / model.noise_vars[ch])))


def check_mi_chain(model, index_set) -> CheckReport:
    direct = mutual_info_direct(model, index_set)
    chain = mutual_info_chain(model, index_set)
    return CheckReport("mi_chain", chain, direct, bool(abs(chain - direct) <= IDENTITY_TOL))


def _posterior_blocks(model, X_obs, ch_obs, x):
    """Posterior covariance of all P outputs at ``x`` given noisy entries."""
    P = model.P
    xs = np.repeat(np.atleast_2d(x), P, axis=0)
    cs = np.arange(P)
    prior = model.cross_cov(xs, cs, xs, cs)
    if len(ch_obs) == 0:
        return prior
    K = model.cross_cov(X_obs, ch_obs, X_obs, ch_obs) + np.diag(model.noise_vars[ch_obs])
    C = model.cross_cov(X_obs, ch_obs, xs, cs)
    return prior - C.T @ np.linalg.solve(K, C)


def _is_greedy_poo(model, X, ch, pool, tol=1e-9):
    Xp = np.asarray(pool, dtype=float).reshape(len(pool), -1)
    P = model.P
    cand_X = np.repeat(Xp, P, axis=0)
    cand_c = np.tile(np.arange(P), len(Xp))
    for k in range(len(ch)):
        Xo, co = X[:k], ch[:k]
        prior = model.prior_var(cand_X, cand_c)
        if k:
            K = model.cross_cov(Xo, co, Xo, co) + np.diag(model.noise_vars[co])
            C = model.cross_cov(Xo, co, cand_X, cand_c)
            prior = prior - np.einsum("ij,ij->j", C, np.linalg.solve(K, C))
        chosen = sequential_variances(model, (X[:k + 1], ch[:k + 1]))[-1]
        if chosen < np.max(prior) - tol * max(1.0, np.max(prior)):
            return False
    return True


def _is_greedy_foo(model, X, pool, tol=1e-9):
    P = model.P
    Xp = np.asarray(pool, dtype=float).reshape(len(pool), -1)
    for k in range(len(X)):
        Xo = np.repeat(X[:k], P, axis=0)
        co = np.tile(np.arange(P), k)
        dets = [np.linalg.det(_posterior_blocks(model, Xo, co, x)) for x in Xp]
        chosen = np.linalg.det(_posterior_blocks(model, Xo, co, X[k]))
        if chosen < max(dets) - tol * max(1.0, max(dets)):
            return False
    return True


def check_lemma1(model: LmcModel, query_sequence, mode="POO", pool=None, c1_scale=1.0) -> CheckReport:
    """Average selected variance against the information-gain bound.

    POO: ``query_sequence`` is ``(X, channels)``; lhs is the mean of the
    per-step selected variances and rhs ``2 C1 / N_sum`` times the mutual
    information.  FOO: ``query_sequence`` is the array of queried inputs;
    determinants of the P x P posterior covariances replace variances and
    C2 replaces C1.  When ``pool`` is given, the sequence is also checked to
    be the greedy maximizer over it and the result goes to ``precondition``.
    ``c1_scale`` multiplies the constant (a hook for testing the harness).
    """
    bc = bound_constants(model)
    if mode == "POO":
        X, ch = _index_arrays(model, query_sequence)
        n = len(ch)
        if n == 0:
            raise InputError("empty query sequence")
        var = sequential_variances(model, (X, ch))
        mi = float(0.5 * np.sum(np.log1p(var / model.noise_vars[ch])))
        lhs = float(np.mean(var))
        rhs = 2.0 * c1_scale * bc.C1 / n * mi
        pre = True if pool is None else _is_greedy_poo(model, X, ch, pool)
    elif mode == "FOO":
        X = np.asarray(query_sequence, dtype=float)
        X = X.reshape(len(X), -1)
        n, P = len(X), model.P
        if n == 0:
            raise InputError("empty query sequence")
        dets, mi = [], 0.0
        for k in range(n):
            Xo = np.repeat(X[:k], P, axis=0)
            co = np.tile(np.arange(P), k)
            S = _posterior_blocks(model, Xo, co, X[k])
            dets.append(max(np.linalg.det(S), 0.0))
            s = 1.0 / np.sqrt(model.noise_vars)
            mi += 0.5 * _logdet_spd(np.eye(P) + s[:, None] * S * s[None, :])
        lhs = float(np.mean(dets))
        rhs = 2.0 * c1_scale * bc.C2 / n * mi
        pre = True if pool is None else _is_greedy_foo(model, X, pool)
    else:
        raise InputError(f"mode must be 'POO' or 'FOO', got {mode!r}")
    return CheckReport(f"lemma1_{mode}", lhs, float(rhs), bool(lhs <= rhs + INEQ_TOL), bool(pre))


def check_fischer(model: LmcModel, X) -> CheckReport:
    """Joint information of fully observed outputs against the per-channel sum."""
    X = np.asarray(X, dtype=float)
    if X.size == 0:
        return CheckReport("fischer", 0.0, 0.0, True)
    X = X.reshape(len(X), -1)
    lhs = mutual_info_direct(model, full_index_set(X, model.P))
    rhs = 0.0
    for p in range(model.P):
        ch = np.full(len(X), p)
        rhs += 0.5 * _logdet_spd(_noise_scaled(model, X, ch))
    return CheckReport("fischer", lhs, rhs, bool(lhs <= rhs + INEQ_TOL))


def check_weyl(matrices) -> CheckReport:
    """Eigenvalues of a sum of L PSD matrices against interleaved summand eigenvalues.

    Reports the worst index s; lhs/rhs are beta_s and its bound there.
    """
    mats = [np.asarray(A, dtype=float) for A in matrices]
    if not mats:
        raise InputError("need at least one matrix")
    L, M = len(mats), mats[0].shape[0]
    if any(A.shape != (M, M) for A in mats):
        raise InputError("matrices must share one square shape")
    alphas = [np.sort(np.linalg.eigvalsh(0.5 * (A + A.T)))[::-1] for A in mats]
    beta = np.sort(np.linalg.eigvalsh(0.5 * (sum(mats) + sum(mats).T)))[::-1]
    idx = np.arange(M) // L
    bound = np.sum([a[idx] for a in alphas], axis=0)
    s = int(np.argmin(bound - beta))
    return CheckReport("weyl", float(beta[s]), float(bound[s]), bool(np.all(beta <= bound + INEQ_TOL)),
                       detail=f"s={s + 1}")


def check_det_bounds(model: LmcModel, X, x_star) -> CheckReport:
    """det(Sigma(x*)) <= det(Omega**) <= (L w^2 v)^P and the per-channel analogue.

    ``X`` is fully observed.  Reports the tightest of the four links.
    """
    bc = bound_constants(model)
    X = np.asarray(X, dtype=float)
    X = X.reshape(len(X), -1) if X.size else np.zeros((0, np.size(x_star)))
    idx = full_index_set(X, model.P)
    post = _posterior_blocks(model, idx.X, idx.channels, x_star)
    prior = _posterior_blocks(model, X[:0], np.zeros(0, dtype=int), x_star)
    T = bc.var_bound
    links = [
        ("det_post<=det_prior", np.linalg.det(post), np.linalg.det(prior)),
        ("det_prior<=bound", np.linalg.det(prior), T ** model.P),
        ("var_post<=var_prior", np.max(np.diag(post) - np.diag(prior)), 0.0),
        ("var_prior<=bound", np.max(np.diag(prior)), T),
    ]
    name, lhs, rhs = min(links, key=lambda t: t[2] - t[1])
    holds = all(a <= b + INEQ_TOL for _, a, b in links)
    return CheckReport("det_bounds", float(lhs), float(rhs), holds, detail=name)


@dataclass
class GreedyResult:
    value: float
    chosen: list
    increments: np.ndarray


def greedy_max_info_gain(kernel, noise_var, X, N) -> GreedyResult:
    """Greedy surrogate for the maximum information gain over N points of a pool.

    ``kernel`` is a ``KernelSpec`` or a callable ``(X1, X2) -> matrix``.
    Each step adds the pool point of largest posterior variance, which is
    the greedy maximizer of ``0.5 log|I + K_S / noise_var|``.
    """
    X = np.asarray(X, dtype=float)
    X = X.reshape(len(X), -1)
    if not 0 <= N <= len(X):
        raise InputError(f"N must lie in [0, {len(X)}]")
    if noise_var <= 0:
        raise InputError("noise_var must be positive")
    K = kernel_matrix(kernel, X) if isinstance(kernel, KernelSpec) else np.asarray(kernel(X, X), dtype=float)
    var = np.diag(K).copy()
    basis = np.zeros((0, len(X)))
    chosen, inc = [], []
    for _ in range(N):
        v = np.where(np.isin(np.arange(len(X)), chosen), -np.inf, var)
        j = int(np.argmax(v))
        gain = 0.5 * np.log1p(max(var[j], 0.0) / noise_var)
        # rank-one update of the posterior covariance columns
        row = (K[j] - basis[:, j] @ basis) / np.sqrt(var[j] + noise_var)
        basis = np.vstack([basis, row])
        var = var - row ** 2
        chosen.append(j)
        inc.append(gain)
    inc = np.array(inc)
    return GreedyResult(float(inc.sum()), chosen, inc)


def lmc_channel_kernel(model: LmcModel, p: int):
    """Callable eta_{p,p}(X1, X2) for use with ``greedy_max_info_gain``."""
    def k(X1, X2):
        return model.cross_cov(X1, np.full(len(X1), p), X2, np.full(len(X2), p))
    return k


def exhaustive_max_info_gain(kernel, noise_var, X, N) -> float:
    """Exact maximum over all N-subsets (small pools only)."""
    X = np.asarray(X, dtype=float).reshape(len(X), -1)
    K = kernel_matrix(kernel, X) if isinstance(kernel, KernelSpec) else np.asarray(kernel(X, X), dtype=float)
    best = 0.0
    for S in itertools.combinations(range(len(X)), N):
        S = list(S)
        best = max(best, 0.5 * _logdet_spd(np.eye(N) + K[np.ix_(S, S)] / noise_var))
    return best


# ---- random corpora -------------------------------------------------------

def random_kernel(rng, D, family=None) -> KernelSpec:
    fams = list(KernelFamily)
    family = fams[rng.integers(len(fams))] if family is None else KernelFamily(family)
    var = rng.uniform(0.2, 3.0)
    if family is KernelFamily.SQEXP_MATRIX:
        B = rng.standard_normal((D, D))
        return KernelSpec(family, var, B @ B.T / D + 0.3 * np.eye(D))
    return KernelSpec(family, var, rng.uniform(0.2, 2.0))


def random_lmc(rng, P=None, L=None, D=None) -> LmcModel:
    P = int(rng.integers(1, 4)) if P is None else P
    L = int(rng.integers(1, 4)) if L is None else L
    D = int(rng.integers(1, 4)) if D is None else D
    return LmcModel(
        tuple(random_kernel(rng, D) for _ in range(L)),
        rng.standard_normal((P, L)),
        rng.uniform(0.05, 1.0, size=P),
    )


def tight_lmc(rng, D=1) -> LmcModel:
    """Single-channel, single-latent model where one query makes the bound an equality."""
    w = rng.uniform(0.5, 2.0)
    return LmcModel((random_kernel(rng, D, "Matern52"),), np.array([[w]]), np.array([rng.uniform(0.1, 1.0)]))


def greedy_sequence(model, pool, n, mode="POO", rng=None):
    """Greedy max-variance (POO) or max-determinant (FOO) queries from a pool, without repeats."""
    pool = np.asarray(pool, dtype=float).reshape(len(pool), -1)
    P = model.P
    if mode == "FOO":
        chosen = []
        for k in range(n):
            Xo = np.repeat(pool[chosen], P, axis=0)
            co = np.tile(np.arange(P), len(chosen))
            dets = [np.linalg.det(_posterior_blocks(model, Xo, co, x)) if j not in chosen else -np.inf
                    for j, x in enumerate(pool)]
            chosen.append(int(np.argmax(dets)))
        return pool[chosen]
    cand_X = np.repeat(pool, P, axis=0)
    cand_c = np.tile(np.arange(P), len(pool))
    K = model.cross_cov(cand_X, cand_c, cand_X, cand_c)
    noise = model.noise_vars[cand_c]
    var = np.diag(K).copy()
    basis = np.zeros((0, len(cand_c)))
    taken = np.zeros(len(cand_c), dtype=bool)
    order = []
    for _ in range(n):
        j = int(np.argmax(np.where(taken, -np.inf, var)))
        row = (K[j] - basis[:, j] @ basis) / np.sqrt(var[j] + noise[j])
        basis = np.vstack([basis, row])
        var = var - row ** 2
        taken[j] = True
        order.append(j)
    return cand_X[order], cand_c[order]


def _random_points(rng, D, n):
    return rng.uniform(-2.0, 2.0, size=(n, D))


def _random_psd(rng, M, rank=None):
    rank = M if rank is None else rank
    B = rng.standard_normal((M, rank))
    return B @ B.T


CHECKS = ("mi_chain", "lemma1", "fischer", "weyl", "det_bounds")


def corpus_instance(check, rng, i, c1_scale=1.0) -> CheckReport:
    """Draw instance ``i`` of a check's corpus.  Every tenth lemma-1 instance is
    a single query on a single-channel model where the bound is attained."""
    if check == "weyl":
        L = int(rng.integers(1, 4))
        M = int(rng.integers(1, 7))
        if i % 5 == 0:
            mats = [np.diag(rng.uniform(0, 2, size=M)) for _ in range(L)]
        else:
            mats = [_random_psd(rng, M, int(rng.integers(1, M + 1))) for _ in range(L)]
        return check_weyl(mats)
    if check == "lemma1" and i % 10 == 0:
        model = tight_lmc(rng)
        x = rng.uniform(-2.0, 2.0, size=(1, 1))
        mode = "POO" if i % 20 == 0 else "FOO"
        seq = (x, [0]) if mode == "POO" else x
        return check_lemma1(model, seq, mode, c1_scale=c1_scale)
    D = int(rng.integers(1, 4))
    model = random_lmc(rng, D=D)
    if check == "mi_chain":
        n = int(rng.integers(1, 13))
        X = _random_points(rng, D, n)
        return check_mi_chain(model, (X, rng.integers(0, model.P, size=n)))
    if check == "lemma1":
        pool = _random_points(rng, D, int(rng.integers(5, 16)))
        if i % 2:
            n = int(rng.integers(1, min(20, len(pool) * model.P) + 1))
            return check_lemma1(model, greedy_sequence(model, pool, n, "POO"), "POO", c1_scale=c1_scale)
        n = int(rng.integers(1, min(8, len(pool)) + 1))
        return check_lemma1(model, greedy_sequence(model, pool, n, "FOO"), "FOO", c1_scale=c1_scale)
    if check == "fischer":
        if i % 10 == 0:
            model = LmcModel(model.latent_kernels[:1] * model.P, np.eye(model.P), model.noise_vars)
        return check_fischer(model, _random_points(rng, D, int(rng.integers(0, 7))))
    if check == "det_bounds":
        X = _random_points(rng, D, int(rng.integers(0, 7)))
        x_star = _random_points(rng, D, 1)[0]
        return check_det_bounds(model, X, x_star)
    raise InputError(f"unknown check {check!r}")


def run_corpus(seed=0, count=1000, checks=CHECKS, c1_scale=1.0):
    """Run ``count`` seeded random instances of every check; returns report rows."""
    rows = []
    for c, check in enumerate(checks):
        rng = make_rng([int(seed), c])
        for i in range(count):
            rep = corpus_instance(check, rng, i, c1_scale)
            rep.detail = f"instance={i}" + (f";{rep.detail}" if rep.detail else "")
            rows.append(rep)
    return rows
