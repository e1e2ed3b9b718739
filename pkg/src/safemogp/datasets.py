"""Synthetic generators, CSV ingestion and the pool/test containers the AL loop consumes.

All randomness goes through ``make_rng`` (numpy's counter-based Philox), so a
given integer seed reproduces the same data on every platform.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyFileError, InputError, MissingColumnError, NonNumericCellError, NumericalError
from .gp_models import ObservationSet
from .inference import make_rng
from .kernels import KernelFamily, KernelSpec, kernel_matrix

SIN_SIGMOID_NOISE = 0.4
SIN_SIGMOID_SAFETY_NOISE = 0.05
SIN_SIGMOID_THRESHOLD = 0.7
SIN_SIGMOID_DOMAIN = (-2.0, 2.0)


class OracleKind(str, enum.Enum):
    SIN_SIGMOID = "SinSigmoid"
    MOGP_SAMPLES = "MogpSamples"


def quantile(values, q) -> float:
    """Linear interpolation between order statistics (the "type 7" estimator)."""
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise InputError("quantile of an empty sequence")
    if not 0.0 <= q <= 1.0:
        raise InputError(f"q must lie in [0, 1], got {q}")
    return float(np.quantile(values, q, method="linear"))


@dataclass(frozen=True, eq=False)
class Pool:
    """Candidate inputs with their hidden labels, used to simulate queries."""

    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    safe: np.ndarray

    def __len__(self):
        return self.X.shape[0]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        return Pool(self.X[idx], self.Y[idx], self.Z[idx], self.safe[idx])


@dataclass(frozen=True, eq=False)
class TestSet:
    __test__ = False  # keep pytest from collecting it

    X: np.ndarray
    targets: np.ndarray
    noisy: bool = False


@dataclass(frozen=True, eq=False)
class ALDataset:
    """Everything one AL repeat needs: a training pool, a safe test set and the safety rule."""

    pool: Pool
    test: TestSet
    z_bar: float
    z_mode: str
    name: str = ""

    @property
    def P(self):
        return self.pool.Y.shape[1]

    @property
    def D(self):
        return self.pool.X.shape[1]


@dataclass(frozen=True, eq=False)
class SyntheticOracle:
    kind: OracleKind
    noise: float
    safety_noise: float
    seed: int
    threshold: float = SIN_SIGMOID_THRESHOLD
    tables: dict = field(default=None, repr=False)

    def f_true(self, x):
        if self.kind is not OracleKind.SIN_SIGMOID:
            raise InputError("f_true is only closed-form for the sin-sigmoid oracle")
        return sin_sigmoid_f(x)

    def h_true(self, x):
        if self.kind is not OracleKind.SIN_SIGMOID:
            raise InputError("h_true is only closed-form for the sin-sigmoid oracle")
        return sin_sigmoid_h(x)

    def is_safe(self, x):
        return self.h_true(x) > self.threshold


def sin_sigmoid_f(x):
    x = np.asarray(x, dtype=float).reshape(-1)
    s = np.sin(10.0 * x)
    sig = 1.0 / (1.0 + np.exp(-2.0 * x))
    return np.stack([s + sig, s - sig], axis=1)


def sin_sigmoid_h(x):
    x = np.asarray(x, dtype=float).reshape(-1)
    return np.exp(-((x - 0.1) ** 2) / 2.0)


def sin_sigmoid_safe_interval(threshold=SIN_SIGMOID_THRESHOLD):
    half = math.sqrt(-2.0 * math.log(threshold))
    return 0.1 - half, 0.1 + half


def gen_sin_sigmoid(n_pool, n_test, seed):
    """Pool over [-2, 2] with noisy (y, z) labels and a noise-free test set inside the safe interval."""
    if n_pool < 1 or n_test < 1:
        raise InputError("counts must be >= 1")
    rng = make_rng(seed)
    lo, hi = SIN_SIGMOID_DOMAIN
    x = rng.uniform(lo, hi, size=n_pool)
    Y = sin_sigmoid_f(x) + SIN_SIGMOID_NOISE * rng.standard_normal((n_pool, 2))
    Z = sin_sigmoid_h(x) + SIN_SIGMOID_SAFETY_NOISE * rng.standard_normal(n_pool)
    safe = sin_sigmoid_h(x) > SIN_SIGMOID_THRESHOLD
    a, b = sin_sigmoid_safe_interval()
    xt = rng.uniform(a, b, size=n_test)
    pool = Pool(x[:, None], Y, Z, safe)
    test = TestSet(xt[:, None], sin_sigmoid_f(xt), noisy=False)
    oracle = SyntheticOracle(OracleKind.SIN_SIGMOID, SIN_SIGMOID_NOISE, SIN_SIGMOID_SAFETY_NOISE, seed)
    return pool, test, oracle


def sin_sigmoid_dataset(n_pool=200, n_test=200, seed=0) -> ALDataset:
    pool, test, _ = gen_sin_sigmoid(n_pool, n_test, seed)
    return ALDataset(pool, test, SIN_SIGMOID_THRESHOLD, "lower", name="sin_sigmoid")


def _unique_uniform_inputs(rng, n, D, lo=-2.0, hi=2.0):
    X = rng.uniform(lo, hi, size=(n, D))
    while True:
        _, first = np.unique(X, axis=0, return_index=True)
        if len(first) == n:
            break
        X = X[np.sort(first)]
        X = np.vstack([X, rng.uniform(lo, hi, size=(n - len(X), D))])
    return X[rng.permutation(n)]


def _draw_gp(rng, K, size):
    """Draw ``size`` zero-mean samples with covariance K (rows are samples)."""
    scale = float(np.mean(np.diag(K)))
    jitter = 1e-10
    while jitter <= 1e-2:
        try:
            chol = np.linalg.cholesky(K + jitter * scale * np.eye(K.shape[0]))
            return rng.standard_normal((size, K.shape[0])) @ chol.T
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NumericalError("could not factor the sample covariance")


@dataclass(frozen=True, eq=False)
class MogpSampleSet:
    X: np.ndarray
    W: np.ndarray
    lengthscales: np.ndarray
    safety_kernel: KernelSpec
    F: list
    Y: list
    Z_clean: list
    Z: list
    threshold: float
    n_train: int

    def repeat(self, e) -> ALDataset:
        """Repeat ``e`` as an AL dataset: first ``n_train`` rows form the pool, the rest the test set.

        Truth for safety is the noise-free safety value above the threshold.
        The test set keeps only truly safe rows and scores against noisy outputs.
        """
        n = self.n_train
        safe = self.Z_clean[e] > self.threshold
        pool = Pool(self.X[:n], self.Y[e][:n], self.Z[e][:n], safe[:n])
        test_mask = safe[n:]
        test = TestSet(self.X[n:][test_mask], self.Y[e][n:][test_mask], noisy=True)
        return ALDataset(pool, test, self.threshold, "lower", name=f"mogp_samples[{e}]")


def gen_mogp_samples(D=2, P=4, L=3, n_train=2000, n_test=500, repeats=30, seed=123,
                     noise=0.4, safety_noise=0.05) -> MogpSampleSet:
    """Six-step MOGP sample generator: unique inputs, random SE kernels, latent draws,
    unit-norm rows of W, Y = G W^T, then additive noise.  The safety threshold is the
    20% quantile of all pooled noisy safety values (used as a lower bound)."""
    if min(D, P, L, n_train, n_test, repeats) < 1:
        raise InputError("all counts must be >= 1")
    rng = make_rng(seed)
    n = n_train + n_test
    X = _unique_uniform_inputs(rng, n, D)
    hyp = rng.uniform(0.01, 1.0, size=(L + 1, 2))
    lengthscales = hyp[:L, 1].copy()
    latent = [KernelSpec(KernelFamily.SQEXP_ISO, 1.0, r) for r in lengthscales]
    safety_kernel = KernelSpec(KernelFamily.SQEXP_ISO, hyp[L, 0], 1.0)
    G = np.zeros((repeats, n, L))
    for l, k in enumerate(latent):
        G[:, :, l] = _draw_gp(rng, kernel_matrix(k, X), repeats)
    Z_clean = _draw_gp(rng, kernel_matrix(safety_kernel, X), repeats)
    rows = []
    while len(rows) < P:
        v = rng.standard_normal(L)
        norm = np.linalg.norm(v)
        if norm == 0.0:
            continue
        rows.append(v / norm)
    W = np.array(rows)
    F = [G[e] @ W.T for e in range(repeats)]
    Y = [F[e] + noise * rng.standard_normal((n, P)) for e in range(repeats)]
    Z = [Z_clean[e] + safety_noise * rng.standard_normal(n) for e in range(repeats)]
    threshold = quantile(np.concatenate(Z), 0.2)
    return MogpSampleSet(X, W, lengthscales, safety_kernel, F, Y, list(Z_clean), Z, threshold, n_train)


@dataclass(frozen=True)
class CsvSchema:
    input_columns: tuple
    output_columns: tuple
    safety_column: str = None
    test_fraction: float = 0.0
    standardize: bool = True
    split_seed: int = 0

    def __post_init__(self):
        if not self.input_columns or not self.output_columns:
            raise InputError("schema needs at least one input and one output column")
        if not 0.0 <= self.test_fraction < 1.0:
            raise InputError("test_fraction must lie in [0, 1)")


@dataclass(frozen=True, eq=False)
class CsvDataset:
    pool: ObservationSet
    test_X: np.ndarray
    test_Y: np.ndarray
    test_Z: np.ndarray
    mean: dict
    std: dict


def _read_table(path, columns):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyFileError(f"{path} is empty") from None
        for col in columns:
            if col not in header:
                raise MissingColumnError(col)
        pos = [header.index(c) for c in columns]
        rows = []
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            values = []
            for col, j in zip(columns, pos):
                token = row[j].strip() if j < len(row) else ""
                try:
                    values.append(float(token))
                except ValueError:
                    raise NonNumericCellError(row_no, col, token) from None
                if not math.isfinite(values[-1]):
                    raise NonNumericCellError(row_no, col, token)
            rows.append(values)
    if not rows:
        raise EmptyFileError(f"{path} has a header but no data rows")
    return np.array(rows)


def load_csv_dataset(path, schema: CsvSchema) -> CsvDataset:
    """Parse a comma-separated file into a fully observed pool plus an optional held-out split.

    With ``standardize`` every column is shifted/scaled to mean 0, variance 1
    using statistics of the training rows only.
    """
    columns = list(schema.input_columns) + list(schema.output_columns)
    if schema.safety_column is not None:
        columns.append(schema.safety_column)
    table = _read_table(path, columns)
    n = table.shape[0]
    n_test = int(round(schema.test_fraction * n))
    order = make_rng(schema.split_seed).permutation(n) if n_test else np.arange(n)
    train, test = table[order[n_test:]], table[order[:n_test]]
    if schema.standardize:
        mu = train.mean(axis=0)
        sd = train.std(axis=0)
        sd[sd == 0] = 1.0
        train = (train - mu) / sd
        test = (test - mu) / sd
    else:
        mu, sd = np.zeros(len(columns)), np.ones(len(columns))
    d, p = len(schema.input_columns), len(schema.output_columns)
    Z = train[:, d + p] if schema.safety_column is not None else None
    pool = ObservationSet.fully_observed(train[:, :d], train[:, d:d + p], Z)
    test_Z = test[:, d + p] if schema.safety_column is not None else np.zeros(0)
    return CsvDataset(pool, test[:, :d], test[:, d:d + p], test_Z,
                      dict(zip(columns, mu)), dict(zip(columns, sd)))


def csv_al_dataset(path, schema: CsvSchema, z_bar, z_mode) -> ALDataset:
    """CSV data as an AL dataset; measured safety values double as ground truth.

    ``z_bar`` is in the file's units; the returned dataset holds it on the
    standardized scale when the schema standardizes.
    """
    if schema.safety_column is None:
        raise InputError("an AL run over CSV data needs a safety column")
    data = load_csv_dataset(path, schema)
    # the threshold is given in raw units; move it to the standardized scale
    z_bar = (z_bar - data.mean[schema.safety_column]) / data.std[schema.safety_column]
    pool_obs = data.pool
    N, P = pool_obs.N, pool_obs.P
    Y = pool_obs.value.reshape(P, N).T
    Z = pool_obs.safety_value
    safe = Z > z_bar if z_mode == "lower" else Z < z_bar
    test_safe = data.test_Z > z_bar if z_mode == "lower" else data.test_Z < z_bar
    pool = Pool(pool_obs.inputs, Y, Z, safe)
    test = TestSet(data.test_X[test_safe], data.test_Y[test_safe], noisy=True)
    return ALDataset(pool, test, z_bar, z_mode, name=Path(path).stem)
