"""Greedy information gain on a squared-exponential pool: gamma(N) and gamma(N)/N."""

import argparse

import numpy as np

from safemogp.kernels import KernelSpec
from safemogp.theory import greedy_max_info_gain

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--pool", type=int, default=500)
parser.add_argument("--dim", type=int, default=1)
parser.add_argument("--lengthscale", type=float, default=0.3)
parser.add_argument("--noise", type=float, default=0.01)
parser.add_argument("--max-n", type=int, default=200)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

X = np.random.default_rng(args.seed).uniform(-2, 2, size=(args.pool, args.dim))
res = greedy_max_info_gain(KernelSpec("SqExpIso", 1.0, args.lengthscale), args.noise, X, args.max_n)
gamma = np.cumsum(res.increments)
for n in (1, 2, 5, 10, 20, 50, 100, 200, 500, 1000):
    if n <= args.max_n:
        print(f"N={n:5d}  gamma={gamma[n - 1]:9.4f}  gamma/N={gamma[n - 1] / n:.5f}")
