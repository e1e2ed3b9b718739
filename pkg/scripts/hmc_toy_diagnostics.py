"""HMC on the sin-sigmoid toy model with the default (full-length) chain settings.

Prints acceptance rate, adapted step size and posterior summaries of the
hyperparameters for a few seeds.
"""

import argparse

import numpy as np

from safemogp.acquisition import initial_design
from safemogp.datasets import sin_sigmoid_dataset
from safemogp.gp_models import HyperLayout, ObservationSet
from safemogp.inference import HmcSettings, HyperPrior, hmc_sample, make_rng

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--seeds", type=int, default=3)
parser.add_argument("--n-init", type=int, default=12)
args = parser.parse_args()

layout = HyperLayout(2, ("Matern52", "Matern52"))
for seed in range(args.seeds):
    ds = sin_sigmoid_dataset(seed=[seed, 0, 0])
    idx, ch = initial_design(ds, args.n_init, "POO", make_rng([seed, 0, 1]))
    entries = [(k, int(p), float(ds.pool.Y[j, p])) for k, (j, p) in enumerate(zip(idx, ch))]
    obs = ObservationSet.from_entries(ds.pool.X[idx], entries, 2)
    res = hmc_sample(obs, HyperPrior(), HmcSettings(), layout, rng=make_rng([seed, 9]))
    noise = np.array([m.noise_vars for m in res.models()])
    print(f"seed {seed}: accept {res.accept_rate:.3f}, step {res.chain.step_size:.4f}, "
          f"noise var mean {np.round(noise.mean(0), 3)}, samples {len(res.samples)}")
