"""Distributional limit experiments: CLT trend, Berry-Esseen style decay on
an i.i.d. surrogate, and an exact lattice local-limit computation.

Run:  python3 demos/limit_experiments.py   (about a minute)
"""

import math

import numpy as np

from towerlimits.limit_lab import (
    ExperimentConfig,
    IidSurrogate,
    center_observable,
    iid_exponential_observable,
    run_berry_esseen,
    run_clt,
    run_lattice_llt,
)
from towerlimits.tower_core import (
    LsvSystem,
    TowerObservable,
    build_finite_tower,
    observable_identity,
)

# --- CLT on the intermittent map -------------------------------------------
system = LsvSystem(alpha=0.3)
f = center_observable(system, observable_identity())
clt = run_clt(ExperimentConfig(system, f, (16, 64, 256, 1024), 20_000, 3, "clt"))
print("CLT:  n      KS distance   noise floor")
for n, ks in zip(clt.n_grid, clt.ks):
    print(f"  {n:6d}  {ks:11.5f}   {clt.noise_floor:.5f}")
print(f"sigma^2 = {clt.sigma2:.5f} ({clt.variance.source}); "
      f"trend toward normal: {clt.trend_ok}\n")

# --- Berry-Esseen calibration on independent exponentials -------------------
be = run_berry_esseen(ExperimentConfig(
    IidSurrogate(), iid_exponential_observable(), (2, 4, 8, 16, 32, 64),
    100_000, 5, "berry_esseen", sigma2_value=1.0, expected_exponent=0.5))
lo, hi = be.exponent_ci
print(f"Berry-Esseen surrogate: fitted decay exponent {be.exponent:.3f} "
      f"(CI [{lo:.3f}, {hi:.3f}], theory 1/2)\n")

# --- Exact lattice local limit ----------------------------------------------
# A five-step unit-variance walk on the integers, driven through the exact
# state/value dynamic program rather than Monte Carlo.
p = np.array([1 / 16, 1 / 4, 3 / 8, 1 / 4, 1 / 16])
tower = build_finite_tower(p, np.ones(5, dtype=int), np.tile(p, (5, 1)))
steps = TowerObservable("cellwise_constant",
                        np.array([-2.0, -1.0, 0.0, 1.0, 2.0]),
                        mean_removed=True)
lat = run_lattice_llt(ExperimentConfig(tower, steps, (256, 1024, 4096),
                                       1000, 0, "lattice_llt"))
print("lattice LLT:  n      sqrt(n) P(S_n=0)   limit 1/sqrt(2 pi)")
for n, s in zip(lat.n_grid, lat.stat):
    print(f"  {n:6d}        {s:.6f}           {1 / math.sqrt(2 * math.pi):.6f}")
