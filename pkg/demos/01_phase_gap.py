"""Signal that only the pooled sample can see.

Each machine holds n = p = 500 rows, so a spike of strength l < 1 is invisible
to any single machine.  Ten machines together can detect spikes above
sqrt(1/10) ~ 0.32.  Averaging the local eigenvectors inherits the local blind
spot.  Shifted subspace iteration from a random start recovers the spike,
quickly when it is well inside the gap and slowly near the pooled threshold,
where each round contracts the error only a little.
"""
import math

import numpy as np

from dpca import IterationConfig, SpikedModelSpec, distributed_pca, make_population, sample_gaussian_spiked
from dpca.oracle import pooled_covariance_pca
from dpca.worker import compute_local_covariance

p = n = 500
K = 10
T = math.ceil(math.log(K)) + 2

print(f"{'l':>5} {'pooled':>8} {'one-round':>10} {'T=' + str(T):>8} {'T=40':>8}   (squared cosine with the true spike)")
for l in (0.45, 0.8, 1.5):
    spec = SpikedModelSpec(p=p, spikes=(l,), basis_seed=1)
    u = make_population(spec).basis
    shards = sample_gaussian_spiked(spec, n, K, 2)
    sums = [compute_local_covariance(s) for s in shards]
    fit = lambda B: float((u.T @ B)[0, 0] ** 2)
    one = distributed_pca(sums, IterationConfig(r=1, T=1)).basis
    run = distributed_pca(sums, IterationConfig(r=1, T=40, init="random", init_seed=3))
    print(f"{l:5.2f} {fit(pooled_covariance_pca(shards, 1).basis):8.3f} {fit(one):10.3f} "
          f"{fit(run.history[T - 1]):8.3f} {fit(run.basis):8.3f}")
