"""Confidence interval for one entry of the spike projector.

With ``inference_mode`` the workers send their noise-level scalars next to the
step matrices, which lets the coordinator estimate the standard error of
``<u, U_hat U_hat^T v>`` at no extra pass over the data.  Coverage of the
nominal 95% interval is checked over repeated draws.
"""
import numpy as np

from dpca import IterationConfig, SpikedModelSpec, distributed_pca, make_population, sample_gaussian_spiked
from dpca.coordinator import bilinear_statistic
from dpca.worker import compute_local_covariance

p, n, K, reps = 100, 100, 50, 200
spec = SpikedModelSpec(p=p, spikes=(5.0, 4.0, 3.0), basis_seed=4)
U = make_population(spec).basis
rng = np.random.default_rng(0)
u, v = (x / np.linalg.norm(x) for x in rng.standard_normal((2, p)))

hits = 0
for rep in range(reps):
    shards = sample_gaussian_spiked(spec, n, K, 1000 + rep)
    est = distributed_pca([compute_local_covariance(s) for s in shards], IterationConfig(r=3, T=3, inference_mode=True))
    z, s2 = bilinear_statistic(u, v, est, U, K, n)
    hits += abs(z) <= 1.96
    if rep == 0:
        value = float(u @ est.basis @ est.basis.T @ v)
        half = 1.96 * np.sqrt(s2 / (K * n))
        print(f"first draw: {value:+.4f} +/- {half:.4f}, truth {float(u @ U @ U.T @ v):+.4f}")
        print(f"communication: {est.comm_log.total_floats} floats over {est.rounds_run} rounds")
print(f"coverage of the 95% interval over {reps} draws: {hits / reps:.3f}")
