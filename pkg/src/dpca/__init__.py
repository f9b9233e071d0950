"""Few-round distributed PCA: one-round projector averaging, shifted subspace
iteration, Kendall's tau variant, a coordinator/worker runtime with exact
communication accounting, and random-matrix reference values."""
from .coordinator import (BiasSchedule, DistributedEstimate, Fixed, IterationConfig, LogSchedule,
                          aggregate_consensus, aggregate_one_round, bilinear_statistic, distributed_pca,
                          estimate_spiked_eigenvalues, population_bilinear_variance, run_distributed_pca)
from .linalg import projector_distance, qr_orthonormalize, sym_top_r_eig, top_r_singular_values
from .models import (InnovationSpec, SpikedModelSpec, make_population, sample_elliptical, sample_gaussian_spiked,
                     sample_general)
from .oracle import pooled_covariance_pca, pooled_kendall_pca
from .worker import compute_local_covariance, compute_local_kendall_tau, local_top_r, shifted_step, unshifted_step

__version__ = "0.1.0"
