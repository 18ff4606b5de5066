"""Statistical dimensions, recovery and denoising for monotone sparsely-varying signals."""

from .cones import ConeSpec, McEstimate, brute_force_project, mc_statdim, pava, project, project_polar
from .denoise import (DifferenceOperator, QpSolution, RiskEstimate, dist_qp, levy_bound, minimax_risk,
                      optimal_lambda, prox_denoise, tau_avg, tau_star, walk_max_expectation)
from .recovery import ExperimentGrid, RecoveryResult, SensingInstance, gaussian_matrix, phase_sweep, solve_cs
from .signals import (ChangePointSet, SegmentPartition, Signal, Variant, detect_change_points, random_instance,
                      segment_partition)
from .statdim import (curve_difference_max, harmonic, nonneg_l1_ptc, sd_average_asymptotic, sd_extremes,
                      sd_monotone, sd_nonneg)

__version__ = "0.1.0"
