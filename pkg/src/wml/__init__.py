"""wml: matrix-weighted martingale square functions on finite filtered
probability spaces — reducing matrices, A_p characteristics, principal
sets, sparse operators, and empirical sharp-exponent probes."""

from .filtration import (FilteredSpace, Martingale, build_dyadic,
                         build_from_tree, cond_expect, cond_expect_leaf,
                         lp_norm, martingale_of)
from .linalg import (EllipsoidError, NormSampler, ValidationError,
                     jacobi_eigh, mvee_central, norm_ball_reducing,
                     spd_power, spectral_norm)
from .weights import (MatrixWeight, ReducingPair, a1_characteristic,
                      ap_characteristic, ap_equivalents, as_weight,
                      build_reducing_pair, conjugate, dual_weight,
                      exchanged_pair, reduce_pair, verify_reducing_bounds)
from .operators import (SparseFamily, SparseSet, lp_weighted_norm,
                        reduced_maximal, sparse_operator,
                        sparse_operator_scalar, square_fn,
                        weighted_cond_expect, weighted_square_fn)
from .principal import (FluctuationTable, PrincipalFamily, PrincipalSet,
                        build_principal_family, check_properties,
                        default_threshold, domination_constant,
                        fluctuation_table, halving_check, iteration_check,
                        iteration_constant, sparse_domination_check,
                        tail_energy, vanish_checks)
from .experiments import (SweepConfig, SweepRecord, exponent_fit,
                          leaf_scale_sweep, matrix_target_exponent,
                          opnorm_ascent, opnorm_power_iteration,
                          power_weight, rotating_weight, run_sweep,
                          scalar_target_exponent)

__version__ = "0.1.0"
