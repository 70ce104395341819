"""Finite-sample valid split likelihood-ratio inference for Gaussian
variance-components models, with structure-exploiting fast paths."""

__version__ = "0.1.0"

from .errors import (
    DegenerateDataError,
    InvalidDesignError,
    InvalidParameterError,
    InvalidSplitError,
    NotJointlyDiagonalizableError,
    OptimizationFailureError,
    SingularCovarianceError,
    SizeGuardError,
    VcsplitError,
)
from .model import (
    KernelSet,
    ResponseVector,
    Sigma2Param,
    ThetaParam,
    assemble_sigma,
    loglik_dense,
    loglik_diag,
    loglik_grad_dense,
    loglik_grad_diag,
    profile_tau2,
    sigma2_from_theta,
    theta_from_sigma2,
)
from .partition import (
    BlockKernels,
    Partition,
    block_kernels,
    block_sigma,
    cond_loglik,
    conditional_moments,
    make_partition,
    partition_from_indices,
    profile_tau2_cond,
)
from .estimation import (
    FitOptions,
    FitResult,
    NullSpec,
    fit_conditional,
    fit_conditional_sigma2,
    fit_marginal,
    fit_null_1d,
    fit_unconstrained,
)
from .slrt import (
    CiResult,
    SlrtResult,
    SplitFit,
    acceptance_width,
    ci_width_distribution,
    confidence_interval,
    kfold_slrt,
    make_folds,
    p_value,
    randomized_decision,
    split_lrt,
    to_diagonal_coords,
)
from .structured import (
    CrossedDesign,
    EigenStructure,
    NullRotation,
    approx_truncate,
    build_crossed_Z,
    crossed_eigs,
    joint_diagonalize_annihilating,
    null_rotation,
    rotate_problem,
)
from .simulate import (
    ExperimentSpec,
    ar1_eigen_kernel,
    disjoint_support_kernels,
    gen_data,
    run_coverage,
    run_experiment,
    run_power,
    run_timing,
    spiked_eigenvalues,
    spiked_kernel_pair,
    truncated_pair_eigs,
    write_table,
)
from .diagnostics import BlupResult, blup, center_response, qq_data, residual_vs_fitted
