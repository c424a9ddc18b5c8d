"""Langevin samplers on path space for conditioned diffusions."""

from .model import (
    BridgeProblem,
    FreePathProblem,
    Grid,
    MatrixSet,
    Observations,
    Path,
    Potential,
    ProblemSpec,
    SmoothingProblem,
    StartWeight,
    builtin_potential,
    make_matrix_set,
    make_potential,
    stationary_start_weight,
    validate_problem,
    zero_potential,
)
from .operators import (
    DiscreteOperator,
    assemble_precision,
    cholesky_banded,
    mean_path,
    sample_from_precision,
    solve_bvp,
)
from .measure import (
    TargetMeasure,
    build_target,
    girsanov_log_density,
    grad_log_tilt,
    log_tilt,
    om_potential,
    om_potential_grad,
)
from .sampler import (
    ChainResult,
    ChainState,
    SamplerConfig,
    default_functionals,
    run_chain,
    solve_preconditioner,
    step_preconditioned,
    step_semi_implicit,
)
from .oracle import (
    GaussianMoments,
    WeightedEnsemble,
    gaussian_reference_moments,
    importance_bridge,
    mala_oracle,
    rejection_bridge,
    rts_smoother,
    simulate_sde,
)
from .diagnostics import (
    ErgodicEstimate,
    compare_report,
    ergodic_average,
    iact,
    ks_distance,
)

__version__ = "0.1.0"
