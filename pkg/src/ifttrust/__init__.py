"""Free-theory information field theory on finite-difference meshes.

Physics-informed Gaussian priors from the Dirichlet energy of the Poisson
equation, exact posterior updates, closed-form derivatives of the trust
posterior potential, and inference of the model trust.
"""

from .calculus import (
    PotentialCalculusReport,
    Verdict,
    grad_covariances,
    grad_param_potential,
    hessian_param_potential,
    informativeness_check,
    posterior_expected_energy,
    potential_calculus,
    prior_expected_energy,
    wellposedness_verdict,
)
from .free_theory import (
    BetaPrior,
    GaussianFieldMeasure,
    ParameterState,
    joint_potential,
    log_partition,
    marginal_neg_log_posterior,
    physics_prior,
    posterior_update,
    sample,
)
from .mesh import (
    Mesh,
    MeasurementSetup,
    OperatorMatrix,
    build_laplacian,
    build_measurement,
    build_mesh,
    design_metrics,
    dirichlet_energy,
    green_operator,
    uniform_design,
)
from .oracle import (
    fd_derivative,
    mc_quadratic_mean,
    mc_quadratic_second_moment,
    quadratic_mean_closed,
    quadratic_second_moment_closed,
)
from .trust import (
    TrustReport,
    TrustSolveError,
    convergence_study,
    limit_trust,
    model_error_sweep,
    second_derivative_at_optimum,
    solve_trust,
    synthesize_data,
)
from .config import ConfigError, load_config
from .verification import run_verification

__version__ = "0.1.0"
