"""Marginal sequential Monte Carlo engines, exact oracles and a variance lab."""

__version__ = "0.1.0"

from .engine import (
    EngineConfig,
    check_conditional_expectation,
    compute_marginal_log_weights,
    multinomial_resample,
    run_msmc,
    run_standard_smc,
)
from .errors import (
    ConfigError,
    DegenerateWeightsError,
    ExtinctionError,
    IntractableDensityError,
    MarginalSmcError,
    QuadratureDriftError,
)
from .filters import (
    AbcProblem,
    AuxApprox,
    LinearGaussianSSM,
    abc_gaussian_posterior,
    build_filter_model,
    fixture_lgssm,
    gaussian_abc_toy,
    make_abc,
    make_bpf,
    make_ipf,
    make_mapf,
    make_mpf,
    simulate_lgssm,
)
from .model import (
    DensityKernel,
    FilterTrace,
    MarginalModel,
    ModelStep,
    ParticleCloud,
    Potential,
    test_function,
    validate_model,
    weighted_estimate,
)
from .numerics import (
    Grid1D,
    ess,
    fit_loglog_slope,
    logsumexp,
    normalize_log_weights,
    trapezoid_integrate,
)
from .oracles import (
    GridDensity,
    KalmanTrace,
    exact_marginal_weight,
    grid_filter,
    grid_for_ssm,
    kalman_filter,
)
from .streams import SeededStream
