"""Feedback particle filter toolkit: models, gain solvers, the filter and reference filters."""

from .errors import (
    BlowUpError,
    CFLError,
    ConfigError,
    ExtrapolationWarning,
    FilteringError,
    GainError,
    GalerkinDegeneracyWarning,
    ModelError,
    NumericalError,
    SingularGeometryError,
    StabilityError,
)
from .fpf import (
    ConstantStrategy,
    DnsKdeStrategy,
    EnsembleStats,
    FpfOptions,
    GalerkinStrategy,
    KalmanStrategy,
    ParticleEnsemble,
    ensemble_stats,
    fpf_step,
    innovation_increment,
    make_gain_strategy,
    run_fpf,
    wong_zakai_correction,
)
from .gain import (
    ConstantGain,
    CustomGain,
    GainField,
    GalerkinBasis1D,
    GalerkinGain1D,
    GridGain1D,
    KalmanGain,
    PoissonSolution1D,
    SmoluchowskiSpec,
    assemble_galerkin,
    constant_gain,
    dns_gain_1d,
    galerkin_gain,
    kalman_gain,
    poincare_diagnostic,
    smoluchowski_phi_mc,
    solve_galerkin,
    weighted_l2_gain_error,
    weighted_laplacian_gap,
)
from .grid import GridDensity1D, kde_density, kde_on_grid, silverman_bandwidth
from .models import (
    BearingOnlyScenario,
    DynamicsModel,
    GaussianInitial,
    LinearGaussianModel,
    MixtureDensity1D,
    bearing_jacobian,
    bearing_observation,
    build_linear_model,
    default_benchmark_mixture,
    wrap_angle,
)
from .reference import (
    GaussianBelief,
    grid_moments,
    initial_grid_density,
    kalman_bucy_step,
    ks_grid_step_1d,
    run_kalman_bucy,
    run_ks_grid,
    run_linearized_kalman_bucy,
)
from .sde import (
    NoiseStream,
    TimeGrid,
    TruthPath,
    euler_maruyama_step,
    simulate_truth,
    simulate_truth_batch,
    wiener_increment,
    wiener_increments,
)
from .trace import FilterTrace

__version__ = "0.1.0"
