"""obswave: a numerical laboratory for stochastic wave equations.

Simulates the second-order stochastic wave equation with multiplicative
Brownian noise, certifies the weight-function geometry that makes boundary
or internal observation well posed, verifies the weighted pointwise
identities and observability bounds empirically, and reconstructs initial
data from pathwise observations by adjoint-based least squares.
"""

__version__ = "0.1.0"

from .errors import (
    CflViolation,
    ConfigError,
    DegenerateEnsemble,
    DegenerateMetric,
    EmptyGamma0,
    IllPosedGeometry,
    InvalidParameters,
    MissingArtifact,
    NoConvergence,
    NonFiniteState,
    NonPositiveWeight,
    ObsWaveError,
)
from .geometry import (
    BoundaryPartition,
    Grid,
    MetricField,
    QuadraticWeight,
    TabulatedWeight,
    cfl_number,
    check_observation_window,
    check_weight_condition,
    compute_observation_boundary,
    dilate_weight,
)
from .spde import (
    BrownianPath,
    NonlinearDynamics,
    ProblemSpec,
    StateSnapshot,
    Trajectory,
    energy,
    random_fourier_data,
    sample_brownian,
    solve,
    solve_ensemble,
    step,
    verify_energy_estimate,
)
from .carleman import (
    CarlemanWeight,
    assemble_coefficients,
    bisect_lambda0,
    build_carleman_weight,
    flux_identity_residual,
    pointwise_identity_residual,
    quadratic_variation_check,
    zero_order_lower_bound,
)
from .observability import (
    ObservationTrace,
    check_hidden_regularity,
    observe_boundary,
    observe_internal,
    trace_norm_sq,
    unique_continuation_probe,
    verify_observability,
)
from .reconstruction import (
    InverseProblem,
    ReconstructionResult,
    adjoint_dot_test,
    forward_map,
    gradient,
    objective,
    reconstruct,
    stability_probe,
)
