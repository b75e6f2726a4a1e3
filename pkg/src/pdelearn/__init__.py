"""Learning evolution PDEs from gridded observations.

The model approximates an unknown dynamics u_t = F(x, y, u, du/dx, ...) by a
forward-Euler step whose spatial operators are convolution stencils tied to
differential operators through hard constraints on their moment matrices,
composed with interpolated variable coefficients and an optional pointwise
nonlinear source.  Training is layer-wise L-BFGS on n-step prediction error.
"""

from .fields import (
    Boundary,
    Field,
    Grid2D,
    circular_convolve,
    dirichlet_convolve,
    field_from_function,
    read_pdf1,
    restrict,
    write_pdf1,
)
from .moments import (
    ConstraintPattern,
    SumRules,
    apply_derivative,
    averaging_pattern,
    constrained_parameterization,
    derivative_pattern,
    filter_from_moments,
    frozen_filter,
    moment_matrix,
    sum_rule_order,
)
from .datagen import (
    InitSpec,
    IntegrationError,
    Trajectory,
    add_noise,
    make_dataset,
    sample_initial_condition,
    solve_linear_convdiff,
    solve_nonlinear_diffusion,
)
from .model import (
    BlowUpError,
    FilterMode,
    ModelConfig,
    StepModel,
    load_checkpoint,
    save_checkpoint,
)
from .response import CoefficientInterp, SourceModel, eval_coefficient
from .lbfgs import LbfgsConfig, LbfgsResult, lbfgs_minimize
from .train import TrainConfig, train_layerwise
from .evaluate import (
    ErrorCurve,
    coefficient_error,
    generalization_study,
    normalized_error,
    prediction_error_study,
    source_comparison,
)

__version__ = "0.1.0"
