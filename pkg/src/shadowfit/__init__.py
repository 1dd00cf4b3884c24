"""Shadow-variable estimation of regression models with nonignorably missing outcomes."""

from .densities import BernoulliZGivenU, GaussianZGivenU, NormalDensity
from .estimator import (
    EstimationError,
    FitConfig,
    FitResult,
    ParametricDensityFit,
    SandwichParts,
    bootstrap_variance,
    complete_case_fit,
    complete_case_covariance,
    efficient_score,
    estimating_fn,
    fit,
    fit_covariate_density,
    sandwich,
    score_terms,
)
from .fredholm import (
    BSolution,
    FredholmError,
    FredholmSystem,
    assemble_density,
    assemble_empirical,
    assemble_general,
    assemble_stratified,
    interpolate_b,
    solve_system,
)
from .integrate import XGrid, YGrid, gauss_hermite, integrate_y, normal_xgrid, tensor_grid, y_grid
from .kernels import BandwidthRule, KernelSpec, bandwidth, kde, kernel_eval, product_kernel
from .model import Dataset, DimensionError, MechanismModel, Observation, OutcomeModel

__version__ = "0.1.0"
