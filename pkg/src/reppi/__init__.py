"""Prediction-powered inference with recalibrated imputed losses."""

from .core import (
    ConvergenceError,
    DataError,
    DimensionError,
    EstimateResult,
    Family,
    LabeledDataset,
    LossModel,
    ReppiError,
    SingularMatrixError,
    UnlabeledDataset,
    gradient,
    hessian,
    loss,
    solve_shifted,
)
from .estimators import (
    METHODS,
    assign_folds,
    compute_power_matrix,
    crossfit_reppi,
    fit_method,
    fit_ppi,
    fit_ppi_plus_plus,
    fit_reppi,
    fit_xy_only,
)
from .recalibrate import RecalibratorKind, RecalibratorSpec, fit_recalibrator, predict
from .simulation import ScenarioKind, ScenarioSpec, generate, oracle_traces, run_study
from .variance import confidence_interval, gaussian_quadratic_trace, normal_quantile

__version__ = "0.1.0"
