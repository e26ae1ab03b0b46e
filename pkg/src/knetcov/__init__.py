"""Kalman filtering with a learned gain and gain-derived error covariances."""

from .errors import (
    ContractError,
    ConvergenceError,
    DivergenceError,
    GainBoundaryError,
    NumericError,
    SingularInnovationError,
    UnsupportedGeometryError,
)
from .kalman import kf_riccati_steady_state, run_filter
from .knet import TrainConfig, evaluate_knet, run_knet, train_knet
from .ssmodel import Dataset, StateSpaceModel, generate_dataset, lorenz_model, scalar_model, whiten
from .uncertainty import ObservationGeometry, error_cov_from_gain, predict_error

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "ConvergenceError",
    "Dataset",
    "DivergenceError",
    "GainBoundaryError",
    "NumericError",
    "ObservationGeometry",
    "SingularInnovationError",
    "StateSpaceModel",
    "TrainConfig",
    "UnsupportedGeometryError",
    "error_cov_from_gain",
    "evaluate_knet",
    "generate_dataset",
    "kf_riccati_steady_state",
    "lorenz_model",
    "predict_error",
    "run_filter",
    "run_knet",
    "scalar_model",
    "train_knet",
    "whiten",
]
