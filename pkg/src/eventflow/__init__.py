"""Event-aware probabilistic time-series forecasting by autoregressive
rectified-flow matching with an event-conditioned U-shaped transformer."""

__version__ = "0.1.0"

from .dataset import (
    MultimodalDataset,
    SyntheticConfig,
    WindowSample,
    generate_synthetic,
    load_dataset,
    make_windows,
    save_dataset,
    split_windows,
    validate_dataset,
)
from .denoiser import DenoiserParams, LatentState, ModelConfig, denoise, init_params
from .errors import DataError, EventFlowError, NumericalError
from .estimator import EventFlowForecaster
from .flow import StepSchedule, event_step_size, make_schedule, solve_ode
from .forecasting import ForecastConfig, ForecastEnsemble, forecast_windows
from .metrics import MetricReport, compute_report, delta_j_ftsd, j_ftsd
from .training import TrainConfig, fit

__all__ = [
    "__version__",
    "MultimodalDataset",
    "SyntheticConfig",
    "WindowSample",
    "generate_synthetic",
    "load_dataset",
    "make_windows",
    "save_dataset",
    "split_windows",
    "validate_dataset",
    "DenoiserParams",
    "LatentState",
    "ModelConfig",
    "denoise",
    "init_params",
    "DataError",
    "EventFlowError",
    "NumericalError",
    "EventFlowForecaster",
    "StepSchedule",
    "event_step_size",
    "make_schedule",
    "solve_ode",
    "ForecastConfig",
    "ForecastEnsemble",
    "forecast_windows",
    "MetricReport",
    "compute_report",
    "delta_j_ftsd",
    "j_ftsd",
    "TrainConfig",
    "fit",
]
