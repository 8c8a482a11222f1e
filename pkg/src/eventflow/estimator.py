"""Estimator-style wrapper: fit on a dataset of event-labeled windows, then
predict point forecasts or sample full ensembles for scheduled future events."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import checkpoint as ckpt
from . import metrics
from .dataset import split_windows
from .denoiser import DenoiserParams, ModelConfig
from .forecasting import ForecastConfig, ForecastEnsemble, forecast_windows
from .training import TrainConfig, fit as train_fit
from .validation import as_windows


class EventFlowForecaster(BaseEstimator):
    """Autoregressive flow-matching forecaster conditioned on event embeddings.

    ``fit`` trains the velocity-field denoiser on sliding (p history, q
    future) windows of a MultimodalDataset; ``predict`` returns ensemble
    mean forecasts for windows with scheduled future events, and ``sample``
    returns the full ensembles. Constructor arguments follow the estimator
    convention (stored verbatim, validated at fit time).
    """

    def __init__(
        self,
        p: int = 4,
        q: int = 2,
        stride: int = 1,
        patch: int = 1,
        depth: int = 3,
        d_model: int = 256,
        d_state: int = 48,
        m_state: int = 4,
        d_ff: int = 1024,
        n_heads: int = 4,
        resample: int = 2,
        stacked: bool = False,
        batch_size: int = 64,
        max_epochs: int = 100,
        eval_every: int = 5,
        patience: int = 5,
        lr_peak: float = 2e-4,
        weight_decay: float = 1e-3,
        fixed_timestep: bool = False,
        T: int = 50,
        n_samples: int = 100,
        use_event_delta: bool = True,
        val_fraction: float = 0.15,
        seed: int = 0,
    ):
        self.p = p
        self.q = q
        self.stride = stride
        self.patch = patch
        self.depth = depth
        self.d_model = d_model
        self.d_state = d_state
        self.m_state = m_state
        self.d_ff = d_ff
        self.n_heads = n_heads
        self.resample = resample
        self.stacked = stacked
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.eval_every = eval_every
        self.patience = patience
        self.lr_peak = lr_peak
        self.weight_decay = weight_decay
        self.fixed_timestep = fixed_timestep
        self.T = T
        self.n_samples = n_samples
        self.use_event_delta = use_event_delta
        self.val_fraction = val_fraction
        self.seed = seed

    # ------------------------------------------------------------- internals

    def _model_config(self, W: int, d_text: int) -> ModelConfig:
        return ModelConfig(
            W=W,
            patch=self.patch,
            M=self.depth,
            d_model=self.d_model,
            d_state=self.d_state,
            m_state=self.m_state,
            d_text=d_text,
            d_ff=self.d_ff,
            n_heads=self.n_heads,
            resample=self.resample,
            stacked=self.stacked,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            eval_every=self.eval_every,
            patience=self.patience,
            lr_peak=self.lr_peak,
            weight_decay=self.weight_decay,
            fixed_timestep=self.fixed_timestep,
            seed=self.seed,
        )

    def _forecast_config(self) -> ForecastConfig:
        return ForecastConfig(
            T=self.T,
            n_samples=self.n_samples,
            use_event_delta=self.use_event_delta and not self.fixed_timestep,
            seed=self.seed,
        )

    # -------------------------------------------------------------- sklearn

    def fit(self, X, y=None):
        """Train on windows from X (dataset, dataset path, or window list).

        The window list is split chronologically; the trailing val_fraction
        is held out for early stopping.
        """
        windows = as_windows(X, self.p, self.q, self.stride)
        train, val, _ = split_windows(windows, self.val_fraction)
        first = windows[0]
        model_config = self._model_config(first.W, first.history_embeddings.shape[1])
        params, history, _ = train_fit(
            train, val, model_config, self._train_config()
        )
        self.params_ = params
        self.model_config_ = model_config
        self.history_ = history
        self.n_parameters_ = params.n_parameters()
        self.n_train_windows_ = len(train)
        self.n_val_windows_ = len(val)
        return self

    def sample(self, X) -> list[ForecastEnsemble]:
        """Full forecast ensembles for each window of X."""
        check_is_fitted(self)
        windows = as_windows(X, self.p, self.q, self.stride)
        return forecast_windows(windows, self.params_, self._forecast_config())

    def predict(self, X) -> np.ndarray:
        """Ensemble-mean forecasts, shape [n_windows, q, W], original units."""
        ensembles = self.sample(X)
        return np.stack([e.point_forecast for e in ensembles])

    def score(self, X, y=None) -> float:
        """Negative mean MAE over windows (greater is better)."""
        check_is_fitted(self)
        windows = as_windows(X, self.p, self.q, self.stride)
        points = self.predict(windows)
        maes = [
            metrics.mae(w.future_values, points[i]) for i, w in enumerate(windows)
        ]
        return -float(np.mean(maes))

    # ---------------------------------------------------------- persistence

    def save(self, path) -> None:
        check_is_fitted(self)
        ckpt.save_checkpoint(
            path, self.params_, extra_config={"estimator": self.get_params()}
        )

    @classmethod
    def load(cls, path) -> "EventFlowForecaster":
        params, _, extra = ckpt.load_checkpoint(path)
        est = cls(**extra.get("estimator", {}))
        est.params_ = params
        est.model_config_ = params.config
        est.history_ = []
        est.n_parameters_ = params.n_parameters()
        return est
