"""Autoregressive forecasting: noise-free warm-up over history, then
segment-by-segment generation by integrating the learned velocity field.

Warm-up passes each z-scored history segment through the denoiser at t=1 (the
clean-data endpoint of the path), carrying only the latent state. Generation
then draws Gaussian noise per future segment and ensemble member, integrates
the denoiser as an ODE velocity field over the event-controlled (or uniform)
schedule, and hands the state produced at the final integration step of
segment s to segment s+1. Trajectories are de-normalized before return.

Ensemble member i draws its noise from a private RNG substream derived from
(seed, member index), so batched evaluation equals sequential evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import no_grad
from .dataset import WindowSample, zscore_apply, zscore_invert
from .denoiser import DenoiserParams, denoise
from .errors import NumericalError
from .flow import event_step_size, solve_ode, uniform_schedule


@dataclass(frozen=True)
class ForecastConfig:
    T: int = 50
    n_samples: int = 100
    use_event_delta: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")


@dataclass(frozen=True, eq=False)
class ForecastEnsemble:
    """Generated trajectories in original units plus their elementwise mean."""

    trajectories: np.ndarray  # [n_samples, q, W]
    point_forecast: np.ndarray  # [q, W]
    mean: float
    std: float


def make_ensemble(
    trajectories: np.ndarray, stats: tuple[float, float]
) -> ForecastEnsemble:
    trajectories = np.asarray(trajectories, dtype=np.float64)
    if not np.all(np.isfinite(trajectories)):
        raise NumericalError("ensemble contains nonfinite trajectories")
    return ForecastEnsemble(
        trajectories=trajectories,
        point_forecast=trajectories.mean(axis=0),
        mean=stats[0],
        std=stats[1],
    )


def warmup_state(H_x: np.ndarray, H_c: np.ndarray, params: DenoiserParams) -> np.ndarray:
    """Fold p z-scored history segments into the latent state at t=1.

    Accepts one window ([p, W] values) or a batch ([B, p, W]); returns
    [m_state, d_state] or [B, m_state, d_state] accordingly. Deterministic:
    no noise is consumed.
    """
    H_x = np.asarray(H_x, dtype=np.float64)
    H_c = np.asarray(H_c, dtype=np.float64)
    single = H_x.ndim == 2
    if single:
        H_x = H_x[None]
        H_c = H_c[None]
    B, p, W = H_x.shape
    cfg = params.config
    with no_grad():
        z = np.broadcast_to(
            params["z0"].data, (B, cfg.m_state, cfg.d_state)
        ).copy()
        for s in range(p):
            _, z_new = denoise(H_x[:, s], z, H_c[:, s], 1.0, params)
            z = z_new.data
    return z[0] if single else z


def _member_noise(
    seed_prefix: tuple[int, ...], n_samples: int, q: int, W: int
) -> np.ndarray:
    """noise[i, s] = s-th standard-normal block of member i's substream."""
    noise = np.empty((n_samples, q, W), dtype=np.float64)
    for i in range(n_samples):
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([*seed_prefix, i]))
        )
        for s in range(q):
            noise[i, s] = rng.standard_normal(W)
    return noise


def forecast(
    Z_h: np.ndarray,
    F_c: np.ndarray,
    params: DenoiserParams,
    config: ForecastConfig,
    stats: tuple[float, float] = (0.0, 1.0),
    seed_prefix: tuple[int, ...] | None = None,
) -> ForecastEnsemble:
    """Generate q future segments for every ensemble member.

    Per segment: the schedule comes from the event's step-size head (or the
    uniform 1/T grid when event control is off), integration starts from
    member-private N(0, I) noise, and the latent state advances at every
    denoiser call; the state from the final integration step is carried into
    the next segment.
    """
    F_c = np.asarray(F_c, dtype=np.float64)
    q = F_c.shape[0]
    cfg = params.config
    n = config.n_samples
    if seed_prefix is None:
        seed_prefix = (config.seed,)
    noise = _member_noise(seed_prefix, n, q, cfg.W)
    weight, bias = params.delta_head
    z = np.broadcast_to(Z_h, (n, cfg.m_state, cfg.d_state)).copy()
    trajectories = np.empty((n, q, cfg.W), dtype=np.float64)
    for s in range(q):
        c_s = F_c[s]
        c_batch = np.broadcast_to(c_s, (n, c_s.shape[0]))
        if config.use_event_delta:
            schedule = event_step_size(c_s, weight, bias, config.T)
        else:
            schedule = uniform_schedule(config.T)
        state_box = [z]

        def velocity(x, t, c_batch=c_batch, state_box=state_box, s=s):
            with no_grad():
                v, z_new = denoise(x, state_box[0], c_batch, t, params)
            if not np.all(np.isfinite(v.data)):
                member = int(np.flatnonzero(~np.isfinite(v.data).all(axis=1))[0])
                raise NumericalError(
                    f"nonfinite velocity for member {member}, segment s={s + 1}, t={t}"
                )
            state_box[0] = z_new.data
            return v.data

        try:
            x_end = solve_ode(velocity, noise[:, s], schedule)
        except NumericalError as e:
            raise NumericalError(f"segment s={s + 1}: {e}") from e
        z = state_box[0]
        trajectories[:, s] = x_end
    return make_ensemble(zscore_invert(trajectories, stats), stats)


def forecast_window(
    sample: WindowSample, params: DenoiserParams, config: ForecastConfig
) -> ForecastEnsemble:
    """z-score history -> warm up state -> generate -> invert normalization."""
    stats = (sample.mean, sample.std)
    H_x = zscore_apply(sample.history_values, stats)
    Z_h = warmup_state(H_x, sample.history_embeddings, params)
    return forecast(Z_h, sample.future_embeddings, params, config, stats)


def forecast_windows(
    samples: list[WindowSample],
    params: DenoiserParams,
    config: ForecastConfig,
) -> list[ForecastEnsemble]:
    """Forecast many windows; warm-up is batched across windows.

    Window w's members use substreams derived from (seed, w, member), so each
    window is reproducible independently of how many windows are evaluated.
    """
    if not samples:
        return []
    stats = [(w.mean, w.std) for w in samples]
    H_x = np.stack(
        [zscore_apply(w.history_values, st) for w, st in zip(samples, stats)]
    )
    H_c = np.stack([w.history_embeddings for w in samples])
    Z = warmup_state(H_x, H_c, params)
    out = []
    for i, (w, st) in enumerate(zip(samples, stats)):
        out.append(
            forecast(
                Z[i],
                w.future_embeddings,
                params,
                config,
                st,
                seed_prefix=(config.seed, i),
            )
        )
    return out
