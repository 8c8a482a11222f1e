"""Autoregressive flow-matching training.

One training step consumes a batch of windows. Per window the latent state
starts at the learnable Z_0 and every segment s = 1..p+q is visited in order:
noise x0 and a timestep t are drawn, the interpolant x_t = (1-t) x0 + t x1 is
formed, and the denoiser predicts the constant velocity x1 - x0 while updating
the state. The loss is the mean squared velocity error over all segments,
batch entries, and points, in z-scored space.

Timesteps are drawn uniformly with probability 1-rho and from the
event-controlled grid {k/(T_g + delta(c))} with probability rho; the grid
branch is differentiable in the step-size head, which is how that head trains.

The optimizer is adaptive moments with decoupled weight decay; the learning
rate ramps linearly from lr_init to lr_peak over the first warmup fraction of
total steps and then decays linearly to lr_final; dropout anneals linearly
from dropout_start at epoch 0 to dropout_end at max_epochs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_grad
from .dataset import WindowSample, zscore_apply
from .denoiser import DenoiserParams, ModelConfig, denoise, init_params
from .errors import NumericalError

VAL_T_GRID = tuple(np.round(np.arange(1, 10) * 0.1, 10))


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 1000
    eval_every: int = 5
    patience: int = 5
    lr_peak: float = 2e-4
    lr_init: float = 1e-5
    lr_final: float = 1e-7
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_frac: float = 0.2
    dropout_start: float = 0.6
    dropout_end: float = 0.05
    train_grid_steps: int = 100
    delta_grid_prob: float = 0.5  # rho: fraction of grid-drawn timesteps
    clip_norm: float = 1.0
    fixed_timestep: bool = False  # ablation: delta forced to 0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lr_init < self.lr_peak:
            raise ValueError("need 0 < lr_init < lr_peak")
        if self.dropout_start < self.dropout_end:
            raise ValueError("need dropout_start >= dropout_end")
        if not 0.0 <= self.delta_grid_prob <= 1.0:
            raise ValueError("delta_grid_prob must be in [0,1]")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size >= 1 and max_epochs >= 0 required")


@dataclass
class TrainState:
    """Mutable training-loop state; serialized into checkpoints for resume."""

    rng: np.random.Generator
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    total_steps: int = 0
    best_val: float = math.inf
    evals_since_best: int = 0
    stop_reason: str = ""  # "early" | "max_epochs" | "session_cap"


def new_state(params: DenoiserParams, config: TrainConfig,
              total_steps: int = 0) -> TrainState:
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([config.seed, 0x7E]))
    )
    m = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}
    v = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}
    return TrainState(rng=rng, m=m, v=v, total_steps=total_steps)


# ------------------------------------------------------------------ schedules


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup lr_init -> lr_peak, then linear decay -> lr_final."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    step = min(step, total_steps)
    warmup = config.warmup_frac * total_steps
    if step <= warmup and warmup > 0:
        return config.lr_init + (config.lr_peak - config.lr_init) * step / warmup
    rest = total_steps - warmup
    if rest <= 0:
        return config.lr_peak
    return config.lr_peak + (config.lr_final - config.lr_peak) * (step - warmup) / rest


def dropout_at(epoch: int, config: TrainConfig) -> float:
    """Linear anneal from dropout_start at epoch 0 to dropout_end at max_epochs."""
    if config.max_epochs <= 0:
        return config.dropout_end
    frac = min(max(epoch / config.max_epochs, 0.0), 1.0)
    return config.dropout_start + (config.dropout_end - config.dropout_start) * frac


# ----------------------------------------------------------------- timesteps


def sample_timesteps(
    c: np.ndarray,
    params: DenoiserParams,
    rng: np.random.Generator,
    config: TrainConfig,
) -> Tensor:
    """Draw one timestep per batch row; differentiable through the delta head.

    With probability 1-rho the draw is plain U(0,1). With probability rho it is
    uniform over the event-controlled grid {k/(T_g + delta(c)) : k=1..T_g}
    plus the truncated endpoint 1, where delta = sigmoid(affine(c)) stays on
    the tape so gradients reach the head through both the timestep embedding
    and the interpolant.
    """
    C = np.asarray(c, dtype=np.float64)
    if C.ndim == 1:
        C = C[None, :]
    B = C.shape[0]
    T_g = config.train_grid_steps
    # Fixed draw order keeps runs reproducible across branch probabilities.
    coins = rng.random(B)
    k = rng.integers(1, T_g + 2, size=B)
    t_uniform = rng.random(B)
    if config.fixed_timestep:
        delta = Tensor(np.zeros(B))
    else:
        affine = (Tensor(C) @ params["delta.w"]).reshape(B) + params[
            "delta.b"
        ].reshape(1)
        delta = affine.sigmoid()
    dt = (delta + float(T_g)) ** -1.0
    on_grid = (k <= T_g).astype(np.float64)
    grid_t = dt * (k * on_grid) + Tensor(1.0 - on_grid)
    use_grid = (coins < config.delta_grid_prob).astype(np.float64)
    return grid_t * use_grid + Tensor(t_uniform * (1.0 - use_grid))


def sample_timestep(
    c: np.ndarray,
    params: DenoiserParams,
    rng: np.random.Generator,
    config: TrainConfig,
) -> Tensor:
    """Single-event version of :func:`sample_timesteps`; scalar tensor."""
    return sample_timesteps(c, params, rng, config).reshape(())


# ------------------------------------------------------------------ optimizer


def clip_gradients(params: DenoiserParams, max_norm: float) -> float:
    """Global-norm clip; returns the pre-clip norm."""
    total = 0.0
    for t in params.tensors.values():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for t in params.tensors.values():
            if t.grad is not None:
                t.grad *= scale
    return norm

def adamw_update(
    params: DenoiserParams, state: TrainState, lr: float, config: TrainConfig
) -> None:
    """Bias-corrected adaptive-moment update with decoupled weight decay.

    Weight decay applies uniformly to every parameter: a zero-gradient step
    changes each element by exactly -lr * weight_decay * theta.
    """
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.tensors.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + config.eps)
        p.data -= lr * update + lr * config.weight_decay * p.data


# ----------------------------------------------------------------- train step


def window_arrays(samples: list[WindowSample]) -> dict[str, np.ndarray]:
    """Stack windows into arrays: z-scored segment values [N, S, W] and
    embeddings [N, S, d_text], plus the per-window stats."""
    if not samples:
        raise ValueError("empty window list")
    xs, cs = [], []
    for w in samples:
        vals = np.concatenate([w.history_values, w.future_values], axis=0)
        xs.append(zscore_apply(vals, (w.mean, w.std)))
        cs.append(np.concatenate([w.history_embeddings, w.future_embeddings], axis=0))
    return {
        "x": np.stack(xs),
        "c": np.stack(cs),
        "stats": np.array([[w.mean, w.std] for w in samples]),
        "p": samples[0].p,
        "q": samples[0].q,
    }


def _step_arrays(
    x: np.ndarray,
    c: np.ndarray,
    params: DenoiserParams,
    state: TrainState,
    config: TrainConfig,
    dropout: float,
) -> float:
    B, S, W = x.shape
    z = params["z0"].reshape(1, *params["z0"].shape).broadcast_to(
        (B, *params["z0"].shape)
    )
    total = None
    seg_sq = []  # per-segment [B] squared sums, for nonfinite diagnostics
    for s in range(S):
        x1 = x[:, s]
        cs = c[:, s]
        x0 = state.rng.standard_normal((B, W))
        t = sample_timesteps(cs, params, state.rng, config)
        t_col = t.reshape(B, 1)
        xt = Tensor(x0) * (1.0 - t_col) + Tensor(x1) * t_col
        v_hat, z = denoise(xt, z, cs, t, params, dropout=dropout, rng=state.rng)
        diff = v_hat - Tensor(x1 - x0)
        sq = diff * diff
        seg_sq.append(sq.data.sum(axis=1))
        contrib = sq.sum()
        total = contrib if total is None else total + contrib
    loss = total * (1.0 / (B * S * W))
    loss_value = loss.item()
    if not math.isfinite(loss_value):
        for s, row in enumerate(seg_sq):
            bad = np.flatnonzero(~np.isfinite(row))
            if bad.size:
                raise NumericalError(
                    f"nonfinite loss at step {state.step}, sample {int(bad[0])}, "
                    f"segment s={s + 1}"
                )
        raise NumericalError(f"nonfinite loss at step {state.step}")
    params.zero_grad()
    loss.backward()
    clip_gradients(params, config.clip_norm)
    lr = lr_at(state.step, state.total_steps, config)
    adamw_update(params, state, lr, config)
    params.zero_grad()
    return loss_value


def train_step(
    batch: list[WindowSample],
    params: DenoiserParams,
    state: TrainState,
    config: TrainConfig,
) -> float:
    """One optimizer update on a batch of windows; returns the loss."""
    arrays = window_arrays(batch)
    dropout = dropout_at(state.epoch, config)
    return _step_arrays(arrays["x"], arrays["c"], params, state, config, dropout)


# ----------------------------------------------------------------- validation


def validation_loss(
    x: np.ndarray,
    c: np.ndarray,
    noise: np.ndarray,
    params: DenoiserParams,
    t_grid: tuple[float, ...] = VAL_T_GRID,
) -> float:
    """Flow-matching MSE over a fixed t grid with frozen noise, dropout 0.

    ``noise`` must have the same [N, S, W] shape as ``x`` and stay fixed
    across evaluations so early stopping compares like with like.
    """
    N, S, W = x.shape
    if noise.shape != x.shape:
        raise ValueError(f"noise shape {noise.shape} != {x.shape}")
    z0 = params["z0"]
    total = 0.0
    with no_grad():
        for t in t_grid:
            z = z0.reshape(1, *z0.shape).broadcast_to((N, *z0.shape))
            for s in range(S):
                x1 = x[:, s]
                x0 = noise[:, s]
                xt = (1.0 - t) * x0 + t * x1
                v_hat, z = denoise(xt, z, c[:, s], t, params)
                diff = v_hat.data - (x1 - x0)
                total += float((diff * diff).sum())
    return total / (len(t_grid) * N * S * W)


# ------------------------------------------------------------------------ fit


def fit(
    train_windows: list[WindowSample],
    val_windows: list[WindowSample],
    model_config: ModelConfig,
    config: TrainConfig,
    params: DenoiserParams | None = None,
    state: TrainState | None = None,
    log=None,
    stop_after_epoch: int | None = None,
) -> tuple[DenoiserParams, list[dict], TrainState]:
    """Train with early stopping on validation loss.

    Validation runs before training and then every ``eval_every`` epochs; the
    best parameter snapshot is kept and returned. Training stops after
    ``patience`` consecutive non-improving evaluations or at max_epochs.
    Pass ``params`` and ``state`` to resume an interrupted run bit-exactly;
    ``stop_after_epoch`` caps this session without changing the learning-rate
    schedule (which always spans max_epochs), so a capped run continued later
    matches an uninterrupted one. After a resume, the best-snapshot search
    restarts from the resume point; earlier parameter snapshots are gone.
    """
    if not train_windows or not val_windows:
        raise ValueError("train and validation splits must be nonempty")
    train = window_arrays(train_windows)
    val = window_arrays(val_windows)
    n = train["x"].shape[0]
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = max(steps_per_epoch * config.max_epochs, 1)
    if params is None:
        params = init_params(model_config, seed=config.seed)
    if state is None:
        state = new_state(params, config, total_steps)
    state.total_steps = total_steps

    val_rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([config.seed, 0x5A1]))
    )
    val_noise = val_rng.standard_normal(val["x"].shape)

    history: list[dict] = []

    def record(row: dict) -> None:
        history.append(row)
        if log is not None:
            log(row)

    def evaluate(epoch: int) -> float:
        vl = validation_loss(val["x"], val["c"], val_noise, params)
        record(
            {
                "step": state.step,
                "epoch": epoch,
                "train_loss": None,
                "lr": None,
                "dropout": None,
                "val_loss": vl,
            }
        )
        return vl

    best_params = params.copy()
    if state.step == 0:
        state.best_val = evaluate(0)
        state.evals_since_best = 0

    stop = False
    state.stop_reason = "max_epochs"
    for epoch in range(state.epoch, config.max_epochs):
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            state.stop_reason = "session_cap"
            break
        state.epoch = epoch
        dropout = dropout_at(epoch, config)
        perm = state.rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = perm[b * config.batch_size : (b + 1) * config.batch_size]
            lr = lr_at(state.step, state.total_steps, config)
            loss = _step_arrays(
                train["x"][idx], train["c"][idx], params, state, config, dropout
            )
            record(
                {
                    "step": state.step,
                    "epoch": epoch,
                    "train_loss": loss,
                    "lr": lr,
                    "dropout": dropout,
                    "val_loss": None,
                }
            )
        state.epoch = epoch + 1
        if (epoch + 1) % config.eval_every == 0:
            vl = evaluate(epoch + 1)
            if vl < state.best_val:
                state.best_val = vl
                state.evals_since_best = 0
                best_params = params.copy()
            else:
                state.evals_since_best += 1
                if state.evals_since_best >= config.patience:
                    stop = True
        if stop:
            state.stop_reason = "early"
            break
    return best_params, history, state


def write_history(history: list[dict], path: str | Path) -> None:
    """history.csv: step, epoch, train_loss, lr, dropout, val_loss."""
    fields = ["step", "epoch", "train_loss", "lr", "dropout", "val_loss"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in history:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in fields})
