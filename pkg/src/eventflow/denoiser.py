"""Multimodal U-shaped diffusion transformer.

The denoiser maps a noisy segment, the autoregressive latent state, an event
embedding, and a diffusion time t to a velocity estimate and an updated state:

    tokenize -> fuse with state (cross-attention) -> conditioned
    encoder / bottleneck / decoder with token down/up-sampling and
    resolution-matched skips -> unembed to a velocity; the state update is a
    second cross-attention from the previous state into the decoder output.

Transformer blocks use adaptive layer norm: shift/scale/gate for both the
attention and feed-forward branches are produced from a conditioning vector
g = phi(t) + Phi(c) by a zero-initialized linear map, so a fresh block is
exactly the identity. The up-sampling affines are also zero-initialized and
the skip gains start at one, which makes the whole trunk an exact identity at
initialization while keeping the interior alive through the standard-
initialized down-sampling path.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor, as_tensor

# Multiplier applied to t (in [0,1]) before the sinusoidal embedding, so the
# frequency bank covers the unit interval with useful resolution.
TIME_SCALE = 100.0
_MAX_PERIOD = 10000.0


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; parameter shapes are a pure function of
    this config."""

    W: int = 24
    patch: int = 1
    M: int = 3
    d_model: int = 256
    d_state: int = 48
    m_state: int = 4
    d_text: int = 128
    d_ff: int = 1024
    n_heads: int = 4
    resample: int = 2
    dropout: float = 0.0
    stacked: bool = False  # ablation: no down/up-sampling, no skips

    def __post_init__(self):
        if self.W % self.patch != 0:
            raise ValueError(f"W={self.W} not divisible by patch={self.patch}")
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        n_tok = self.W // self.patch
        need = self.resample ** (self.M - 1)
        if not self.stacked and n_tok % need != 0:
            raise ValueError(
                f"W/patch={n_tok} not divisible by resample^(M-1)={need}"
            )
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if self.d_state % self.n_heads != 0:
            raise ValueError(
                f"d_state={self.d_state} not divisible by n_heads={self.n_heads}"
            )
        if self.d_model % 2 != 0:
            raise ValueError("d_model must be even for the sinusoidal embedding")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0,1), got {self.dropout}")

    @property
    def n_tok(self) -> int:
        return self.W // self.patch

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


@dataclass(frozen=True, eq=False)
class LatentState:
    """The autoregressive carry: m_state tokens of width d_state."""

    tokens: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.tokens)):
            raise ValueError("latent state contains nonfinite entries")


class DenoiserParams:
    """Named parameter tensors in a fixed, config-determined order."""

    def __init__(self, tensors: dict[str, Tensor], config: ModelConfig):
        self.tensors = tensors
        self.config = config

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors.keys())

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def copy(self) -> "DenoiserParams":
        out = {
            k: Tensor(t.data.copy(), requires_grad=True)
            for k, t in self.tensors.items()
        }
        return DenoiserParams(out, self.config)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    @property
    def delta_head(self) -> tuple[np.ndarray, float]:
        """(weight, bias) of the step-size head, for flow.event_step_size."""
        return (
            self.tensors["delta.w"].data.reshape(-1),
            float(self.tensors["delta.b"].data.reshape(())),
        )


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int,
            shape: tuple[int, ...]) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: ModelConfig, seed: int = 0) -> DenoiserParams:
    """Build all parameter tensors for the config.

    Zero-initialized: block modulation maps, both cross-attention output
    projections, the up-sampling affines, the unembedding, and the step-size
    head. Skip gains start at one. Everything else is Glorot-uniform, with
    small-normal position/state embeddings.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x0D])))
    d, dff, dt, ds = config.d_model, config.d_ff, config.d_text, config.d_state
    t: dict[str, Tensor] = {}

    def param(name: str, data: np.ndarray) -> None:
        t[name] = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)

    def linear(name: str, fan_in: int, fan_out: int, zero: bool = False) -> None:
        if zero:
            param(f"{name}.w", np.zeros((fan_in, fan_out)))
        else:
            param(f"{name}.w", _glorot(rng, fan_in, fan_out, (fan_in, fan_out)))
        param(f"{name}.b", np.zeros(fan_out))

    def attention(prefix: str, q_dim: int, kv_dim: int, inner: int,
                  out_dim: int, zero_out: bool) -> None:
        linear(f"{prefix}.q", q_dim, inner)
        linear(f"{prefix}.k", kv_dim, inner)
        linear(f"{prefix}.v", kv_dim, inner)
        linear(f"{prefix}.out", inner, out_dim, zero=zero_out)

    def block(prefix: str) -> None:
        attention(f"{prefix}.attn", d, d, d, d, zero_out=False)
        linear(f"{prefix}.mlp.fc1", d, dff)
        linear(f"{prefix}.mlp.fc2", dff, d)
        linear(f"{prefix}.mod", d, 6 * d, zero=True)

    def cond(stage: str) -> None:
        linear(f"cond.{stage}.t.fc1", d, d)
        linear(f"cond.{stage}.t.fc2", d, d)
        linear(f"cond.{stage}.c", dt, d)

    linear("embed", config.patch, d)
    param("pos", 0.02 * rng.standard_normal((config.n_tok, d)))
    attention("fuse", d, ds, d, d, zero_out=True)
    cond("enc")
    cond("bot")
    cond("dec")
    for l in range(1, config.M + 1):
        block(f"enc.{l}")
    block("bot")
    for l in range(1, config.M + 1):
        block(f"dec.{l}")
    if not config.stacked:
        for l in range(1, config.M):
            linear(f"down.{l}", config.resample * d, d)
        for l in range(2, config.M + 1):
            linear(f"up.{l}", d, config.resample * d, zero=True)
        for l in range(1, config.M + 1):
            param(f"skip.{l}.gain", np.ones(d))
    linear("unembed", d, config.patch, zero=True)
    attention("state", ds, d, ds, ds, zero_out=True)
    linear("delta", dt, 1, zero=True)
    param("z0", 0.02 * rng.standard_normal((config.m_state, ds)))
    return DenoiserParams(t, config)


# ------------------------------------------------------------------- forward


def _affine(x: Tensor, params: DenoiserParams, name: str) -> Tensor:
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


def _dropout_mask(shape, dropout: float, rng: np.random.Generator) -> Tensor:
    keep = rng.random(shape) >= dropout
    return Tensor(keep.astype(np.float64) / (1.0 - dropout))


def sinusoidal_embedding(t: Tensor, dim: int) -> Tensor:
    """[cos, sin] frequency features of t (t in [0,1], scaled by TIME_SCALE)."""
    half = dim // 2
    freqs = np.exp(-np.log(_MAX_PERIOD) * np.arange(half) / half)
    angles = t.reshape(-1, 1) * Tensor(TIME_SCALE * freqs[None, :])
    return Tensor.concat([angles.cos(), angles.sin()], axis=-1)


def condition_vectors(
    t, c, params: DenoiserParams
) -> dict[str, Tensor]:
    """g_stage = phi_stage(t) + Phi_stage(c) for stages enc/bot/dec.

    phi is a sinusoidal embedding followed by a 2-layer perceptron; Phi is an
    affine projection of the event embedding. t may be a scalar, an array of
    per-batch times, or a Tensor when gradients must reach the step-size head.
    """
    c = as_tensor(c)
    if c.ndim == 1:
        c = c.reshape(1, -1)
    t = as_tensor(t)
    if t.ndim == 0:
        t = t.reshape(1)
    if not np.all(np.isfinite(t.data)) or not np.all(np.isfinite(c.data)):
        raise ValueError("nonfinite conditioning inputs")
    d = params.config.d_model
    base = sinusoidal_embedding(t, d)
    out: dict[str, Tensor] = {}
    for stage in ("enc", "bot", "dec"):
        h = _affine(base, params, f"cond.{stage}.t.fc1").silu()
        phi = _affine(h, params, f"cond.{stage}.t.fc2")
        Phi = _affine(c, params, f"cond.{stage}.c")
        out[stage] = phi + Phi
    return out


def _with_batch(x: Tensor) -> tuple[Tensor, bool]:
    """Promote a single sample [n, d] to a batch [1, n, d]."""
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    return x, False


def _attention(
    q_in: Tensor,
    kv_in: Tensor,
    prefix: str,
    params: DenoiserParams,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    n_heads = params.config.n_heads
    q = _affine(q_in, params, f"{prefix}.q")
    k = _affine(kv_in, params, f"{prefix}.k")
    v = _affine(kv_in, params, f"{prefix}.v")
    B, nq, inner = q.shape
    nk = k.shape[1]
    hd = inner // n_heads
    qh = q.reshape(B, nq, n_heads, hd).transpose(0, 2, 1, 3)
    kh = k.reshape(B, nk, n_heads, hd).transpose(0, 2, 1, 3)
    vh = v.reshape(B, nk, n_heads, hd).transpose(0, 2, 1, 3)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd))
    attn = scores.softmax(-1)
    if dropout > 0.0:
        attn = attn * _dropout_mask(attn.shape, dropout, rng)
    out = (attn @ vh).transpose(0, 2, 1, 3).reshape(B, nq, inner)
    return _affine(out, params, f"{prefix}.out")


def fuse_history(x_tokens, z_prev, params: DenoiserParams,
                 dropout: float = 0.0,
                 rng: np.random.Generator | None = None) -> Tensor:
    """Cross-attention from segment tokens into the latent state, residual on
    the tokens; the output is the trunk input x_e^(0)."""
    x, single = _with_batch(as_tensor(x_tokens))
    z, _ = _with_batch(as_tensor(z_prev))
    out = x + _attention(x, z, "fuse", params, dropout, rng)
    return out.reshape(out.shape[1:]) if single else out


def _modulation(g: Tensor, prefix: str, params: DenoiserParams) -> list[Tensor]:
    B, d = g.shape
    mod = _affine(g.silu(), params, f"{prefix}.mod").reshape(B, 6, 1, d)
    return [mod[:, i] for i in range(6)]


def dit_block(
    x,
    g,
    prefix: str,
    params: DenoiserParams,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Adaptive-layer-norm transformer block; exact identity at init because
    all shift/scale/gate come from a zero-initialized map of g."""
    x, single = _with_batch(as_tensor(x))
    g = as_tensor(g)
    if g.ndim == 1:
        g = g.reshape(1, -1)
    shift1, scale1, gate1, shift2, scale2, gate2 = _modulation(g, prefix, params)
    h = x.layernorm() * (scale1 + 1.0) + shift1
    x = x + gate1 * _attention(h, h, f"{prefix}.attn", params, dropout, rng)
    h = x.layernorm() * (scale2 + 1.0) + shift2
    h = _affine(h, params, f"{prefix}.mlp.fc1").gelu()
    if dropout > 0.0:
        h = h * _dropout_mask(h.shape, dropout, rng)
    h = _affine(h, params, f"{prefix}.mlp.fc2")
    out = x + gate2 * h
    return out.reshape(out.shape[1:]) if single else out


def downsample(x, params: DenoiserParams, level: int = 1) -> Tensor:
    """Merge adjacent token groups: [.., n, d] -> [.., n/r, d] via affine rd->d."""
    x, single = _with_batch(as_tensor(x))
    B, n, d = x.shape
    r = params.config.resample
    if n % r != 0:
        raise ValueError(f"token count {n} not divisible by resample {r}")
    out = _affine(x.reshape(B, n // r, r * d), params, f"down.{level}")
    return out.reshape(out.shape[1:]) if single else out


def upsample(x, params: DenoiserParams, level: int = 2) -> Tensor:
    """Split tokens: [.., n, d] -> [.., r*n, d] via affine d->rd."""
    x, single = _with_batch(as_tensor(x))
    B, n, d = x.shape
    r = params.config.resample
    out = _affine(x, params, f"up.{level}").reshape(B, r * n, d)
    return out.reshape(out.shape[1:]) if single else out


def u_dit_forward(
    x_e0: Tensor,
    g: dict[str, Tensor],
    params: DenoiserParams,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Encoder / bottleneck / decoder over tokens.

    Encoder layer l produces pre-downsampling features skip_l; decoder layer l
    consumes skip (M-l+1) through a learned gain, so resolutions match. In
    stacked mode (ablation) all 2M+1 blocks run at full resolution with no
    skips.
    """
    h, single = _with_batch(as_tensor(x_e0))
    g = {k: as_tensor(v) for k, v in g.items()}
    g = {k: (v.reshape(1, -1) if v.ndim == 1 else v) for k, v in g.items()}
    out = _u_dit_trunk(h, g, params, dropout, rng)
    return out.reshape(out.shape[1:]) if single else out


def _u_dit_trunk(
    h: Tensor,
    g: dict[str, Tensor],
    params: DenoiserParams,
    dropout: float,
    rng: np.random.Generator | None,
) -> Tensor:
    config = params.config
    M = config.M
    if config.stacked:
        for l in range(1, M + 1):
            h = dit_block(h, g["enc"], f"enc.{l}", params, dropout, rng)
        h = dit_block(h, g["bot"], "bot", params, dropout, rng)
        for l in range(1, M + 1):
            h = dit_block(h, g["dec"], f"dec.{l}", params, dropout, rng)
        return h
    skips: list[Tensor] = []
    for l in range(1, M + 1):
        h = dit_block(h, g["enc"], f"enc.{l}", params, dropout, rng)
        skips.append(h)
        if l < M:
            h = downsample(h, params, l)
    h = dit_block(h, g["bot"], "bot", params, dropout, rng)
    for l in range(1, M + 1):
        if l > 1:
            h = upsample(h, params, l)
        h = h + params[f"skip.{l}.gain"] * skips[M - l]
        h = dit_block(h, g["dec"], f"dec.{l}", params, dropout, rng)
    return h


def state_update(
    z_prev,
    decoder_out,
    params: DenoiserParams,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """New state = z_prev + cross-attention(queries=z_prev, kv=decoder output)."""
    z, single = _with_batch(as_tensor(z_prev))
    d, _ = _with_batch(as_tensor(decoder_out))
    out = z + _attention(z, d, "state", params, dropout, rng)
    return out.reshape(out.shape[1:]) if single else out


def denoise(
    x_t,
    z_prev,
    c,
    t,
    params: DenoiserParams,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Full denoiser pass: (velocity estimate, updated latent state).

    Accepts single samples (x_t: [W], z_prev: [m_state, d_state], c: [d_text],
    scalar t) or batches with a leading batch axis on every argument; single
    inputs come back without the batch axis. All inputs may be numpy arrays or
    Tensors; pass Tensors when gradients are needed.
    """
    config = params.config
    x = as_tensor(x_t)
    single = x.ndim == 1
    if single:
        x = x.reshape(1, -1)
    if x.shape[1] != config.W:
        raise ValueError(f"segment length {x.shape[1]} != W={config.W}")
    B = x.shape[0]
    z = as_tensor(z_prev)
    if z.ndim == 2:
        z = z.reshape(1, config.m_state, config.d_state)
        if B > 1:
            z = z.broadcast_to((B, config.m_state, config.d_state))
    c = as_tensor(c)
    if c.ndim == 1:
        c = c.reshape(1, -1)
    if c.shape[1] != config.d_text:
        raise ValueError(f"embedding width {c.shape[1]} != d_text={config.d_text}")
    t = as_tensor(t)
    if t.ndim == 0:
        t = t.reshape(1)
    if t.shape[0] == 1 and B > 1:
        t = t.broadcast_to((B,))
    if dropout > 0.0 and rng is None:
        raise ValueError("dropout > 0 requires an rng")

    tokens = x.reshape(B, config.n_tok, config.patch)
    tokens = _affine(tokens, params, "embed") + params["pos"]
    x_e0 = fuse_history(tokens, z, params, dropout, rng)
    g = condition_vectors(t, c, params)
    h = u_dit_forward(x_e0, g, params, dropout, rng)
    v = _affine(h, params, "unembed").reshape(B, config.W)
    z_new = state_update(z, h, params, dropout, rng)
    if single:
        v = v.reshape(config.W)
        z_new = z_new.reshape(config.m_state, config.d_state)
    return v, z_new
