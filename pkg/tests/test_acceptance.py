"""Release gate: eleven criteria, one test and one pass/fail line each.

Each test prints ``criterion NN PASS/FAIL: detail`` and asserts the criterion
at its stated tolerance. The directional criteria (6 and 8) train or resample
at miniature scale and dominate the runtime; everything else finishes in
seconds.
"""

import hashlib
import json
import time

import numpy as np
import pytest
from click.testing import CliRunner

from eventflow.autodiff import Tensor
from eventflow.cli import main as cli_main
from eventflow.checkpoint import load_checkpoint, save_checkpoint
from eventflow.dataset import (
    EventSegment,
    MultimodalDataset,
    SyntheticConfig,
    generate_synthetic,
    make_windows,
    replace_embeddings_with_noise,
    split_windows,
    validate_dataset,
)
from eventflow.denoiser import ModelConfig, denoise, init_params, u_dit_forward
from eventflow.flow import (
    event_step_size,
    ot_interpolate,
    solve_ode,
    uniform_schedule,
    velocity_target,
)
from eventflow.forecasting import ForecastConfig, forecast_window, forecast_windows
from eventflow.metrics import (
    compute_report,
    crps_ensemble,
    dataset_pairs,
    delta_j_ftsd,
    j_ftsd,
    mse,
    rmse,
    wape,
    wql,
)
from eventflow.training import TrainConfig, fit


def _report(n: int, ok: bool, detail: str) -> None:
    print(f"criterion {n:02d} {'PASS' if ok else 'FAIL'}: {detail}", flush=True)
    assert ok, f"criterion {n}: {detail}"


TINY_MODEL = dict(
    W=8, patch=1, M=2, d_model=16, d_state=8, m_state=2, d_text=16,
    d_ff=32, n_heads=2, resample=2,
)


@pytest.fixture(scope="module")
def overfit_run():
    """Noise-free 4-window overfit shared by criteria 5 and 7."""
    ds = generate_synthetic(
        SyntheticConfig(n_waves=12, points_per_wave=8, seed=0, d_text=16,
                        noise_levels=(0.0,))
    )
    windows = make_windows(ds, 2, 1)
    config = ModelConfig(W=8, patch=1, M=2, d_model=32, d_state=16, m_state=2,
                         d_text=16, d_ff=96, n_heads=2, resample=2)
    train_config = TrainConfig(batch_size=4, max_epochs=200, eval_every=100,
                               patience=10, lr_peak=2e-3, seed=0)
    best, history, _ = fit(windows[:4], windows[4:6], config, train_config)
    return ds, windows, config, best, history


# --------------------------------------------------------------- criterion 1


def test_criterion_01_flow_identities():
    """Interpolation endpoints and path derivative on 1,000 random vectors."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((1000, 8))
    x1 = rng.standard_normal((1000, 8))
    end_err = max(
        float(np.abs(ot_interpolate(x0, x1, 0.0) - x0).max()),
        float(np.abs(ot_interpolate(x0, x1, 1.0) - x1).max()),
    )
    h = 1e-6
    deriv_err = 0.0
    for t in rng.uniform(h, 1.0 - h, size=8):
        fd = (ot_interpolate(x0, x1, t + h) - ot_interpolate(x0, x1, t - h)) / (2 * h)
        deriv_err = max(deriv_err, float(np.abs(fd - velocity_target(x0, x1)).max()))
    elapsed = time.perf_counter() - t0
    ok = end_err < 1e-9 and deriv_err < 1e-9 and elapsed < 1.0
    _report(1, ok, f"endpoint err {end_err:.2e}, derivative err {deriv_err:.2e}, "
                   f"{elapsed:.2f}s")


# --------------------------------------------------------------- criterion 2


def test_criterion_02_ode_oracle():
    """Euler on v(t)=2t: error within 0.02 at T=50 and halves at T=100."""
    t0 = time.perf_counter()

    def integrate(T):
        end = solve_ode(lambda x, t: np.full_like(x, 2.0 * t),
                        np.zeros(1), uniform_schedule(T))
        return abs(float(end[0]) - 1.0)

    e50, e100 = integrate(50), integrate(100)
    ratio = e50 / e100
    elapsed = time.perf_counter() - t0
    ok = e50 <= 0.02 + 1e-12 and 1.8 <= ratio <= 2.2 and elapsed < 1.0
    _report(2, ok, f"err(T=50) {e50:.4f}, err(T=50)/err(T=100) {ratio:.3f}, "
                   f"{elapsed:.2f}s")


# --------------------------------------------------------------- criterion 3


def test_criterion_03_gradient_correctness():
    """Reverse mode vs central differences on the small denoiser."""
    t0 = time.perf_counter()
    config = ModelConfig(**TINY_MODEL)
    params = init_params(config, seed=0)
    rng = np.random.default_rng(7)
    for t in params.tensors.values():
        t.data = t.data + rng.normal(scale=0.02, size=t.data.shape)
    x = rng.standard_normal(config.W)
    c = rng.standard_normal(config.d_text)
    Rv = rng.standard_normal(config.W)
    Rz = rng.standard_normal((config.m_state, config.d_state))

    def loss():
        v, z_new = denoise(x, params["z0"], c, Tensor(0.3), params)
        return (v * Rv).sum() + (z_new * Rz).sum()

    out = loss()
    params.zero_grad()
    out.backward()

    names = list(params.tensors)
    sizes = np.array([params.tensors[k].data.size for k in names])
    picks = rng.choice(int(sizes.sum()), size=400, replace=False)
    bounds = np.cumsum(sizes)
    agreed = 0
    h = 1e-6
    for flat in np.sort(picks):
        ti = int(np.searchsorted(bounds, flat, side="right"))
        tensor = params.tensors[names[ti]]
        idx = np.unravel_index(flat - (bounds[ti] - sizes[ti]), tensor.data.shape)
        ad = tensor.grad[idx] if tensor.grad is not None else 0.0
        keep = tensor.data[idx]
        tensor.data[idx] = keep + h
        up = float(loss().data)
        tensor.data[idx] = keep - h
        down = float(loss().data)
        tensor.data[idx] = keep
        fd = (up - down) / (2 * h)
        if abs(ad - fd) <= 1e-7 + 1e-4 * max(abs(ad), abs(fd)):
            agreed += 1
    frac = agreed / 400
    elapsed = time.perf_counter() - t0
    ok = frac >= 0.99 and elapsed < 60.0
    _report(3, ok, f"{agreed}/400 coordinates agree ({100 * frac:.1f}%), "
                   f"{elapsed:.1f}s")


# --------------------------------------------------------------- criterion 4


def test_criterion_04_identity_at_init():
    """Fresh trunk maps tokens to themselves bitwise (zero-gate construction)."""
    config = ModelConfig(**TINY_MODEL)
    params = init_params(config, seed=3)
    rng = np.random.default_rng(1)
    tokens = rng.standard_normal((config.n_tok, config.d_model))
    g = {
        "enc": rng.standard_normal(config.d_model),
        "bot": rng.standard_normal(config.d_model),
        "dec": rng.standard_normal(config.d_model),
    }
    out = u_dit_forward(Tensor(tokens), g, params)
    ok = np.array_equal(out.data, tokens)
    _report(4, ok, "u_dit_forward(x) == x bitwise at init"
            if ok else "trunk output differs at init")


# --------------------------------------------------------------- criterion 5


def test_criterion_05_overfit_smoke(overfit_run):
    """4 noise-free windows: loss drops >= 80% within 200 steps."""
    t0 = time.perf_counter()
    _, _, _, _, history = overfit_run
    losses = [r["train_loss"] for r in history if r.get("train_loss") is not None]
    first = losses[0]
    tail = float(np.median(losses[-20:]))
    reduction = 1.0 - tail / first
    elapsed = time.perf_counter() - t0
    ok = len(losses) <= 200 and reduction >= 0.80 and elapsed < 300.0
    _report(5, ok, f"loss {first:.3f} -> {tail:.3f} "
                   f"({100 * reduction:.1f}% reduction in {len(losses)} steps)")


# --------------------------------------------------------------- criterion 6

C6_MODEL = dict(W=24, patch=2, M=2, d_model=32, d_state=48, m_state=4,
                d_text=128, d_ff=96, n_heads=4, resample=2)
C6_TRAIN = dict(batch_size=64, max_epochs=60, eval_every=2, patience=5,
                lr_peak=1e-3, seed=0)
C6_FORECAST = dict(T=25, n_samples=25, seed=0)
C6_EVAL_WINDOWS = 96


def _c6_run(dataset_seed: int, no_text: bool) -> dict:
    ds = generate_synthetic(
        SyntheticConfig(n_waves=2000, points_per_wave=24, seed=dataset_seed)
    )
    if no_text:
        ds = replace_embeddings_with_noise(ds, seed=0)
    windows = make_windows(ds, 4, 2)
    train_w, val_w, test_w = split_windows(windows, 0.15, 0.15)
    best, _, _ = fit(train_w, val_w, ModelConfig(**C6_MODEL),
                     TrainConfig(**C6_TRAIN))
    sub = test_w[:C6_EVAL_WINDOWS]
    ensembles = forecast_windows(sub, best, ForecastConfig(**C6_FORECAST))
    report = compute_report(ensembles, sub, metadata={})
    return report.aggregate


def test_criterion_06_event_awareness_direction():
    """no_text WQL >= 1.5x full WQL and full MAE <= 0.7x no_text MAE,
    for at least 2 of 3 dataset seeds. The expensive criterion: six
    miniature trainings on 2,000-wave datasets."""
    results = []
    for seed in (0, 1, 2):
        full = _c6_run(seed, no_text=False)
        bare = _c6_run(seed, no_text=True)
        results.append(
            (seed, bare["wql"] / full["wql"], full["mae"] / bare["mae"])
        )
    passing = sum(1 for _, wr, mr in results if wr >= 1.5 and mr <= 0.7)
    detail = "; ".join(
        f"seed {s}: wql x{wr:.2f}, mae x{mr:.2f}" for s, wr, mr in results
    )
    _report(6, passing >= 2, f"{passing}/3 seeds pass ({detail})")


# --------------------------------------------------------------- criterion 7


def test_criterion_07_event_controlled_timesteps(overfit_run):
    """Zero-init head gives 1/(T+0.5) exactly; training differentiates the
    categories; the fixed-timestep ablation changes trajectories."""
    ds, windows, _, best, _ = overfit_run
    fresh = init_params(ModelConfig(**TINY_MODEL), seed=0)
    w0, b0 = fresh.delta_head
    c = np.random.default_rng(5).standard_normal(16)
    schedule = event_step_size(c, w0, b0, 50)
    exact = schedule.step_size == 1.0 / 50.5

    wt, bt = best.delta_head
    by_description = {s.description: s.embedding for s in ds.segments}
    deltas = [
        event_step_size(emb, wt, bt, 50).delta
        for emb in by_description.values()
    ]
    spread = float(np.std(deltas))

    on = forecast_window(windows[6], best, ForecastConfig(T=10, n_samples=2, seed=0))
    off = forecast_window(
        windows[6], best,
        ForecastConfig(T=10, n_samples=2, seed=0, use_event_delta=False),
    )
    differs = not np.array_equal(on.trajectories, off.trajectories)
    ok = exact and spread > 0.0 and differs
    _report(7, ok, f"init step 1/(T+0.5) {'exact' if exact else 'WRONG'}, "
                   f"trained delta std over {len(deltas)} categories {spread:.2e}, "
                   f"fixed-timestep trajectories {'differ' if differs else 'match'}")


# --------------------------------------------------------------- criterion 8


def test_criterion_08_delta_jftsd_direction():
    """Informative events score positive; noise embeddings land inside the
    Monte-Carlo band from 20 reseeded replacements."""
    ds = generate_synthetic(SyntheticConfig(n_waves=400, points_per_wave=24, seed=0))
    informative = delta_j_ftsd(dataset_pairs(ds), seed=0)
    reseeded = np.array([
        delta_j_ftsd(
            dataset_pairs(replace_embeddings_with_noise(ds, seed=1000 + k)), seed=0
        )
        for k in range(20)
    ])
    band = 3.0 * float(np.std(reseeded))
    control = delta_j_ftsd(dataset_pairs(replace_embeddings_with_noise(ds, seed=0x17)),
                           seed=0)
    ok = informative > 0.0 and abs(control) <= band
    _report(8, ok, f"informative {informative:+.4f} > 0, "
                   f"noise control {control:+.4f} within +/-{band:.4f}")


# --------------------------------------------------------------- criterion 9


def test_criterion_09_metric_oracles():
    exact_half = crps_ensemble(np.array([0.0, 2.0]), 1.0) == 0.5
    rng = np.random.default_rng(2)
    y, f = rng.standard_normal(64), rng.standard_normal(64)
    rmse_sq = abs(rmse(y, f) ** 2 - mse(y, f)) <= 1e-12 * mse(y, f)
    ds = generate_synthetic(
        SyntheticConfig(n_waves=30, points_per_wave=8, seed=1, d_text=16)
    )
    pairs = dataset_pairs(ds)
    self_dist = j_ftsd(pairs, pairs, seed=0)
    y_pos = np.abs(y) + 1.0
    median_only = wql({0.5: f}, y_pos, quantiles=(0.5,))
    wape_match = abs(median_only - wape(y_pos, f)) <= 1e-12 * wape(y_pos, f)
    ok = exact_half and rmse_sq and abs(self_dist) < 1e-8 and wape_match
    _report(9, ok, f"crps {{0,2}} vs 1 exact, rmse^2=mse, "
                   f"self-distance {self_dist:.2e}, median wql == wape")


# -------------------------------------------------------------- criterion 10

C10_YAML = """\
data: {dataset: data, p: 2, q: 1, val_fraction: 0.15, test_fraction: 0.15}
synthetic: {n_waves: 36, points_per_wave: 8, seed: 1, d_text: 16}
model: {M: 2, d_model: 16, d_state: 8, m_state: 2, d_ff: 32, n_heads: 2}
train: {batch_size: 8, max_epochs: 2, eval_every: 1, patience: 3, seed: 0}
forecast: {T: 8, n_samples: 3, seed: 0}
"""


def test_criterion_10_determinism_and_persistence(tmp_path):
    """Same-seed pipeline twice -> identical report bytes; checkpoint
    round trip is bitwise."""
    runner = CliRunner()
    digests = []
    for run in ("one", "two"):
        root = tmp_path / run
        root.mkdir()
        cfg = root / "config.yaml"
        cfg.write_text(C10_YAML)
        steps = [
            ["gen", "-c", str(cfg), "-o", str(root / "data")],
            ["train", "-c", str(cfg), "-d", str(root / "data"),
             "-o", str(root / "run")],
            ["forecast", "-c", str(cfg), "-k", str(root / "run" / "checkpoint.bin"),
             "-d", str(root / "data"), "--split", "test", "-o", str(root / "fc")],
            ["eval", "-c", str(cfg), "-f", str(root / "fc" / "forecast.json"),
             "-d", str(root / "data"), "-o", str(root / "eval")],
        ]
        for argv in steps:
            result = runner.invoke(cli_main, argv, catch_exceptions=False)
            assert result.exit_code == 0, result.output
        digests.append(
            hashlib.sha256((root / "eval" / "report.json").read_bytes()).hexdigest()
        )

    params, _, _ = load_checkpoint(tmp_path / "one" / "run" / "checkpoint.bin")
    save_checkpoint(tmp_path / "copy.bin", params)
    reloaded, _, _ = load_checkpoint(tmp_path / "copy.bin")
    bitwise = all(
        np.array_equal(t.data, reloaded.tensors[k].data)
        for k, t in params.tensors.items()
    )
    ok = digests[0] == digests[1] and bitwise
    _report(10, ok, f"report sha256 {digests[0][:12]} reproduced, "
                    f"checkpoint round trip {'bitwise' if bitwise else 'DIFFERS'}")


# -------------------------------------------------------------- criterion 11


def _spans_dataset(spans, L):
    values = np.zeros(L)
    emb = np.ones(4) / 2.0
    segments = [EventSegment(s, e, "stub", emb) for s, e in spans]
    return MultimodalDataset(values=values, segments=segments)


def test_criterion_11_dataset_constraints():
    """Validator accepts generated datasets, rejects overlap/gap/ragged."""
    generated_ok = all(
        validate_dataset(
            generate_synthetic(
                SyntheticConfig(n_waves=20, points_per_wave=8, seed=s, d_text=8)
            )
        ).valid
        for s in range(3)
    )
    overlap = not validate_dataset(_spans_dataset([(1, 24), (20, 43)], 43)).valid
    gap = not validate_dataset(_spans_dataset([(1, 24), (30, 53)], 53)).valid
    ragged = not validate_dataset(_spans_dataset([(1, 24), (25, 40)], 40)).valid
    ok = generated_ok and overlap and gap and ragged
    _report(11, ok, f"generated accepted: {generated_ok}; rejected "
                    f"overlap/gap/ragged: {overlap}/{gap}/{ragged}")
