"""Command-line pipeline: dataset generation, training, forecasting,
evaluation, plotting, the predictability score, and the ablation matrix.

One YAML config file drives every command; ``--set section.key=value``
overrides individual fields. Output artifacts embed the resolved config hash
and package version, never wall-clock times or absolute paths, so a repeated
run with identical inputs and seeds produces identical bytes. The
EVENTFLOW_OUT environment variable sets the root under which default output
paths are created.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash, load_run_config
from .dataset import (
    CATEGORIES,
    MultimodalDataset,
    generate_synthetic,
    load_dataset,
    make_windows,
    replace_embeddings_with_noise,
    save_dataset,
    split_windows,
)
from .denoiser import init_params
from .errors import DataError, NumericalError
from .forecasting import forecast_windows, make_ensemble
from .metrics import (
    DEFAULT_NOISE_LEVELS_V,
    compute_report,
    dataset_pairs,
    delta_j_ftsd,
    write_report,
)
from .training import TrainState, fit, write_history

OUT_ROOT_ENV = "EVENTFLOW_OUT"
QUANTILE_KEYS = tuple(f"{q:.1f}" for q in np.arange(1, 10) * 0.1)


def _out_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, "."))


def _resolve_out(out: str | None, default_name: str) -> Path:
    path = Path(out) if out else _out_root() / default_name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _resolve_dataset_path(flag: str | None, cfg: RunConfig) -> Path:
    if flag:
        return Path(flag)
    p = Path(cfg.data.dataset)
    return p if p.is_absolute() else _out_root() / p


def _guarded(fn):
    """Map domain failures to the documented exit codes (2 usage, 3 data,
    4 numerical)."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except DataError as e:
            click.echo(f"data error: {e}", err=True)
            sys.exit(3)
        except NumericalError as e:
            click.echo(f"numerical failure: {e}", err=True)
            sys.exit(4)
        except (ValueError, TypeError, KeyError) as e:
            raise click.UsageError(str(e))

    return wrapper


def _config_options(fn):
    fn = click.option(
        "--config",
        "-c",
        "config_path",
        type=click.Path(exists=True, dir_okay=False),
        default=None,
        help="YAML run configuration.",
    )(fn)
    fn = click.option(
        "--set",
        "overrides",
        multiple=True,
        metavar="SECTION.KEY=VALUE",
        help="Override a config field.",
    )(fn)
    return fn


def _load_config(config_path, overrides) -> tuple[RunConfig, str]:
    cfg = load_run_config(config_path, overrides)
    return cfg, config_hash(cfg)


def _load_eval_dataset(path: Path, cfg: RunConfig) -> MultimodalDataset:
    """Dataset as the model under this config sees it (no_text applies the
    same seeded embedding replacement used at training time)."""
    ds = load_dataset(path)
    if cfg.ablation.no_text:
        ds = replace_embeddings_with_noise(ds, seed=cfg.train.seed)
    return ds


def parse_window_selector(selector: str, n: int) -> list[int]:
    """'all', 'a:b' (half-open), or a comma list of indices."""
    s = selector.strip()
    if s == "all":
        return list(range(n))
    if ":" in s:
        a, _, b = s.partition(":")
        start = int(a) if a else 0
        end = int(b) if b else n
        if not 0 <= start < end <= n:
            raise ValueError(f"window range {selector!r} invalid for {n} windows")
        return list(range(start, end))
    idx = [int(t) for t in s.split(",") if t.strip() != ""]
    if not idx:
        raise ValueError(f"empty window selector {selector!r}")
    for i in idx:
        if not 0 <= i < n:
            raise ValueError(f"window index {i} out of range [0, {n})")
    return idx


def _select_split(windows, cfg: RunConfig, split: str):
    train, val, test = split_windows(
        windows, cfg.data.val_fraction, cfg.data.test_fraction
    )
    chosen = {"train": train, "val": val, "test": test, "all": windows}[split]
    if not chosen:
        raise DataError(f"split '{split}' holds no windows")
    return chosen


@click.group()
@click.version_option(__version__, prog_name="eventflow")
def main():
    """Event-conditioned autoregressive flow-matching forecaster."""


# ------------------------------------------------------------------------ gen


@main.command()
@_config_options
@click.option("--out", "-o", type=click.Path(file_okay=False), default=None)
@_guarded
def gen(config_path, overrides, out):
    """Generate the synthetic event-labeled waveform dataset."""
    cfg, chash = _load_config(config_path, overrides)
    dataset = generate_synthetic(cfg.synthetic)
    out_dir = _resolve_out(out, cfg.data.dataset)
    save_dataset(dataset, out_dir)
    counts = {cat: 0 for cat in CATEGORIES}
    for seg in dataset.segments:
        name = seg.description.removesuffix(" with noise").removesuffix(" wave")
        counts[name] += 1
    n = dataset.n_segments
    click.echo(f"wrote dataset to {out_dir} (config {chash})")
    click.echo(f"L={dataset.L} timestamps, {n} segments of W={dataset.W}")
    for cat in CATEGORIES:
        click.echo(f"  {cat}: {counts[cat]} ({100.0 * counts[cat] / n:.1f}%)")


# ---------------------------------------------------------------------- train


def _restore_train_state(extra_tensors, extra_config) -> TrainState:
    saved = extra_config.get("train_state")
    if not saved:
        raise click.UsageError(
            "checkpoint has no optimizer state; only session-capped runs are resumable"
        )
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = saved["rng"]
    m = {k[len("adam.m.") :]: v for k, v in extra_tensors.items() if k.startswith("adam.m.")}
    v = {k[len("adam.v.") :]: t for k, t in extra_tensors.items() if k.startswith("adam.v.")}
    return TrainState(
        rng=rng,
        m=m,
        v=v,
        step=saved["step"],
        epoch=saved["epoch"],
        total_steps=saved["total_steps"],
        best_val=saved["best_val"],
        evals_since_best=saved["evals_since_best"],
    )


@main.command()
@_config_options
@click.option("--dataset", "-d", "dataset_path", type=click.Path(), default=None)
@click.option("--out", "-o", type=click.Path(file_okay=False), default=None)
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option(
    "--stop-after-epoch",
    type=int,
    default=None,
    help="End the session after this epoch; checkpoint stays resumable.",
)
@_guarded
def train(config_path, overrides, dataset_path, out, resume, stop_after_epoch):
    """Train the denoiser; writes checkpoint.bin, history.csv, run.json."""
    cfg, chash = _load_config(config_path, overrides)
    ds_path = _resolve_dataset_path(dataset_path, cfg)
    dataset = _load_eval_dataset(ds_path, cfg)
    windows = make_windows(dataset, cfg.data.p, cfg.data.q, cfg.data.stride)
    train_w, val_w, _ = split_windows(
        windows, cfg.data.val_fraction, cfg.data.test_fraction
    )
    model_config = cfg.model_config(dataset.W, dataset.d_text)
    train_config = cfg.train_config()

    if resume:
        params, extra_t, extra_c = load_checkpoint(resume)
        if params.config != model_config:
            raise click.UsageError(
                "checkpoint architecture differs from the requested config"
            )
        state = _restore_train_state(extra_t, extra_c)
    else:
        params = init_params(model_config, seed=train_config.seed)
        state = None

    def log(row):
        if row.get("val_loss") is not None:
            click.echo(f"epoch {row['epoch']:4d}  val_loss {row['val_loss']:.6f}")

    best, history, state = fit(
        train_w,
        val_w,
        model_config,
        train_config,
        params=params,
        state=state,
        log=log,
        stop_after_epoch=stop_after_epoch,
    )

    out_dir = _resolve_out(out, "run")
    write_history(history, out_dir / "history.csv")
    base_extra = {
        "config_hash": chash,
        "version": __version__,
        "ablation": dataclasses.asdict(cfg.ablation),
    }
    if state.stop_reason == "session_cap":
        extra_tensors = {f"adam.m.{k}": v for k, v in state.m.items()}
        extra_tensors.update({f"adam.v.{k}": v for k, v in state.v.items()})
        extra = dict(base_extra)
        extra["train_state"] = {
            "rng": state.rng.bit_generator.state,
            "step": state.step,
            "epoch": state.epoch,
            "total_steps": state.total_steps,
            "best_val": state.best_val,
            "evals_since_best": state.evals_since_best,
        }
        save_checkpoint(out_dir / "checkpoint.bin", params, extra_tensors, extra)
    else:
        save_checkpoint(out_dir / "checkpoint.bin", best, extra_config=base_extra)

    run_info = {
        "version": __version__,
        "config_hash": chash,
        "config": cfg.to_dict(),
        "n_parameters": params.n_parameters(),
        "epochs_run": state.epoch,
        "steps": state.step,
        "best_val": state.best_val,
        "stop_reason": state.stop_reason,
        "resumable": state.stop_reason == "session_cap",
        "n_train_windows": len(train_w),
        "n_val_windows": len(val_w),
    }
    (out_dir / "run.json").write_text(
        json.dumps(run_info, sort_keys=True, indent=2) + "\n"
    )
    click.echo(
        f"trained {state.epoch} epochs ({state.step} steps), "
        f"best val {state.best_val:.6f}, stop: {state.stop_reason}"
    )
    click.echo(f"wrote {out_dir / 'checkpoint.bin'}")


# ------------------------------------------------------------------- forecast


@main.command()
@_config_options
@click.option(
    "--checkpoint",
    "-k",
    "checkpoint_path",
    type=click.Path(exists=True, dir_okay=False),
    required=True,
)
@click.option("--dataset", "-d", "dataset_path", type=click.Path(), default=None)
@click.option(
    "--split",
    type=click.Choice(["train", "val", "test", "all"]),
    default="test",
    show_default=True,
)
@click.option("--windows", "-w", "selector", default="all", show_default=True)
@click.option("--out", "-o", type=click.Path(file_okay=False), default=None)
@_guarded
def forecast(config_path, overrides, checkpoint_path, dataset_path, split, selector, out):
    """Sample forecast ensembles; writes forecast.json plus ensemble.f64."""
    cfg, chash = _load_config(config_path, overrides)
    params, _, _ = load_checkpoint(checkpoint_path)
    ds_path = _resolve_dataset_path(dataset_path, cfg)
    dataset = _load_eval_dataset(ds_path, cfg)
    windows = make_windows(dataset, cfg.data.p, cfg.data.q, cfg.data.stride)
    chosen = _select_split(windows, cfg, split)
    picked = parse_window_selector(selector, len(chosen))
    samples = [chosen[i] for i in picked]

    fc_config = cfg.forecast_config()
    ensembles = forecast_windows(samples, params, fc_config)

    out_dir = _resolve_out(out, "forecast")
    traj = np.stack([e.trajectories for e in ensembles])
    traj.astype("<f8").tofile(out_dir / "ensemble.f64")

    entries = []
    for w, ens in zip(samples, ensembles):
        flat = ens.trajectories.reshape(ens.trajectories.shape[0], -1)
        quantiles = {
            key: np.quantile(flat, float(key), axis=0)
            .reshape(w.q, w.W)
            .tolist()
            for key in QUANTILE_KEYS
        }
        entries.append(
            {
                "start_segment": w.start_segment,
                "point": ens.point_forecast.tolist(),
                "quantiles": quantiles,
            }
        )
    payload = {
        "version": __version__,
        "config_hash": chash,
        "p": cfg.data.p,
        "q": cfg.data.q,
        "stride": cfg.data.stride,
        "split": split,
        "window_indices": picked,
        "forecast": dataclasses.asdict(fc_config),
        "n_windows": len(samples),
        "n_samples": fc_config.n_samples,
        "W": samples[0].W,
        "ensemble_file": "ensemble.f64",
        "ensemble_shape": list(traj.shape),
        "windows": entries,
    }
    (out_dir / "forecast.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n"
    )
    click.echo(
        f"forecast {len(samples)} windows x {fc_config.n_samples} members "
        f"-> {out_dir / 'forecast.json'}"
    )


# ----------------------------------------------------------------------- eval


def _load_forecast(forecast_path: Path) -> tuple[dict, np.ndarray]:
    payload = json.loads(forecast_path.read_text())
    sidecar = forecast_path.parent / payload["ensemble_file"]
    if not sidecar.exists():
        raise DataError(f"ensemble sidecar missing: {sidecar}")
    shape = tuple(payload["ensemble_shape"])
    traj = np.fromfile(sidecar, dtype="<f8")
    expected = int(np.prod(shape))
    if traj.size != expected:
        raise DataError(
            f"ensemble sidecar holds {traj.size} values, expected {expected}"
        )
    return payload, traj.reshape(shape)


def _matched_windows(payload: dict, dataset: MultimodalDataset):
    """Rebuild the exact windows a forecast was made for."""
    windows = make_windows(
        dataset, payload["p"], payload["q"], payload["stride"]
    )
    by_start = {w.start_segment: w for w in windows}
    out = []
    for entry in payload["windows"]:
        start = entry["start_segment"]
        if start not in by_start:
            raise DataError(f"forecast window at segment {start} not in dataset")
        out.append(by_start[start])
    return out


@main.command(name="eval")
@_config_options
@click.option(
    "--forecast",
    "-f",
    "forecast_path",
    type=click.Path(exists=True, dir_okay=False),
    required=True,
)
@click.option("--dataset", "-d", "dataset_path", type=click.Path(), default=None)
@click.option("--out", "-o", type=click.Path(file_okay=False), default=None)
@_guarded
def eval_cmd(config_path, overrides, forecast_path, dataset_path, out):
    """Score forecasts against ground truth; writes report.json + report.csv."""
    cfg, chash = _load_config(config_path, overrides)
    payload, traj = _load_forecast(Path(forecast_path))
    ds_path = _resolve_dataset_path(dataset_path, cfg)
    dataset = load_dataset(ds_path)
    samples = _matched_windows(payload, dataset)
    ensembles = [
        make_ensemble(traj[i], (w.mean, w.std)) for i, w in enumerate(samples)
    ]
    report = compute_report(
        ensembles,
        samples,
        metadata={
            "version": __version__,
            "config_hash": chash,
            "forecast_config_hash": payload["config_hash"],
            "split": payload["split"],
            "n_windows": len(samples),
            "horizon_segments": payload["q"],
        },
    )
    out_dir = _resolve_out(out, "eval")
    write_report(report, out_dir / "report.json", out_dir / "report.csv")
    for name, value in report.aggregate.items():
        click.echo(f"{name:>6}: {value:.6f}")
    click.echo(f"wrote {out_dir / 'report.json'}")


# ----------------------------------------------------------------------- plot


def window_figure(w, entry):
    """Build the figure for one forecast window; caller saves and closes it."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    W, p, q = w.W, w.p, w.q
    hist = w.history_values.reshape(-1)
    truth = w.future_values.reshape(-1)
    point = np.asarray(entry["point"], dtype=np.float64).reshape(-1)
    lo = np.asarray(entry["quantiles"]["0.1"], dtype=np.float64).reshape(-1)
    hi = np.asarray(entry["quantiles"]["0.9"], dtype=np.float64).reshape(-1)
    t_hist = np.arange(p * W)
    t_fut = np.arange(p * W, (p + q) * W)

    fig, ax = plt.subplots(figsize=(9, 3.2), dpi=100)
    ax.plot(t_hist, hist, color="#444444", lw=1.0, label="history")
    ax.plot(t_fut, truth, color="#1a70b8", lw=1.2, label="ground truth")
    ax.plot(t_fut, point, color="#c6401d", lw=1.2, label="forecast")
    ax.fill_between(t_fut, lo, hi, color="#c6401d", alpha=0.2, lw=0, label="10-90%")
    for k in range(1, p + q):
        ax.axvline(k * W, color="#999999", lw=0.6, ls=":")
    ax.set_xlim(0, (p + q) * W - 1)
    ax.set_xlabel("time step")
    ax.legend(loc="upper left", fontsize=8, ncol=4)
    ax.set_title(f"window at segment {w.start_segment}", fontsize=10)
    fig.tight_layout()
    return fig


@main.command()
@_config_options
@click.option(
    "--forecast",
    "-f",
    "forecast_path",
    type=click.Path(exists=True, dir_okay=False),
    required=True,
)
@click.option("--dataset", "-d", "dataset_path", type=click.Path(), default=None)
@click.option("--windows", "-w", "selector", default="all", show_default=True)
@click.option("--out", "-o", type=click.Path(file_okay=False), default=None)
@_guarded
def plot(config_path, overrides, forecast_path, dataset_path, selector, out):
    """Render one PNG per selected window: history, truth, forecast, band."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cfg, chash = _load_config(config_path, overrides)
    payload, _ = _load_forecast(Path(forecast_path))
    ds_path = _resolve_dataset_path(dataset_path, cfg)
    dataset = load_dataset(ds_path)
    samples = _matched_windows(payload, dataset)
    picked = parse_window_selector(selector, len(samples))
    out_dir = _resolve_out(out, "plots")

    for i in picked:
        w = samples[i]
        fig = window_figure(w, payload["windows"][i])
        fig.savefig(
            out_dir / f"window_{w.start_segment:05d}.png",
            metadata={"Software": f"eventflow {__version__} config {chash}"},
        )
        plt.close(fig)
    click.echo(f"wrote {len(picked)} plot(s) to {out_dir}")


# ---------------------------------------------------------------------- jftsd


@main.command()
@_config_options
@click.option("--dataset", "-d", "dataset_path", type=click.Path(), default=None)
@click.option(
    "--nu",
    "noise_levels",
    multiple=True,
    type=float,
    help="Noise level; repeat for several. Default 0.05 0.1 0.2.",
)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "-o", type=click.Path(dir_okay=False), default=None)
@_guarded
def jftsd(config_path, overrides, dataset_path, noise_levels, seed, out):
    """Event-predictability score of a dataset (positive = informative events)."""
    cfg, chash = _load_config(config_path, overrides)
    ds_path = _resolve_dataset_path(dataset_path, cfg)
    dataset = _load_eval_dataset(ds_path, cfg)
    V = tuple(noise_levels) if noise_levels else DEFAULT_NOISE_LEVELS_V
    pairs = dataset_pairs(dataset)
    value = delta_j_ftsd(pairs, V, seed)
    result = {
        "version": __version__,
        "config_hash": chash,
        "delta_v_jftsd": value,
        "noise_levels": list(V),
        "seed": seed,
        "n_pairs": len(pairs),
        "no_text": cfg.ablation.no_text,
    }
    click.echo(json.dumps(result, sort_keys=True, indent=2))
    if out:
        Path(out).write_text(json.dumps(result, sort_keys=True, indent=2) + "\n")


# --------------------------------------------------------------------- ablate

ABLATION_VARIANTS = ("full", "no_text", "stacked_dit", "fixed_timestep")


@main.command()
@_config_options
@click.option("--dataset", "-d", "dataset_path", type=click.Path(), default=None)
@click.option("--out", "-o", type=click.Path(file_okay=False), default=None)
@_guarded
def ablate(config_path, overrides, dataset_path, out):
    """Train and evaluate the full model plus the three single-flag ablations."""
    cfg, chash = _load_config(config_path, overrides)
    ds_path = _resolve_dataset_path(dataset_path, cfg)
    out_dir = _resolve_out(out, "ablate")
    rows = []
    for variant in ABLATION_VARIANTS:
        flags = {flag: flag == variant for flag in ABLATION_VARIANTS[1:]}
        vcfg = dataclasses.replace(
            cfg, ablation=dataclasses.replace(cfg.ablation, **flags)
        )
        dataset = _load_eval_dataset(ds_path, vcfg)
        windows = make_windows(dataset, vcfg.data.p, vcfg.data.q, vcfg.data.stride)
        train_w, val_w, test_w = split_windows(
            windows, vcfg.data.val_fraction, vcfg.data.test_fraction
        )
        if not test_w:
            raise DataError("ablation needs a nonempty test split")
        model_config = vcfg.model_config(dataset.W, dataset.d_text)
        click.echo(f"[{variant}] training...")
        best, history, state = fit(train_w, val_w, model_config, vcfg.train_config())
        vdir = out_dir / variant
        vdir.mkdir(parents=True, exist_ok=True)
        write_history(history, vdir / "history.csv")
        save_checkpoint(
            vdir / "checkpoint.bin",
            best,
            extra_config={
                "config_hash": config_hash(vcfg),
                "version": __version__,
                "ablation": dataclasses.asdict(vcfg.ablation),
            },
        )
        ensembles = forecast_windows(test_w, best, vcfg.forecast_config())
        report = compute_report(
            ensembles,
            test_w,
            metadata={
                "version": __version__,
                "config_hash": config_hash(vcfg),
                "variant": variant,
            },
        )
        write_report(report, vdir / "report.json", vdir / "report.csv")
        rows.append({"variant": variant, **report.aggregate})
        click.echo(
            f"[{variant}] epochs {state.epoch}, "
            + ", ".join(f"{k} {v:.4f}" for k, v in report.aggregate.items())
        )

    metric_names = [k for k in rows[0] if k != "variant"]
    table = {
        "version": __version__,
        "config_hash": chash,
        "variants": rows,
    }
    (out_dir / "ablation.json").write_text(
        json.dumps(table, sort_keys=True, indent=2) + "\n"
    )
    with open(out_dir / "ablation.csv", "w", newline="") as f:
        import csv

        writer = csv.DictWriter(f, fieldnames=["variant"] + metric_names)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)

    width = max(len(v) for v in ABLATION_VARIANTS)
    header = "variant".ljust(width) + "  " + "  ".join(
        f"{m:>10}" for m in metric_names
    )
    click.echo(header)
    for row in rows:
        click.echo(
            row["variant"].ljust(width)
            + "  "
            + "  ".join(f"{row[m]:>10.4f}" for m in metric_names)
        )
    click.echo(f"wrote {out_dir / 'ablation.json'}")


if __name__ == "__main__":
    main()
