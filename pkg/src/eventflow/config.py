"""Run configuration: one YAML file, dotted command-line overrides, and a
content hash recorded in every output artifact.

Sections: data (paths, windowing, splits), synthetic (generator), model
(architecture), train, forecast, ablation (no_text, stacked_dit,
fixed_timestep). Every field has a default, so an empty config is valid; the
hash is the SHA-256 of the fully resolved config serialized with sorted keys,
hence independent of field order in the file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dataset import SyntheticConfig
from .denoiser import ModelConfig
from .forecasting import ForecastConfig
from .training import TrainConfig

_TUPLE_FIELDS = {"category_weights", "noise_levels"}


@dataclass(frozen=True)
class DataSection:
    dataset: str = "dataset"  # dataset directory: gen writes it, others read it
    p: int = 4
    q: int = 2
    stride: int = 1
    val_fraction: float = 0.15
    test_fraction: float = 0.15


@dataclass(frozen=True)
class ModelSection:
    """Architecture knobs; W and d_text come from the dataset at train time."""

    patch: int = 1
    M: int = 3
    d_model: int = 256
    d_state: int = 48
    m_state: int = 4
    d_ff: int = 1024
    n_heads: int = 4
    resample: int = 2


@dataclass(frozen=True)
class AblationSection:
    no_text: bool = False
    stacked_dit: bool = False
    fixed_timestep: bool = False


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    forecast: ForecastConfig = field(default_factory=ForecastConfig)
    ablation: AblationSection = field(default_factory=AblationSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def model_config(self, W: int, d_text: int) -> ModelConfig:
        m = self.model
        return ModelConfig(
            W=W,
            patch=m.patch,
            M=m.M,
            d_model=m.d_model,
            d_state=m.d_state,
            m_state=m.m_state,
            d_text=d_text,
            d_ff=m.d_ff,
            n_heads=m.n_heads,
            resample=m.resample,
            stacked=self.ablation.stacked_dit,
        )

    def train_config(self) -> TrainConfig:
        if self.ablation.fixed_timestep and not self.train.fixed_timestep:
            return dataclasses.replace(self.train, fixed_timestep=True)
        return self.train

    def forecast_config(self) -> ForecastConfig:
        if self.ablation.fixed_timestep and self.forecast.use_event_delta:
            return dataclasses.replace(self.forecast, use_event_delta=False)
        return self.forecast


_SECTIONS = {
    "data": DataSection,
    "synthetic": SyntheticConfig,
    "model": ModelSection,
    "train": TrainConfig,
    "forecast": ForecastConfig,
    "ablation": AblationSection,
}


def _build_section(cls, name: str, values: dict):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - allowed
    if unknown:
        raise ValueError(
            f"unknown key(s) in section '{name}': {', '.join(sorted(unknown))}"
        )
    coerced = {
        k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v
        for k, v in values.items()
    }
    return cls(**coerced)


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ValueError("config root must be a mapping of sections")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    parts = {}
    for name, cls in _SECTIONS.items():
        values = raw.get(name) or {}
        if not isinstance(values, dict):
            raise ValueError(f"section '{name}' must be a mapping")
        parts[name] = _build_section(cls, name, values)
    return RunConfig(**parts)


def apply_overrides(raw: dict, overrides: tuple[str, ...]) -> dict:
    """Apply 'section.key=value' strings; values parse as YAML scalars."""
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in raw.items()}
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override '{item}' is not of the form section.key=value")
        dotted, _, text = item.partition("=")
        parts = dotted.strip().split(".")
        if len(parts) != 2:
            raise ValueError(f"override '{item}' needs exactly one dot: section.key")
        section, key = parts
        value = yaml.safe_load(text) if text != "" else ""
        out.setdefault(section, {})
        if not isinstance(out[section], dict):
            raise ValueError(f"section '{section}' must be a mapping")
        out[section][key] = value
    return out


def load_run_config(
    path: str | Path | None, overrides: tuple[str, ...] = ()
) -> RunConfig:
    raw: dict = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text())
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ValueError(f"config file {path} must contain a mapping")
        raw = loaded
    raw = apply_overrides(raw, tuple(overrides))
    return config_from_dict(raw)


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]
