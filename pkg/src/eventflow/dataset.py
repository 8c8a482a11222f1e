"""Multimodal dataset model: event-segmented series, synthetic waveform
generation, deterministic event embeddings, windowing, and normalization.

A dataset is a univariate series of length L partitioned into contiguous,
non-overlapping event segments. Every segment carries a text description and a
unit-norm embedding of that description. All segments in one dataset share a
fixed length W so that windows batch cleanly and the token down-sampling of the
denoiser divides evenly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

CATEGORIES = ("sine", "triangle", "near-square", "sawtooth")
DEFAULT_CATEGORY_WEIGHTS = (0.356, 0.322, 0.24, 0.082)
DEFAULT_NOISE_LEVELS = (0.0, 0.05, 0.10)

DATASET_FORMAT_VERSION = 1

# Below this, history std is treated as degenerate and replaced by 1.
STD_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class EventSegment:
    """One event span: [start, end] timestamps (1-based, inclusive) plus text.

    Generator-produced embeddings have unit Euclidean norm; ablations may
    deliberately break that, so it is not asserted here.
    """

    start: int
    end: int
    description: str
    embedding: np.ndarray

    @property
    def length(self) -> int:
        return self.end - self.start + 1


@dataclass(frozen=True, eq=False)
class MultimodalDataset:
    """A series partitioned into ordered event segments with embeddings."""

    values: np.ndarray
    segments: list[EventSegment]
    name: str = ""
    frequency: str = ""
    seed: int = 0

    @property
    def L(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    @property
    def W(self) -> int:
        return self.segments[0].length

    @property
    def d_text(self) -> int:
        return int(self.segments[0].embedding.shape[0])

    def segment_values(self, i: int) -> np.ndarray:
        seg = self.segments[i]
        return self.values[seg.start - 1 : seg.end]


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.violations


@dataclass(frozen=True)
class SyntheticConfig:
    """Configuration for the synthetic waveform dataset generator."""

    n_waves: int = 1095
    points_per_wave: int = 24
    category_weights: tuple[float, ...] = DEFAULT_CATEGORY_WEIGHTS
    noise_levels: tuple[float, ...] = DEFAULT_NOISE_LEVELS
    seed: int = 0
    d_text: int = 128


@dataclass(frozen=True, eq=False)
class WindowSample:
    """p history (values, embedding) pairs plus q future pairs, z-score stats
    fit on the history block only."""

    history_values: np.ndarray  # [p, W]
    history_embeddings: np.ndarray  # [p, d_text]
    future_embeddings: np.ndarray  # [q, d_text]
    future_values: np.ndarray  # [q, W]
    mean: float
    std: float
    start_segment: int  # 0-based index of the first history segment

    @property
    def p(self) -> int:
        return int(self.history_values.shape[0])

    @property
    def q(self) -> int:
        return int(self.future_values.shape[0])

    @property
    def W(self) -> int:
        return int(self.history_values.shape[1])


# --------------------------------------------------------------------- checks


def validate_dataset(dataset: MultimodalDataset) -> ValidationReport:
    """Check ordering, overlap, coverage, and uniform segment length.

    Violations are data, not failures: they are returned in the report, and an
    empty list means the dataset is valid.
    """
    v: list[str] = []
    if dataset.values.ndim != 1:
        v.append(f"series must be 1-d, got ndim={dataset.values.ndim}")
        return ValidationReport(v)
    if not dataset.segments:
        v.append("dataset has no segments")
        return ValidationReport(v)
    if not np.all(np.isfinite(dataset.values)):
        bad = int(np.flatnonzero(~np.isfinite(dataset.values))[0])
        v.append(f"series contains nonfinite value at index {bad + 1}")

    L = dataset.L
    W = dataset.segments[0].length
    d_text = dataset.segments[0].embedding.shape[0]
    prev_end = 0
    for i, seg in enumerate(dataset.segments):
        if seg.start > seg.end:
            v.append(f"segment {i}: start {seg.start} > end {seg.end}")
            continue
        if i > 0 and seg.start < dataset.segments[i - 1].start:
            v.append(f"segment {i}: out of chronological order at {seg.start}")
        if seg.start <= prev_end:
            v.append(f"segment {i}: overlap at index {seg.start}")
        elif seg.start > prev_end + 1:
            v.append(f"coverage gap [{prev_end + 1},{seg.start - 1}] before segment {i}")
        if seg.length != W:
            v.append(f"segment {i}: length {seg.length} != common length {W}")
        if seg.embedding.shape != (d_text,):
            v.append(
                f"segment {i}: embedding shape {seg.embedding.shape} != ({d_text},)"
            )
        prev_end = max(prev_end, seg.end)
    if dataset.segments[0].start != 1:
        v.append(f"first segment starts at {dataset.segments[0].start}, expected 1")
    if prev_end != L:
        if prev_end < L:
            v.append(f"coverage gap [{prev_end + 1},{L}] at end of series")
        else:
            v.append(f"segments extend to {prev_end} beyond series length {L}")
    return ValidationReport(v)


def ensure_valid(dataset: MultimodalDataset) -> None:
    report = validate_dataset(dataset)
    if not report.valid:
        raise DataError("invalid dataset: " + "; ".join(report.violations))


# ------------------------------------------------------------------ synthesis


def _waveform(category: str, W: int) -> np.ndarray:
    """One period of the named waveform, amplitude ~1, sampled at W points."""
    tau = np.arange(W, dtype=np.float64) / W
    phase = 2.0 * np.pi * tau
    if category == "sine":
        return np.sin(phase)
    if category == "triangle":
        return (2.0 / np.pi) * np.arcsin(np.sin(phase))
    if category == "sawtooth":
        return 2.0 * tau - 1.0
    if category == "near-square":
        return np.tanh(5.0 * np.sin(phase))
    raise ValueError(f"unknown waveform category {category!r}")


def embed_event(description: str, d_text: int, seed: int) -> np.ndarray:
    """Deterministic unit-norm embedding of a description string.

    Pure function of (hash(description), d_text, seed): the description hash
    seeds a generator, d_text standard normals are drawn and normalized. The
    output never depends on where in a dataset the description appears.
    """
    if not description:
        raise ValueError("description must be nonempty")
    if d_text <= 0:
        raise ValueError(f"d_text must be positive, got {d_text}")
    digest = hashlib.sha256(description.encode("utf-8")).digest()
    words = np.frombuffer(digest, dtype=np.uint32)
    ss = np.random.SeedSequence([int(seed), int(d_text), *map(int, words)])
    rng = np.random.Generator(np.random.PCG64(ss))
    v = rng.standard_normal(d_text)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ValueError("degenerate zero embedding draw")
    return v / norm


def _check_synthetic_config(config: SyntheticConfig) -> None:
    w = np.asarray(config.category_weights, dtype=np.float64)
    if w.shape != (len(CATEGORIES),):
        raise ValueError(
            f"category_weights must have {len(CATEGORIES)} entries, got {w.shape}"
        )
    if np.any(w < 0):
        raise ValueError("category_weights must be nonnegative")
    if abs(float(w.sum()) - 1.0) > 1e-9:
        raise ValueError(f"category_weights must sum to 1, got {float(w.sum())}")
    if config.n_waves < 1:
        raise ValueError("n_waves must be >= 1")
    if config.points_per_wave < 2:
        raise ValueError("points_per_wave must be >= 2")
    if any(nl < 0 for nl in config.noise_levels):
        raise ValueError("noise_levels must be nonnegative")
    if not config.noise_levels:
        raise ValueError("noise_levels must be nonempty")


def generate_synthetic(config: SyntheticConfig) -> MultimodalDataset:
    """Generate n_waves event segments of W points each.

    Per segment: a category is drawn with the configured weights, a noise std
    uniformly from noise_levels, and one full period of the waveform is emitted
    plus Gaussian noise. Description strings are "<category> wave", with
    " with noise" appended when the drawn std is positive. Deterministic given
    the seed.
    """
    _check_synthetic_config(config)
    W = config.points_per_wave
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed)))
    weights = np.asarray(config.category_weights, dtype=np.float64)
    weights = weights / weights.sum()
    noise_levels = np.asarray(config.noise_levels, dtype=np.float64)

    values = np.empty(config.n_waves * W, dtype=np.float64)
    segments: list[EventSegment] = []
    embed_cache: dict[str, np.ndarray] = {}
    for s in range(config.n_waves):
        cat = CATEGORIES[int(rng.choice(len(CATEGORIES), p=weights))]
        std = float(noise_levels[int(rng.integers(0, len(noise_levels)))])
        x = _waveform(cat, W)
        if std > 0:
            x = x + std * rng.standard_normal(W)
        description = f"{cat} wave with noise" if std > 0 else f"{cat} wave"
        if description not in embed_cache:
            embed_cache[description] = embed_event(
                description, config.d_text, config.seed
            )
        start = s * W + 1
        values[start - 1 : start - 1 + W] = x
        segments.append(
            EventSegment(start, start + W - 1, description, embed_cache[description])
        )
    return MultimodalDataset(
        values=values,
        segments=segments,
        name="synthetic",
        frequency=f"{W} points per wave",
        seed=config.seed,
    )


def replace_embeddings_with_noise(
    dataset: MultimodalDataset, seed: int
) -> MultimodalDataset:
    """Replace every segment embedding with a fresh N(0, I) draw.

    Used by the no_text ablation and by the noise control of the
    predictability metric; the draws are independent per segment, so the text
    channel carries no information afterwards.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x17])))
    d_text = dataset.d_text
    segments = [
        EventSegment(s.start, s.end, s.description, rng.standard_normal(d_text))
        for s in dataset.segments
    ]
    return MultimodalDataset(
        values=dataset.values,
        segments=segments,
        name=dataset.name,
        frequency=dataset.frequency,
        seed=dataset.seed,
    )


# ------------------------------------------------------------------ windowing


def zscore_fit(history_values: np.ndarray) -> tuple[float, float]:
    """Mean/std over all history points; std below the floor is replaced by 1."""
    h = np.asarray(history_values, dtype=np.float64)
    if h.size == 0:
        raise ValueError("empty history")
    mean = float(h.mean())
    std = float(h.std())
    if std < STD_FLOOR:
        std = 1.0
    return mean, std


def zscore_apply(x: np.ndarray, stats: tuple[float, float]) -> np.ndarray:
    mean, std = stats
    return (np.asarray(x, dtype=np.float64) - mean) / std


def zscore_invert(x: np.ndarray, stats: tuple[float, float]) -> np.ndarray:
    mean, std = stats
    return np.asarray(x, dtype=np.float64) * std + mean


def make_windows(
    dataset: MultimodalDataset, p: int, q: int, stride: int = 1
) -> list[WindowSample]:
    """Slide a (p history + q future) window over consecutive segments."""
    if p < 1 or q < 1:
        raise ValueError(f"p and q must be >= 1, got p={p}, q={q}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    ensure_valid(dataset)
    n = dataset.n_segments
    if p + q > n:
        raise DataError(f"window needs {p + q} segments, dataset has {n}")
    seg_values = np.stack([dataset.segment_values(i) for i in range(n)])
    seg_embed = np.stack([s.embedding for s in dataset.segments])
    windows: list[WindowSample] = []
    for start in range(0, n - (p + q) + 1, stride):
        hist = seg_values[start : start + p]
        fut = seg_values[start + p : start + p + q]
        stats = zscore_fit(hist)
        windows.append(
            WindowSample(
                history_values=hist,
                history_embeddings=seg_embed[start : start + p],
                future_embeddings=seg_embed[start + p : start + p + q],
                future_values=fut,
                mean=stats[0],
                std=stats[1],
                start_segment=start,
            )
        )
    return windows


def split_windows(
    windows: list[WindowSample], val_fraction: float, test_fraction: float = 0.0
) -> tuple[list[WindowSample], list[WindowSample], list[WindowSample]]:
    """Chronological train/val/test split; later windows become val then test."""
    if not 0.0 <= val_fraction < 1.0 or not 0.0 <= test_fraction < 1.0:
        raise ValueError("fractions must lie in [0, 1)")
    n = len(windows)
    n_test = int(round(n * test_fraction))
    n_val = int(round(n * val_fraction))
    if val_fraction > 0.0:
        n_val = max(n_val, 1)
    if test_fraction > 0.0:
        n_test = max(n_test, 1)
    n_train = n - n_val - n_test
    if n_train < 1:
        raise DataError(
            f"split leaves no training windows ({n} total, {n_val} val, {n_test} test)"
        )
    return (
        windows[:n_train],
        windows[n_train : n_train + n_val],
        windows[n_train + n_val :],
    )


# ---------------------------------------------------------------- persistence


def save_dataset(dataset: MultimodalDataset, path: str | Path) -> None:
    """Write the dataset directory: manifest.json, series.f64, events.jsonl.

    All indices are 1-based; series values are little-endian float64.
    """
    ensure_valid(dataset)
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": DATASET_FORMAT_VERSION,
        "L": dataset.L,
        "W": dataset.W,
        "d_text": dataset.d_text,
        "seed": dataset.seed,
        "frequency": dataset.frequency,
        "name": dataset.name,
    }
    (root / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )
    (root / "series.f64").write_bytes(dataset.values.astype("<f8").tobytes())
    with open(root / "events.jsonl", "w") as f:
        for seg in dataset.segments:
            rec = {
                "start": seg.start,
                "end": seg.end,
                "description": seg.description,
                "embedding": [float(x) for x in seg.embedding],
            }
            f.write(json.dumps(rec) + "\n")


def load_dataset(path: str | Path) -> MultimodalDataset:
    """Read a dataset directory, cross-checking manifest against contents."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    series_path = root / "series.f64"
    events_path = root / "events.jsonl"
    for f in (manifest_path, series_path, events_path):
        if not f.exists():
            raise DataError(f"missing dataset file: {f}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"malformed manifest.json: {e}") from e
    version = manifest.get("version")
    if version != DATASET_FORMAT_VERSION:
        raise DataError(
            f"unsupported dataset format version {version!r}, "
            f"expected {DATASET_FORMAT_VERSION}"
        )
    raw = series_path.read_bytes()
    if len(raw) % 8 != 0:
        raise DataError(
            f"series.f64 truncated: parse error at byte offset {8 * (len(raw) // 8)}"
        )
    values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    L = manifest.get("L")
    if values.shape[0] != L:
        raise DataError(
            f"manifest L={L} but series.f64 holds {values.shape[0]} values"
        )
    segments: list[EventSegment] = []
    with open(events_path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"events.jsonl line {lineno}: {e}") from e
            try:
                segments.append(
                    EventSegment(
                        start=int(rec["start"]),
                        end=int(rec["end"]),
                        description=str(rec["description"]),
                        embedding=np.asarray(rec["embedding"], dtype=np.float64),
                    )
                )
            except (KeyError, TypeError, ValueError) as e:
                raise DataError(f"events.jsonl line {lineno}: bad record ({e})") from e
    dataset = MultimodalDataset(
        values=values,
        segments=segments,
        name=str(manifest.get("name", "")),
        frequency=str(manifest.get("frequency", "")),
        seed=int(manifest.get("seed", 0)),
    )
    report = validate_dataset(dataset)
    if not report.valid:
        raise DataError("dataset constraint violations: " + "; ".join(report.violations))
    W = manifest.get("W")
    if dataset.W != W:
        raise DataError(f"manifest W={W} but segments have length {dataset.W}")
    d_text = manifest.get("d_text")
    if dataset.d_text != d_text:
        raise DataError(
            f"manifest d_text={d_text} but embeddings have width {dataset.d_text}"
        )
    return dataset
