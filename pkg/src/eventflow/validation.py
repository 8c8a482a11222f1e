"""Input coercion and checking shared by the estimator and the CLI."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import MultimodalDataset, WindowSample, load_dataset, make_windows
from .errors import DataError


def as_dataset(X) -> MultimodalDataset:
    """Accept a dataset object or a dataset directory path."""
    if isinstance(X, MultimodalDataset):
        return X
    if isinstance(X, (str, Path)):
        return load_dataset(X)
    raise TypeError(
        f"expected MultimodalDataset or dataset path, got {type(X).__name__}"
    )


def as_windows(X, p: int, q: int, stride: int = 1) -> list[WindowSample]:
    """Accept a prepared window list, a dataset, or a dataset path."""
    if isinstance(X, list):
        check_windows(X)
        return X
    return make_windows(as_dataset(X), p, q, stride)


def check_windows(windows: list[WindowSample]) -> None:
    """All windows must agree on p, q, W, and embedding width."""
    if not windows:
        raise DataError("empty window list")
    first = windows[0]
    if not isinstance(first, WindowSample):
        raise TypeError(f"expected WindowSample items, got {type(first).__name__}")
    key = (first.p, first.q, first.W, first.history_embeddings.shape[1])
    for i, w in enumerate(windows[1:], start=1):
        k = (w.p, w.q, w.W, w.history_embeddings.shape[1])
        if k != key:
            raise DataError(f"window {i} shape {k} differs from window 0 {key}")


def ensure_finite(name: str, array: np.ndarray) -> None:
    if not np.all(np.isfinite(array)):
        raise DataError(f"{name} contains non-finite values")
