"""Toy datasets and their column-text file format."""

from __future__ import annotations

from pathlib import Path
from typing import Tuple

import numpy as np
from sklearn.model_selection import train_test_split

from ._validation import ValidationError

HEADER = "# autoquant-dataset v1"


def blobs(n: int, dim: int = 2, separation: float = 5.0, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Two unit-variance Gaussian classes centred at +/- separation/2 on axis 0.

    Labels are balanced (``n // 2`` zeros) and rows are shuffled.
    """
    if n < 2 or dim < 1:
        raise ValidationError("blobs needs n >= 2 and dim >= 1")
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], [n // 2, n - n // 2])
    centre = np.zeros(dim)
    centre[0] = separation / 2.0
    X = rng.standard_normal((n, dim)) + np.where(y[:, None] == 1, centre, -centre)
    order = rng.permutation(n)
    return X[order].astype(np.float32), y[order].astype(np.int64)


def rings(n: int, radii=(1.0, 3.0), noise: float = 0.2, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Two concentric 2-d rings, inner ring labelled 0."""
    if n < 2:
        raise ValidationError("rings needs n >= 2")
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], [n // 2, n - n // 2])
    angle = rng.uniform(0, 2 * np.pi, n)
    radius = np.asarray(radii, dtype=np.float64)[y] + noise * rng.standard_normal(n)
    X = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    order = rng.permutation(n)
    return X[order].astype(np.float32), y[order].astype(np.int64)


def save_dataset(path, X: np.ndarray, y: np.ndarray) -> None:
    X = np.asarray(X, dtype=np.float32)
    lines = [HEADER]
    for row, label in zip(X, np.asarray(y)):
        lines.append(",".join(repr(float(v)) for v in row) + f",{int(label)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> Tuple[np.ndarray, np.ndarray]:
    """Read comma- or whitespace-separated rows: features..., integer label."""
    feats, labels = [], []
    width = None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        try:
            row = [float(v) for v in parts[:-1]]
            label = int(parts[-1])
        except (ValueError, IndexError):
            raise ValidationError(f"{path}:{lineno}: malformed row {raw!r}") from None
        if not row or (width is not None and len(row) != width):
            raise ValidationError(f"{path}:{lineno}: expected {width} features, got {len(row)}")
        width = len(row)
        feats.append(row)
        labels.append(label)
    if not feats:
        raise ValidationError(f"{path}: no data rows")
    return np.asarray(feats, dtype=np.float32), np.asarray(labels, dtype=np.int64)


def generate_dataset(kind: str, n: int = 2500, dim: int = 2, separation: float = 5.0, seed: int = 0):
    kind = kind.lower()
    if kind == "blobs":
        return blobs(n, dim, separation, seed)
    if kind == "rings":
        return rings(n, seed=seed)
    if Path(kind).exists():
        return load_dataset(kind)
    raise ValidationError(f"unknown dataset {kind!r} (expected blobs, rings or a file path)")


def split(X, y, seed: int, test_fraction: float = 0.2):
    """Deterministic train/test split; returns X_train, X_test, y_train, y_test."""
    return train_test_split(X, y, test_size=test_fraction, random_state=seed, shuffle=True)
