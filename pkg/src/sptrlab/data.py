"""Synthetic few-shot data whose class centres come from the class embeddings."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import Backbone

_STREAM_DATA = 11
_STREAM_SHOTS = 12


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    n_classes: int = 10
    samples_per_class: int = 64
    noise: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("a dataset needs at least 2 classes")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if self.noise < 0:
            raise ValueError("noise scale must be non-negative")


@dataclass(frozen=True)
class Split:
    base: tuple
    novel: tuple

    @classmethod
    def halves(cls, n_classes: int) -> "Split":
        cut = (n_classes + 1) // 2
        return cls(tuple(range(cut)), tuple(range(cut, n_classes)))


def generate_dataset(spec: SyntheticDatasetSpec, backbone: Backbone) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian clouds around each class centre, clipped to [0, 1].

    Returns ``X`` of shape (n_classes * samples_per_class, d_in) and integer
    labels ``y``, grouped by class.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _STREAM_DATA]))
    centers = backbone.class_center(range(spec.n_classes))
    y = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)
    noise = rng.standard_normal((y.size, backbone.d_in))
    X = np.clip(centers[y] + spec.noise * noise, 0.0, 1.0)
    return X, y


def sample_few_shot(y, classes, shots: int, seed: int) -> np.ndarray:
    """Sorted indices of exactly ``shots`` samples per class, drawn without replacement."""
    y = np.asarray(y)
    rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_SHOTS]))
    picked = []
    for k in classes:
        pool = np.flatnonzero(y == k)
        if shots > pool.size:
            raise ValueError(f"class {k} has {pool.size} samples, {shots} shots requested")
        picked.append(rng.choice(pool, size=shots, replace=False))
    return np.sort(np.concatenate(picked)) if picked else np.array([], dtype=np.intp)


def nearest_center_accuracy(X, y, centers) -> float:
    """Accuracy of assigning each sample to its closest centre (Euclidean)."""
    d = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    return float(np.mean(np.argmin(d, axis=1) == y))
