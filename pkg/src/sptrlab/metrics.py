from __future__ import annotations

import numpy as np


def harmonic_mean(base: float, novel: float) -> float:
    """``2 * base * novel / (base + novel)``; both inputs must be positive."""
    if not (base > 0 and novel > 0):
        raise ValueError(f"harmonic mean needs positive inputs, got {base}, {novel}")
    return 2.0 * base * novel / (base + novel)


def accuracy(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    if y_true.size == 0:
        raise ValueError("accuracy of an empty evaluation set is undefined")
    return float(np.mean(y_true == np.asarray(y_pred)))


def argmax_accuracy(text_feats, image_feats, y_local) -> float:
    """Accuracy of picking the text feature with the largest cosine.

    Temperature is irrelevant here, since positive scaling keeps the argmax.
    """
    scores = np.asarray(image_feats) @ np.asarray(text_feats).T
    return accuracy(y_local, np.argmax(scores, axis=-1))


def monotone_fraction(values) -> float:
    """Share of consecutive pairs where the sequence does not increase."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return 1.0
    return float(np.mean(np.diff(v) <= 0.0))
