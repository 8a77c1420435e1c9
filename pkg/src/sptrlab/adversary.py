"""PGD adversarial examples against a cosine-similarity classifier."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .encoders import EncoderWeights, encode_image


@dataclass(frozen=True)
class AttackConfig:
    """Radius ``epsilon``, step ``step_size`` (None means epsilon), ``steps`` and norm order ``p``."""

    epsilon: float = 1.0 / 255.0
    step_size: float | None = None
    steps: int = 2
    p: float = math.inf

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.p > 1:
            raise ValueError("norm order p must be > 1")

    @property
    def mu(self) -> float:
        return self.epsilon if self.step_size is None else self.step_size


def dual_exponent(p: float) -> float:
    if math.isinf(p):
        return 1.0
    return p / (p - 1.0)


def update_direction(grad, p: float, epsilon: float) -> np.ndarray:
    """Steepest-ascent step of l_p length ``epsilon`` along ``grad``.

    ``eps * sign(g) * |g|^(q-1) / (||g||_q^q)^(1/p)`` with ``q`` dual to ``p``,
    applied to the last axis (one direction per row for a batch). At p=inf
    this is exactly ``eps * sign(g)``; at p=2 it is ``eps * g / ||g||_2``.
    Rows with zero gradient get a zero step.
    """
    g = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ValueError("update_direction: gradient is not finite")
    q = dual_exponent(p)
    mag = np.abs(g)
    norm_q = np.sum(mag ** q, axis=-1, keepdims=True)
    inv_p = 0.0 if math.isinf(p) else 1.0 / p
    denom = norm_q ** inv_p
    zero = norm_q == 0.0
    denom = np.where(zero, 1.0, denom)
    delta = epsilon * np.sign(g) * mag ** (q - 1.0) / denom
    return np.where(zero, 0.0, delta)


def project(r, epsilon: float, p: float) -> np.ndarray:
    """Nearest point of the l_p ball of radius ``epsilon`` (p in {2, inf}), per row."""
    r = np.asarray(r, dtype=np.float64)
    if math.isinf(p):
        return np.clip(r, -epsilon, epsilon)
    if p == 2:
        norm = np.linalg.norm(r, axis=-1, keepdims=True)
        factor = np.where(norm > epsilon, epsilon / np.where(norm > 0, norm, 1.0), 1.0)
        return r * factor
    raise ValueError(f"projection is implemented for p in {{2, inf}}, got {p}")


def lee_loss(x_pert, y, classifier, tau: float, image: EncoderWeights, visual_deep=None) -> ag.Node:
    """Summed cross-entropy of the images against a fixed text classifier.

    ``classifier`` holds one unit text feature per class (K, d_feat). The
    loss is summed rather than averaged so each row's input gradient is that
    sample's own gradient.
    """
    y = np.atleast_1d(np.asarray(y))
    classifier = np.asarray(classifier, dtype=np.float64)
    k = classifier.shape[0]
    if y.size == 0 or y.min() < 0 or y.max() >= k:
        raise ValueError(f"lee_loss: labels must lie in [0, {k})")
    feats = encode_image(x_pert, visual_deep, image)
    batch = feats.value.ndim == 2
    logits = ag.scale(ag.affine(feats, classifier), 1.0 / tau)
    logp = ag.log_softmax(logits)
    pick = np.zeros(logp.shape)
    if batch:
        pick[np.arange(y.size), y] = -1.0
    else:
        pick[y[0]] = -1.0
    return ag.weighted_sum(logp, pick)


def pgd_attack(x, y, config: AttackConfig, classifier, tau: float, image: EncoderWeights,
               visual_deep=None) -> np.ndarray:
    """Projected gradient ascent on ``lee_loss`` from a zero perturbation.

    Each iteration moves ``r`` by ``mu * update_direction`` and projects back
    onto the ball; the image is clipped to [0, 1] after the final step. The
    result is plain data: nothing downstream differentiates through it.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("pgd_attack: inputs must lie in [0, 1]")
    vd = None if visual_deep is None else np.asarray(ag.as_node(visual_deep).value)
    r = np.zeros_like(x)
    for _ in range(config.steps):
        xr = ag.leaf(x + r)
        ag.backward(lee_loss(xr, y, classifier, tau, image, vd))
        step = update_direction(xr.grad, config.p, config.epsilon)
        r = project(r + config.mu * step, config.epsilon, config.p)
    return np.clip(x + r, 0.0, 1.0)
