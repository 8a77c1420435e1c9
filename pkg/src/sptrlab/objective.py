"""Losses of the prompt-tuning objective and the SGD update."""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .encoders import Backbone, PromptLeaves, PromptState, encode_image, encode_text
from .exceptions import NonFiniteError, ShapeError
from .transport import regularizer_from_features


def similarity_logits(text_feats, image_feats, tau: float) -> ag.Node:
    """Cosine scores divided by ``tau``; (B, K) for a batch of images."""
    if not tau > 0:
        raise ValueError("temperature tau must be positive")
    return ag.scale(ag.affine(image_feats, text_feats), 1.0 / tau)


def _label_weights(shape, y, scale: float) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=np.intp))
    k = shape[-1]
    if y.size == 0 or y.min() < 0 or y.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    w = np.zeros(shape)
    if len(shape) == 1:
        if y.size != 1:
            raise ShapeError("one label expected for a single image")
        w[y[0]] = scale
    else:
        if y.size != shape[0]:
            raise ShapeError(f"{y.size} labels for {shape[0]} images")
        w[np.arange(y.size), y] = scale
    return w


def ce_loss(v_n, text_feats, y, tau: float) -> ag.Node:
    """Mean cross-entropy of the class softmax over cosine logits."""
    logp = ag.log_softmax(similarity_logits(text_feats, v_n, tau))
    n = 1 if logp.value.ndim == 1 else logp.shape[0]
    return ag.weighted_sum(logp, _label_weights(logp.shape, y, -1.0 / n))


def sp_loss(v_n, v_adv, tun_feats, hand_feats, tau: float, direction: str = "natural") -> ag.Node:
    """Batch-mean KL between the natural and adversarial class distributions.

    The natural distribution comes from the tuned text features on clean
    images, the adversarial one from the hand-crafted features on attacked
    images. ``direction="natural"`` takes the natural distribution as the
    reference (first KL argument); ``"adversarial"`` swaps them.
    """
    nat = similarity_logits(tun_feats, v_n, tau)
    adv = similarity_logits(hand_feats, v_adv, tau)
    if direction == "natural":
        kl = ag.kl_logits(nat, adv)
    elif direction == "adversarial":
        kl = ag.kl_logits(adv, nat)
    else:
        raise ValueError(f"unknown KL direction {direction!r}")
    return ag.mean(kl) if kl.value.ndim else kl


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    sp: float
    dis: float
    total: float
    alpha: float

    def __post_init__(self):
        for name in ("ce", "sp", "dis", "total"):
            if not math.isfinite(getattr(self, name)):
                raise NonFiniteError(f"{name} loss is not finite")
        if abs(self.total - (self.ce + self.sp + self.alpha * self.dis)) > 1e-12:
            raise ArithmeticError("loss breakdown does not add up")

    def as_dict(self) -> dict[str, float]:
        return {"ce": self.ce, "sp": self.sp, "dis": self.dis, "total": self.total}


def total_loss(ce, sp=None, dis=None, alpha: float = 0.3) -> tuple[ag.Node, LossBreakdown]:
    """``ce + sp + alpha * dis``; a term given as None is disabled and counts as 0."""
    parts = {"ce": ce, "sp": sp, "dis": dis}
    for name, part in parts.items():
        raw = part.value if isinstance(part, ag.Node) else np.asarray(part, dtype=np.float64)
        if part is not None and not np.all(np.isfinite(raw)):
            raise NonFiniteError(f"{name} loss is not finite")
    out = ag.as_node(ce)
    if sp is not None:
        out = ag.add(out, sp)
    if dis is not None:
        out = ag.add(out, ag.scale(dis, alpha))
    value = lambda p: 0.0 if p is None else float(ag.as_node(p).value)
    breakdown = LossBreakdown(value(ce), value(sp), value(dis), float(out.value), float(alpha))
    return out, breakdown


@contextmanager
def _term(name: str):
    # re-raise graph overflow under the name of the loss term being built
    try:
        yield
    except NonFiniteError as exc:
        raise NonFiniteError(f"{name} loss is not finite ({exc})") from exc


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.3
    tau: float = 0.01
    ot_enabled: bool = True
    sp_enabled: bool = True
    kl_direction: str = "natural"
    ot_eta: float = 0.05
    ot_tol: float = 1e-6
    ot_max_iter: int = 200


def sptr_objective(leaves: PromptLeaves, backbone: Backbone, x, y, class_ids, x_adv=None,
                   config: LossConfig = LossConfig()) -> tuple[ag.Node, LossBreakdown]:
    """Full training loss on one batch.

    ``y`` indexes into ``class_ids``. ``x_adv`` is required when the
    similarity term is enabled and is treated as constant input.
    """
    class_ids = list(class_ids)
    with _term("ce"):
        t_tun = encode_text(leaves.context, backbone.class_embeddings(class_ids), leaves.text_deep, backbone.text)
        v_n = encode_image(x, leaves.visual_deep, backbone.image)
        ce = ce_loss(v_n, t_tun, y, config.tau)
    sp = dis = None
    if config.sp_enabled:
        if x_adv is None:
            raise ValueError("similarity term enabled but no adversarial batch given")
        with _term("sp"):
            v_adv = encode_image(x_adv, leaves.visual_deep, backbone.image)
            sp = sp_loss(v_n, v_adv, t_tun, backbone.hand_classifier(class_ids), config.tau, config.kl_direction)
    if config.ot_enabled:
        with _term("dis"):
            dis = regularizer_from_features(t_tun, [backbone.handcrafted(k) for k in class_ids],
                                            eta=config.ot_eta, tol=config.ot_tol, max_iter=config.ot_max_iter)
    return total_loss(ce, sp, dis, config.alpha)


def sgd_step(state: PromptState, grads: dict[str, np.ndarray], lr: float) -> PromptState:
    """Plain SGD: every learnable array moves by ``-lr * grad``."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    new = {}
    for name, value in state.arrays().items():
        g = np.asarray(grads.get(name, np.zeros_like(value)), dtype=np.float64)
        if g.shape != value.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {value.shape}")
        with np.errstate(over="ignore", invalid="ignore"):
            new[name] = value - lr * g
    return PromptState(**new)
