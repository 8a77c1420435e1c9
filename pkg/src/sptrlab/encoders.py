"""Frozen stand-in text/image encoders with additive prompt injection.

Both encoders are stacks of seeded affine+tanh layers followed by a linear
projection and l2 normalization. The image encoder's first layer inverts the
pixel map used to place class centres, and its trunk is a blend of the text
trunk with independent weights, so the pair behaves like a pretrained
dual encoder whose alignment is good but not perfect.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .exceptions import DegenerateError, NonFiniteError, ShapeError

# fixed stream ids so every component draws from an independent, reproducible stream
_STREAM_TEXT = 1
_STREAM_IMAGE = 2
_STREAM_CLASS = 3
_STREAM_BANK = 4
_STREAM_PIXEL = 5


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    n = max(rows, cols)
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q = q * np.sign(np.diag(r))
    return q[:rows, :cols]


@dataclass(frozen=True, eq=False)
class EncoderWeights:
    """Frozen layer parameters for one modality."""

    modality: str
    weights: tuple
    biases: tuple
    projection: np.ndarray

    def __post_init__(self):
        for a in (*self.weights, *self.biases, self.projection):
            a.setflags(write=False)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def d_hidden(self) -> int:
        return self.weights[0].shape[0]

    @property
    def d_feat(self) -> int:
        return self.projection.shape[0]


@dataclass
class PromptState:
    """Learnable prompt parameters.

    ``context`` is the (length, d_emb) textual context; ``text_deep`` and
    ``visual_deep`` hold one (d_hidden,) vector per prompted layer.
    """

    context: np.ndarray
    text_deep: np.ndarray
    visual_deep: np.ndarray

    def __post_init__(self):
        self.context = np.array(self.context, dtype=np.float64)
        self.text_deep = np.array(self.text_deep, dtype=np.float64)
        self.visual_deep = np.array(self.visual_deep, dtype=np.float64)
        if self.context.ndim != 2 or self.context.shape[0] < 1:
            raise ShapeError(f"context must be (length >= 1, d_emb), got {self.context.shape}")
        if self.text_deep.ndim != 2 or self.text_deep.shape != self.visual_deep.shape:
            raise ShapeError("text and visual deep prompts must be (depth, d_hidden) arrays of equal shape")
        for name in ("context", "text_deep", "visual_deep"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFiniteError(f"{name} contains non-finite entries")

    @property
    def depth(self) -> int:
        return self.text_deep.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"context": self.context, "text_deep": self.text_deep, "visual_deep": self.visual_deep}

    def copy(self) -> "PromptState":
        return PromptState(self.context.copy(), self.text_deep.copy(), self.visual_deep.copy())


class PromptLeaves(NamedTuple):
    """Graph leaves for one forward pass over a :class:`PromptState`."""

    context: ag.Node
    text_deep: ag.Node
    visual_deep: ag.Node

    @classmethod
    def from_state(cls, state: PromptState) -> "PromptLeaves":
        return cls(ag.leaf(state.context), ag.leaf(state.text_deep), ag.leaf(state.visual_deep))

    def grads(self) -> dict[str, np.ndarray]:
        return {name: node.grad.copy() for name, node in zip(self._fields, self)}


@dataclass(eq=False)
class Backbone:
    """Everything frozen: encoders, class embeddings, template bank, pixel map.

    Parameters
    ----------
    seed : int
        Master seed; identical seeds give bit-identical weights in any process.
    n_layers, d_emb, d_hidden, d_feat, d_in : int
        Architecture sizes.
    prompt_length : int
        Rows per template context (matches the learnable context length).
    n_templates : int
        Size N of the hand-crafted template bank.
    alignment : float
        In [0, 1]; weight of the shared trunk inside the image encoder.
        1 gives an image trunk identical to the text trunk.
    pixel_scale : float
        Standard deviation of the pixel map entries.
    """

    seed: int = 0
    n_layers: int = 12
    d_emb: int = 16
    d_hidden: int = 32
    d_feat: int = 32
    d_in: int = 64
    prompt_length: int = 4
    n_templates: int = 60
    alignment: float = 0.92
    pixel_scale: float = 0.25
    text: EncoderWeights = field(init=False)
    image: EncoderWeights = field(init=False)
    pixel_map: np.ndarray = field(init=False)
    bank: np.ndarray = field(init=False)

    def __post_init__(self):
        if min(self.n_layers, self.d_emb, self.d_hidden, self.d_feat, self.d_in) < 1:
            raise ValueError("encoder sizes must be positive")
        if self.prompt_length < 1 or self.n_templates < 1:
            raise ValueError("prompt_length and n_templates must be >= 1")
        if not 0.0 <= self.alignment <= 1.0:
            raise ValueError("alignment must lie in [0, 1]")
        rng = _rng(self.seed, _STREAM_TEXT)
        t_w = [_orthogonal(rng, self.d_hidden, self.d_emb) * np.sqrt(self.d_hidden / self.d_emb)]
        t_w += [_orthogonal(rng, self.d_hidden, self.d_hidden) for _ in range(self.n_layers - 1)]
        t_b = [0.05 * rng.standard_normal(self.d_hidden) for _ in range(self.n_layers)]
        proj = _orthogonal(rng, self.d_feat, self.d_hidden)

        pix = _rng(self.seed, _STREAM_PIXEL)
        self.pixel_map = self.pixel_scale * pix.standard_normal((self.d_in, self.d_emb))
        self.pixel_map.setflags(write=False)
        # image inputs are mapped back to embedding space, then through the blended trunk
        unmix = np.linalg.pinv(self.pixel_map)

        rng = _rng(self.seed, _STREAM_IMAGE)
        a = self.alignment
        c = np.sqrt(1.0 - a * a)
        i_w, i_b = [], []
        for layer, (w, b) in enumerate(zip(t_w, t_b)):
            w_ind = _orthogonal(rng, *w.shape) * (np.sqrt(self.d_hidden / self.d_emb) if layer == 0 else 1.0)
            w_img = a * w + c * w_ind
            b_img = a * b + c * 0.05 * rng.standard_normal(self.d_hidden)
            if layer == 0:
                w_in = w_img @ unmix
                b_img = b_img - w_in @ np.full(self.d_in, 0.5)
                w_img = w_in
            i_w.append(w_img)
            i_b.append(b_img)
        i_proj = a * proj + c * _orthogonal(rng, self.d_feat, self.d_hidden)

        self.text = EncoderWeights("text", tuple(t_w), tuple(t_b), proj)
        self.image = EncoderWeights("image", tuple(i_w), tuple(i_b), i_proj)
        self.bank = template_bank(self.seed, self.n_templates, self.prompt_length, self.d_emb)
        self._hand_cache: dict[int, np.ndarray] = {}

    def class_embedding(self, class_id: int) -> np.ndarray:
        return class_embedding(self.seed, class_id, self.d_emb)

    def class_embeddings(self, class_ids) -> np.ndarray:
        return np.stack([self.class_embedding(k) for k in class_ids])

    def class_center(self, class_ids) -> np.ndarray:
        """Pixel-space centre of each class, clipped to [0, 1]."""
        return np.clip(0.5 + self.class_embeddings(class_ids) @ self.pixel_map.T, 0.0, 1.0)

    def handcrafted(self, class_id: int) -> np.ndarray:
        """The N hand-crafted features of one class, shape (N, d_feat); cached."""
        class_id = int(class_id)
        if class_id not in self._hand_cache:
            feats = handcrafted_features(self.bank, self.class_embedding(class_id), self.text)
            feats.setflags(write=False)
            self._hand_cache[class_id] = feats
        return self._hand_cache[class_id]

    def hand_classifier(self, class_ids) -> np.ndarray:
        """Compressed hand-crafted feature per class, shape (K, d_feat)."""
        return np.stack([compress_handcrafted(self.handcrafted(k)) for k in class_ids])

    def init_prompts(self, depth: int) -> PromptState:
        """Context starts at the first template; deep prompts start at zero."""
        if not 1 <= depth <= self.n_layers:
            raise ValueError(f"prompt depth must be in [1, {self.n_layers}], got {depth}")
        zeros = np.zeros((depth, self.d_hidden))
        return PromptState(self.bank[0].copy(), zeros, zeros.copy())


def class_embedding(seed: int, class_id: int, d_emb: int) -> np.ndarray:
    v = _rng(seed, _STREAM_CLASS, class_id).standard_normal(d_emb) / np.sqrt(d_emb)
    v.setflags(write=False)
    return v


def template_bank(seed: int, n_templates: int, length: int, d_emb: int) -> np.ndarray:
    """N seeded template contexts, shape (N, length, d_emb).

    Template j depends only on (seed, j), so a smaller bank is a prefix of a
    larger one.
    """
    bank = np.stack([
        _rng(seed, _STREAM_BANK, j).standard_normal((length, d_emb)) / np.sqrt(d_emb)
        for j in range(n_templates)
    ])
    bank.setflags(write=False)
    return bank


def _trunk(h, deep, weights: EncoderWeights) -> ag.Node:
    depth = 0 if deep is None else ag.as_node(deep).shape[0]
    if depth > weights.n_layers:
        raise ShapeError(f"prompt depth {depth} exceeds encoder depth {weights.n_layers}")
    for layer, (w, b) in enumerate(zip(weights.weights, weights.biases)):
        bias = ag.add(b, ag.take_rows(deep, layer)) if layer < depth else b
        h = ag.tanh(ag.affine(h, w, bias))
    return ag.l2_normalize(ag.affine(h, weights.projection))


def encode_text(context, class_emb, deep_prompts, weights: EncoderWeights) -> ag.Node:
    """Feature of the prompt ``[context rows; class token]``.

    ``class_emb`` may be one (d_emb,) embedding or a (K, d_emb) stack, giving
    a (d_feat,) or (K, d_feat) output respectively.
    """
    context = ag.as_node(context)
    class_emb = ag.as_node(class_emb)
    if context.value.ndim != 2:
        raise ShapeError(f"context must be 2-D, got shape {context.shape}")
    if context.shape[1] != weights.d_in or class_emb.shape[-1] != weights.d_in:
        raise ShapeError(
            f"width mismatch: context {context.shape}, class embedding {class_emb.shape}, "
            f"encoder expects {weights.d_in}"
        )
    length = context.shape[0]
    # mean over the length+1 token rows, written so a class stack pools in one op
    pooled = ag.add(ag.scale(ag.mean(context, axis=0), length / (length + 1)),
                    ag.scale(class_emb, 1.0 / (length + 1)))
    return _trunk(pooled, deep_prompts, weights)


def encode_image(x, visual_deep_prompts, weights: EncoderWeights) -> ag.Node:
    """Feature of one image (d_in,) or a batch (B, d_in)."""
    x = ag.as_node(x)
    if x.shape[-1] != weights.d_in:
        raise ShapeError(f"image width {x.shape[-1]} does not match encoder input {weights.d_in}")
    return _trunk(x, visual_deep_prompts, weights)


def handcrafted_features(bank: np.ndarray, class_emb: np.ndarray, weights: EncoderWeights) -> np.ndarray:
    """Features of every template in ``bank`` completed with one class token."""
    return np.stack([encode_text(t, class_emb, None, weights).value for t in bank])


def compress_handcrafted(features) -> np.ndarray:
    """Normalized mean of a set of unit features."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ShapeError("compress_handcrafted needs a non-empty (N, d) array")
    m = features.mean(axis=0)
    norm = np.linalg.norm(m)
    if norm < 1e-12:
        raise DegenerateError("hand-crafted features average to the zero vector")
    return m / norm
