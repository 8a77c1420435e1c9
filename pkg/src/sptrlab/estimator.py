"""scikit-learn style prompt-tuning classifier."""
from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import autograd as ag
from .adversary import AttackConfig, pgd_attack
from .encoders import Backbone, PromptLeaves, PromptState, encode_image, encode_text
from .exceptions import NonFiniteError, NonFiniteLossError
from .metrics import accuracy, argmax_accuracy
from .objective import LossConfig, sgd_step, similarity_logits, sptr_objective

_STREAM_BATCH = 21


class SPTRClassifier(ClassifierMixin, BaseEstimator):
    """Tunes textual context and deep prompts of a frozen dual encoder.

    ``fit`` learns prompts on the classes present in ``y``. Any class id can
    be scored afterwards: unseen classes reuse the learned context with
    their own class embedding, which is how base-to-novel transfer is
    measured.

    Parameters
    ----------
    seed : int
        Seed of the frozen backbone (weights, class embeddings, templates).
    n_layers, d_emb, d_hidden, d_feat : int
        Backbone sizes. The input width is taken from ``X``.
    n_templates : int
        Number N of hand-crafted templates.
    alignment, pixel_scale : float
        Backbone modality gap and pixel map scale, see :class:`Backbone`.
    prompt_length, prompt_depth : int
        Rows of the learnable context; number of prompted layers.
    alpha, tau : float
        OT weight and softmax temperature.
    lr, epochs, batch_size :
        Plain SGD settings; ``batch_size=None`` uses the whole training set.
    ot_enabled, sp_enabled : bool
        Ablation switches for the OT regularizer and the similarity term.
    ot_eta, ot_tol, ot_max_iter :
        Sinkhorn settings.
    epsilon, attack_step, attack_steps, attack_norm :
        PGD radius, step (None means epsilon), iterations, and norm order
        (``"inf"`` or a number > 1).
    attack_target : {"hand", "tuned"}
        Which text classifier the attack ascends against.
    kl_direction : {"natural", "adversarial"}
        Reference distribution of the similarity KL.
    random_state : int
        Seed for minibatch order.
    """

    def __init__(self, seed=0, n_layers=12, d_emb=16, d_hidden=32, d_feat=32, n_templates=60,
                 alignment=0.92, pixel_scale=0.25, prompt_length=4, prompt_depth=9,
                 alpha=0.3, tau=0.01, lr=0.0025, epochs=50, batch_size=None,
                 ot_enabled=True, sp_enabled=True, ot_eta=0.05, ot_tol=1e-6, ot_max_iter=200,
                 epsilon=1.0 / 255.0, attack_step=None, attack_steps=2, attack_norm="inf",
                 attack_target="hand", kl_direction="natural", random_state=0):
        self.seed = seed
        self.n_layers = n_layers
        self.d_emb = d_emb
        self.d_hidden = d_hidden
        self.d_feat = d_feat
        self.n_templates = n_templates
        self.alignment = alignment
        self.pixel_scale = pixel_scale
        self.prompt_length = prompt_length
        self.prompt_depth = prompt_depth
        self.alpha = alpha
        self.tau = tau
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.ot_enabled = ot_enabled
        self.sp_enabled = sp_enabled
        self.ot_eta = ot_eta
        self.ot_tol = ot_tol
        self.ot_max_iter = ot_max_iter
        self.epsilon = epsilon
        self.attack_step = attack_step
        self.attack_steps = attack_steps
        self.attack_norm = attack_norm
        self.attack_target = attack_target
        self.kl_direction = kl_direction
        self.random_state = random_state

    # -- construction helpers -------------------------------------------------

    def make_backbone(self, d_in: int) -> Backbone:
        return Backbone(seed=self.seed, n_layers=self.n_layers, d_emb=self.d_emb,
                        d_hidden=self.d_hidden, d_feat=self.d_feat, d_in=d_in,
                        prompt_length=self.prompt_length, n_templates=self.n_templates,
                        alignment=self.alignment, pixel_scale=self.pixel_scale)

    def attack_config(self) -> AttackConfig:
        p = math.inf if str(self.attack_norm).lower() in ("inf", "infinity") else float(self.attack_norm)
        return AttackConfig(epsilon=self.epsilon, step_size=self.attack_step, steps=self.attack_steps, p=p)

    def loss_config(self) -> LossConfig:
        return LossConfig(alpha=self.alpha, tau=self.tau, ot_enabled=self.ot_enabled,
                          sp_enabled=self.sp_enabled, kl_direction=self.kl_direction,
                          ot_eta=self.ot_eta, ot_tol=self.ot_tol, ot_max_iter=self.ot_max_iter)

    def _validate_params(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.attack_target not in ("hand", "tuned"):
            raise ValueError(f"attack_target must be 'hand' or 'tuned', got {self.attack_target!r}")
        if self.kl_direction not in ("natural", "adversarial"):
            raise ValueError(f"kl_direction must be 'natural' or 'adversarial', got {self.kl_direction!r}")

    # -- training ---------------------------------------------------------------

    def _adversarial(self, state: PromptState, X, y_local, classes):
        if self.attack_target == "hand":
            clf = self.backbone_.hand_classifier(classes)
        else:
            clf = self.text_features(classes, state)
        return pgd_attack(X, y_local, self._attack, clf, self.tau, self.backbone_.image, state.visual_deep)

    def _loss(self, state: PromptState, X, y_local, classes, epoch):
        leaves = PromptLeaves.from_state(state)
        self.touched_classes_.update(int(k) for k in classes)
        try:
            x_adv = self._adversarial(state, X, y_local, classes) if self.sp_enabled else None
        except NonFiniteError as exc:
            raise NonFiniteLossError(epoch, "sp") from exc
        try:
            total, parts = sptr_objective(leaves, self.backbone_, X, y_local, classes, x_adv, self._loss_cfg)
        except NonFiniteError as exc:
            raise NonFiniteLossError(epoch, str(exc).split(" ")[0]) from exc
        return leaves, total, parts

    def fit(self, X, y):
        """Tune prompts on ``(X, y)``; records per-epoch losses in ``history_``."""
        self._validate_params()
        X, y = check_X_y(X, y, dtype=np.float64)
        if X.min() < 0.0 or X.max() > 1.0:
            raise ValueError("inputs must lie in [0, 1]")
        self.classes_ = np.unique(y)
        self.n_features_in_ = X.shape[1]
        self.backbone_ = self.make_backbone(X.shape[1])
        self._attack = self.attack_config()
        self._loss_cfg = self.loss_config()
        self.touched_classes_ = set()
        y_local = np.searchsorted(self.classes_, y)
        classes = [int(k) for k in self.classes_]

        state = self.backbone_.init_prompts(self.prompt_depth)
        rng = np.random.default_rng(np.random.SeedSequence([int(self.random_state), _STREAM_BATCH]))
        n = X.shape[0]
        bs = n if self.batch_size is None else int(self.batch_size)
        self.history_ = []
        for epoch in range(1, self.epochs + 1):
            order = rng.permutation(n) if bs < n else np.arange(n)
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                leaves, total, _ = self._loss(state, X[idx], y_local[idx], classes, epoch)
                ag.backward(total)
                try:
                    state = sgd_step(state, leaves.grads(), self.lr)
                except NonFiniteError as exc:
                    raise NonFiniteLossError(epoch, "total") from exc
            _, _, parts = self._loss(state, X, y_local, classes, epoch)
            self.prompts_ = state
            train_acc = accuracy(y, self.predict(X))
            self.history_.append({"epoch": epoch, **parts.as_dict(), "train_acc": train_acc})
        self.prompts_ = state
        return self

    # -- inference --------------------------------------------------------------

    def text_features(self, classes, prompts: PromptState | None = None) -> np.ndarray:
        """Tuned text feature of each class id, shape (K, d_feat)."""
        p = self.prompts_ if prompts is None else prompts
        emb = self.backbone_.class_embeddings(classes)
        return encode_text(p.context, emb, p.text_deep, self.backbone_.text).value

    def image_features(self, X) -> np.ndarray:
        check_is_fitted(self, "prompts_")
        X = check_array(X, dtype=np.float64)
        return encode_image(X, self.prompts_.visual_deep, self.backbone_.image).value

    def decision_function(self, X, classes=None) -> np.ndarray:
        """Temperature-scaled cosine logits against ``classes`` (default: fitted classes)."""
        check_is_fitted(self, "prompts_")
        classes = self.classes_ if classes is None else np.asarray(classes)
        return similarity_logits(self.text_features(classes), self.image_features(X), self.tau).value

    def predict_proba(self, X, classes=None) -> np.ndarray:
        return ag.softmax(self.decision_function(X, classes)).value

    def predict(self, X, classes=None) -> np.ndarray:
        classes = self.classes_ if classes is None else np.asarray(classes)
        return np.asarray(classes)[np.argmax(self.decision_function(X, classes), axis=1)]

    def score(self, X, y, classes=None, sample_weight=None) -> float:
        """Accuracy over ``classes`` (default: the fitted classes)."""
        if sample_weight is not None:
            raise NotImplementedError("sample weights are not supported")
        return accuracy(y, self.predict(X, classes))


def evaluate(prompts: PromptState, backbone: Backbone, classes, X, y) -> float:
    """Accuracy of tuned prompts on ``(X, y)`` with ``classes`` as the label set.

    Classes never seen in training are scored with the learned context and
    their own class embedding.
    """
    classes = np.asarray(classes)
    y = np.asarray(y)
    if y.size == 0:
        raise ValueError("empty evaluation set")
    if not np.all(np.isin(y, classes)):
        raise ValueError("evaluation labels outside the class set")
    text = encode_text(prompts.context, backbone.class_embeddings(classes), prompts.text_deep, backbone.text)
    image = encode_image(np.asarray(X, dtype=np.float64), prompts.visual_deep, backbone.image)
    return argmax_accuracy(text.value, image.value, _local_labels(classes, y))


def _local_labels(classes, y) -> np.ndarray:
    lookup = {int(k): i for i, k in enumerate(classes)}
    return np.array([lookup[int(v)] for v in y])
