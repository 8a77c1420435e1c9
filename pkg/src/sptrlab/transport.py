"""Entropic optimal transport between tuned and hand-crafted text features."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .encoders import Backbone, PromptLeaves, PromptState, encode_text
from .exceptions import ShapeError


@dataclass
class TransportPlan:
    plan: np.ndarray
    converged: bool
    n_iter: int
    marginal_error: float


def uniform_marginals(m: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.full(m, 1.0 / m), np.full(n, 1.0 / n)


def cost_matrix(tun_set, hand_set) -> ag.Node:
    """``1 - <t_i, h_j>`` for unit features; differentiable in ``tun_set``.

    ``tun_set`` is (M, d) and ``hand_set`` is a constant (N, d).
    """
    tun_set = ag.as_node(tun_set)
    hand_set = np.asarray(hand_set, dtype=np.float64)
    if tun_set.value.ndim != 2 or hand_set.ndim != 2:
        raise ShapeError("cost_matrix expects (M, d) and (N, d) feature sets")
    if tun_set.shape[0] == 0 or hand_set.shape[0] == 0:
        raise ShapeError("cost_matrix: empty feature set")
    return ag.add_scalar(ag.scale(ag.affine(tun_set, hand_set), -1.0), 1.0)


def _lse(z: np.ndarray, axis: int) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def sinkhorn(cost, a=None, b=None, eta: float = 0.05, tol: float = 1e-6, max_iter: int = 200,
             anneal: bool = True) -> TransportPlan:
    """Log-domain Sinkhorn iterations for ``min <T, C> - eta * H(T)``.

    Each sweep updates the column potential last, so column sums are exact
    and ``marginal_error`` is the l1 violation of the row sums. A result that
    hits ``max_iter`` first is returned with ``converged=False``.

    With ``anneal`` the potentials are warm-started by solving a short
    sequence of larger regularizations (halving down to ``eta``) first;
    this changes only the starting point, not the fixed point, and makes
    small ``eta`` tractable. ``max_iter`` bounds the final stage.
    """
    C = np.asarray(cost.value if isinstance(cost, ag.Node) else cost, dtype=np.float64)
    if C.ndim != 2:
        raise ShapeError(f"sinkhorn: cost must be 2-D, got shape {C.shape}")
    if eta <= 0 or tol <= 0:
        raise ValueError("sinkhorn: eta and tol must be positive")
    m, n = C.shape
    ua, ub = uniform_marginals(m, n)
    a = ua if a is None else np.asarray(a, dtype=np.float64)
    b = ub if b is None else np.asarray(b, dtype=np.float64)
    if a.shape != (m,) or b.shape != (n,):
        raise ShapeError("sinkhorn: marginal lengths do not match the cost matrix")
    log_a, log_b = np.log(a), np.log(b)
    f = np.zeros(m)
    g = np.zeros(n)

    def sweeps(e, limit, stop):
        nonlocal f, g
        err, it = math.inf, 0
        while it < limit:
            it += 1
            f = e * (log_a - _lse((g[None, :] - C) / e, axis=1))
            g = e * (log_b - _lse((f[:, None] - C) / e, axis=0))
            plan = np.exp((f[:, None] + g[None, :] - C) / e)
            err = float(np.abs(plan.sum(axis=1) - a).sum())
            if err < stop:
                break
        return plan, err, it

    if anneal:
        spread = float(C.max() - C.min())
        e = spread
        while e > 2 * eta:
            sweeps(e, 100, tol)
            e /= 2
    plan, err, it = sweeps(eta, max_iter, tol)
    return TransportPlan(plan, err < tol, it, err)


def ot_distance(cost, plan) -> ag.Node:
    """``sum_ij T_ij C_ij`` with the plan held constant."""
    plan = plan.plan if isinstance(plan, TransportPlan) else plan
    return ag.weighted_sum(cost, plan)


def exact_ot_bruteforce(cost) -> float:
    """Exact uniform-marginal OT cost of a square matrix by enumerating permutations.

    With uniform marginals the optimum sits at a permutation matrix scaled
    by 1/N, so this is an independent oracle for the Sinkhorn value.
    """
    C = np.asarray(cost, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ShapeError(f"exact_ot_bruteforce needs a square matrix, got {C.shape}")
    n = C.shape[0]
    if n > 6:
        raise ValueError("exact_ot_bruteforce is limited to N <= 6")
    rows = np.arange(n)
    best = min(C[rows, list(p)].sum() for p in itertools.permutations(range(n)))
    return float(best) / n


def textual_regularizer(prompts: PromptState | PromptLeaves, class_ids, backbone: Backbone,
                        eta: float = 0.05, tol: float = 1e-6, max_iter: int = 200) -> ag.Node:
    """Mean over classes of the OT distance from the tuned feature to the N hand features.

    Pass :class:`PromptLeaves` to get gradients w.r.t. the context and the
    textual deep prompts; a plain :class:`PromptState` gives a constant.
    """
    class_ids = list(class_ids)
    if not class_ids:
        raise ShapeError("textual_regularizer: empty class set")
    tuned = encode_text(prompts.context, backbone.class_embeddings(class_ids), prompts.text_deep, backbone.text)
    return regularizer_from_features(tuned, [backbone.handcrafted(k) for k in class_ids],
                                     eta=eta, tol=tol, max_iter=max_iter)


def regularizer_from_features(tuned, hand_sets, eta=0.05, tol=1e-6, max_iter=200) -> ag.Node:
    """OT regularizer for already-encoded tuned features (K, d_feat), one per class."""
    tuned = ag.as_node(tuned)
    terms = []
    for i, hand in enumerate(hand_sets):
        cost = cost_matrix(ag.take_rows(tuned, [i]), hand)
        plan = sinkhorn(cost, eta=eta, tol=tol, max_iter=max_iter)
        terms.append(ot_distance(cost, plan))
    return ag.mean(ag.stack(terms))
