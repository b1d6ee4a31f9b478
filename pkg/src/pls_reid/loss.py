"""Softmax cross-entropy, batch-hard (MSM) and soften-positive triplet losses.

Triplet losses take a flat ``(n, E)`` embedding array plus one group label per
row; rows sharing a label form an identity group. Every loss returns its value
together with exact gradients w.r.t. its inputs.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from pls_reid.errors import DimensionMismatchError, InvalidParameterError


class Role(enum.Enum):
    LABELED = "labeled"  # the real one-shot anchor
    SUPPORT = "support"  # other known-label members: generated copies or extra shots
    PSEUDO = "pseudo"


@dataclass
class TripletBatch:
    """``B`` identity groups of ``S`` members, stored group-major.

    ``indices[g, s]`` is the dataset index of member ``s`` of group ``g``;
    member 0 is always the real labeled anchor.
    """

    identities: np.ndarray
    indices: np.ndarray
    roles: list[list[Role]]
    repeated: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 2 or self.indices.shape[0] != self.identities.shape[0]:
            raise InvalidParameterError("indices must be (B, S) with one row per identity")
        if len(set(self.identities.tolist())) != self.B:
            raise InvalidParameterError("batch identities must be distinct")
        for row in self.roles:
            if len(row) != self.S or sum(r is Role.LABELED for r in row) != 1:
                raise InvalidParameterError("each group needs S members with exactly one LABELED")

    @property
    def B(self) -> int:
        return self.indices.shape[0]

    @property
    def S(self) -> int:
        return self.indices.shape[1]

    @property
    def flat_indices(self) -> np.ndarray:
        return self.indices.reshape(-1)

    @property
    def labels(self) -> np.ndarray:
        return np.repeat(self.identities, self.S)


@dataclass
class LossValue:
    value: float
    grad_embeddings: np.ndarray | None = None
    grad_logits: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def __add__(self, other: LossValue) -> LossValue:
        def add(a, b):
            if a is None:
                return b
            if b is None:
                return a
            return a + b

        return LossValue(
            self.value + other.value,
            add(self.grad_embeddings, other.grad_embeddings),
            add(self.grad_logits, other.grad_logits),
            {**self.diagnostics, **other.diagnostics},
        )

    def to_json(self) -> dict:
        diag = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.diagnostics.items()}
        return {"value": self.value, **diag}


def softmax_ce(logits, labels) -> LossValue:
    """Mean ``-log softmax(logits)[label]`` over the batch."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise DimensionMismatchError("logits must be a non-empty (n, C) array")
    if y.shape != (z.shape[0],):
        raise DimensionMismatchError("one label per logit row required")
    n, C = z.shape
    if np.any((y < 0) | (y >= C)):
        raise InvalidParameterError(f"labels must lie in [0, {C})")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted[np.arange(n), y] - log_norm
    probs = np.exp(shifted - log_norm[:, None])
    grad = probs
    grad[np.arange(n), y] -= 1.0
    return LossValue(float(-log_p.mean()), grad_logits=grad / n)


def _pairwise(x):
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def _unit(v, norm):
    # subgradient 0 at coincident points
    return v / norm if norm > 0 else np.zeros_like(v)


def _check(embeddings, labels, alpha):
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise DimensionMismatchError("need (n, E) embeddings and n labels")
    if alpha < 0:
        raise InvalidParameterError("alpha must be >= 0")
    if np.unique(y).size < 2:
        raise InvalidParameterError("degenerate batch: at least two identity groups required")
    return x, y


def _triplet(x, y, alpha, positive, clamp, reduction):
    n = x.shape[0]
    dist = _pairwise(x)
    same = y[:, None] == y[None, :]
    # argmin/argmax return the first occurrence: lowest batch index wins ties
    neg_d = np.where(same, np.inf, dist)
    hn_idx = np.argmin(neg_d, axis=1)
    hn = neg_d[np.arange(n), hn_idx]

    grad = np.zeros_like(x)
    pos = np.zeros(n)
    hp_idx = np.full(n, -1)
    if positive == "hardest":
        pos_d = np.where(same, dist, -np.inf)
        hp_idx = np.argmax(pos_d, axis=1)
        pos = pos_d[np.arange(n), hp_idx]
    else:
        means = {}
        for g in np.unique(y):
            means[g] = x[y == g].mean(axis=0)
        for a in range(n):
            pos[a] = np.linalg.norm(x[a] - means[y[a]])

    raw = pos - hn + alpha
    active = raw > 0 if clamp else np.ones(n, dtype=bool)
    terms = np.where(active, raw, 0.0)
    scale = 1.0 / n if reduction == "mean" else 1.0

    for a in np.flatnonzero(active):
        n_i = hn_idx[a]
        u = _unit(x[a] - x[n_i], hn[a])
        grad[a] -= u
        grad[n_i] += u
        if positive == "hardest":
            p_i = hp_idx[a]
            u = _unit(x[a] - x[p_i], pos[a])
            grad[a] += u
            grad[p_i] -= u
        else:
            members = np.flatnonzero(y == y[a])
            u = _unit(x[a] - means[y[a]], pos[a])
            grad[a] += u
            grad[members] -= u / members.size

    diagnostics = {
        "positive": pos,
        "hardest_negative": hn,
        "negative_index": hn_idx,
        "active": int(np.sum(raw > 0)),
    }
    if positive == "hardest":
        diagnostics["positive_index"] = hp_idx
    return LossValue(float(terms.sum() * scale), grad_embeddings=grad * scale, diagnostics=diagnostics)


def msm_loss(embeddings, labels, alpha: float = 0.3, clamp: bool = True, reduction: str = "sum") -> LossValue:
    """Batch-hard triplet loss: farthest same-label member vs nearest other-label member."""
    x, y = _check(embeddings, labels, alpha)
    _check_reduction(reduction)
    return _triplet(x, y, alpha, "hardest", clamp, reduction)


def hsoften_loss(embeddings, labels, alpha: float = 0.3, clamp: bool = True, reduction: str = "sum") -> LossValue:
    """Triplet loss whose positive term is the distance to the group's mean embedding.

    The mean depends on the anchor itself, and that dependence is part of the gradient.
    """
    x, y = _check(embeddings, labels, alpha)
    _check_reduction(reduction)
    return _triplet(x, y, alpha, "mean", clamp, reduction)


def _check_reduction(reduction):
    if reduction not in ("sum", "mean"):
        raise InvalidParameterError(f"reduction must be 'sum' or 'mean', got {reduction!r}")


def overall_loss(
    embeddings,
    group_labels,
    logits,
    class_labels,
    alpha: float = 0.3,
    triplet: str = "hsoften",
    clamp: bool = True,
    reduction: str = "sum",
) -> LossValue:
    """Unweighted sum of softmax cross-entropy and a triplet loss."""
    fn = {"hsoften": hsoften_loss, "msm": msm_loss}.get(triplet)
    if fn is None:
        raise InvalidParameterError(f"unknown triplet loss {triplet!r}")
    ce = softmax_ce(logits, class_labels)
    tri = fn(embeddings, group_labels, alpha, clamp=clamp, reduction=reduction)
    total = ce + tri
    total.diagnostics["softmax"] = ce.value
    total.diagnostics["triplet"] = tri.value
    return total
