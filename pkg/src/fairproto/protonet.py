"""Prototype construction, nearest-prototype classification, and the two
training losses (episodic cross-entropy and pairwise binary cross-entropy).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError, ValidationError
from .head import HeadParams

BCE_EPS = 1e-7


@dataclass
class PrototypeSet:
    """Per-class mean embeddings, rows ordered by ascending class id."""

    class_ids: list[int]
    prototypes: np.ndarray  # (k, embedding dim)


@dataclass
class VerificationPair:
    """One labeled embedding pair: y is 0 for same class, 1 for different;
    y_hat is the predicted dissimilarity in (0, 1)."""

    a: np.ndarray
    b: np.ndarray
    y: int
    y_hat: float


def verification_pairs(queries: np.ndarray, query_classes, supports: np.ndarray,
                       support_classes, params: HeadParams) -> list[VerificationPair]:
    """All query-support pairs with their dissimilarity scores."""
    pairs = []
    for zq, cq in zip(np.atleast_2d(queries), query_classes):
        for zs, cs in zip(np.atleast_2d(supports), support_classes):
            d = euclidean_distance(zq, zs)
            pairs.append(VerificationPair(zq, zs, int(cq != cs),
                                          verification_score(d, params)))
    return pairs


def compute_prototypes(support_embeddings: dict[int, np.ndarray]) -> PrototypeSet:
    """Mean of each class's embedded support vectors."""
    if not support_embeddings:
        raise ValidationError("no support classes given")
    class_ids = sorted(support_embeddings)
    rows = []
    for cid in class_ids:
        z = np.atleast_2d(np.asarray(support_embeddings[cid], dtype=np.float64))
        if z.shape[0] < 1:
            raise ValidationError(f"class {cid} has an empty support group")
        rows.append(z.mean(axis=0))
    return PrototypeSet(class_ids, np.stack(rows))


def euclidean_distance(q, p) -> float:
    """Straight-line distance sqrt(sum_i (q_i - p_i)^2)."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if q.shape != p.shape:
        raise ShapeError(f"dimension mismatch: {q.shape} vs {p.shape}")
    return float(np.sqrt(np.sum((q - p) ** 2)))


def _sq_dists(queries: np.ndarray, protos: np.ndarray) -> np.ndarray:
    diff = queries[:, None, :] - protos[None, :, :]
    return np.sum(diff * diff, axis=2)


def classify(query, protos: PrototypeSet) -> int:
    """Class id of the nearest prototype; ties go to the lowest class id."""
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    if q.shape[1] != protos.prototypes.shape[1]:
        raise ShapeError(f"query dim {q.shape[1]} vs prototype dim "
                         f"{protos.prototypes.shape[1]}")
    # argmin returns the first minimum; rows are in ascending class id order,
    # so exact ties resolve to the lowest id.
    idx = int(np.argmin(_sq_dists(q, protos.prototypes)[0]))
    return protos.class_ids[idx]


def episode_logits(queries, protos: PrototypeSet) -> np.ndarray:
    """Logit matrix with entries -d(q, p_c)^2; row argmax agrees with classify."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q.shape[1] != protos.prototypes.shape[1]:
        raise ShapeError(f"query dim {q.shape[1]} vs prototype dim "
                         f"{protos.prototypes.shape[1]}")
    return -_sq_dists(q, protos.prototypes)


def cross_entropy(logits, labels):
    """Mean negative log softmax probability of the labeled class.

    Uses max-subtraction for stability. Returns (loss, gradient wrt logits);
    the gradient is (softmax - onehot) / batch.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.intp).ravel()
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValidationError("label outside class range")

    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(denom)
    loss = float(-log_probs[np.arange(n), labels].mean())
    grad = exp / denom
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad


def verification_score(d: float, params: HeadParams) -> float:
    """Map a distance to a dissimilarity score in (0, 1) via a learnable
    logistic: sigma(w_v * d + b_v). Increasing in d when w_v > 0."""
    if d < 0:
        raise ValidationError(f"distance must be >= 0, got {d}")
    t = float(params.w_v) * d + float(params.b_v)
    return float(_sigmoid(np.asarray(t)))


def _sigmoid(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t, dtype=np.float64)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def bce_loss(y_hat: float, y: int):
    """Binary cross-entropy -(y log yh + (1-y) log(1-yh)) with yh clamped to
    [1e-7, 1 - 1e-7]. Returns (loss, gradient wrt y_hat at the clamped value)."""
    if y not in (0, 1):
        raise ValidationError(f"label must be 0 or 1, got {y}")
    yh = min(max(float(y_hat), BCE_EPS), 1.0 - BCE_EPS)
    loss = -(y * np.log(yh) + (1 - y) * np.log(1.0 - yh))
    grad = -(y / yh) + (1 - y) / (1.0 - yh)
    return float(loss), float(grad)
