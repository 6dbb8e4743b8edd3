"""Training objective: batch-hard triplet + weighted center loss + identity
cross-entropy with label smoothing.

    total = triplet(pre-BN features) + lambda * center(pre-BN features) + id(logits)

Each loss comes in a plain and a ``*_with_grad`` form; the gradient forms are
hand-derived and validated against central finite differences in the tests.
The center table is trained with its own SGD step whose gradient comes from
the *unweighted* center loss (equivalent to rescaling the total-loss gradient
by 1/lambda), so a tiny lambda does not starve center updates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_MARGIN = 0.3
DEFAULT_LAMBDA_CENTER = 0.0005
DEFAULT_SMOOTHING = 0.1
DEFAULT_CENTER_LR = 0.5


class DegenerateBatch(ValueError):
    """A batch that cannot form triplets (singleton label or single class)."""


@dataclass
class LossConfig:
    margin: float = DEFAULT_MARGIN
    lambda_center: float = DEFAULT_LAMBDA_CENTER
    smoothing: float = DEFAULT_SMOOTHING
    num_classes: int = 2

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.lambda_center < 0:
            raise ValueError("lambda_center must be >= 0")
        if not 0 <= self.smoothing < 1:
            raise ValueError("smoothing must be in [0, 1)")


@dataclass
class CenterTable:
    centers: np.ndarray  # (P, D)

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]


def init_center_table(rng: np.random.Generator, num_classes: int, dim: int) -> CenterTable:
    return CenterTable(centers=rng.standard_normal((num_classes, dim)))


def pairwise_euclidean(features: np.ndarray) -> np.ndarray:
    """(B, B) Euclidean distance matrix with an exactly zero diagonal."""
    f = np.asarray(features, dtype=np.float64)
    sq = np.sum(f * f, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (f @ f.T)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(np.maximum(d2, 0.0))


def _hardest_indices(
    dist: np.ndarray, labels: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    b = dist.shape[0]
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(b, dtype=bool)
    neg_mask = ~same
    if not pos_mask.any(axis=1).all():
        raise DegenerateBatch("some label appears only once in the batch")
    if not neg_mask.any(axis=1).all():
        raise DegenerateBatch("batch contains a single class")
    hardest_pos = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)
    hardest_neg = np.argmin(np.where(neg_mask, dist, np.inf), axis=1)
    return hardest_pos, hardest_neg


def triplet_batch_hard(features: np.ndarray, labels: np.ndarray, margin: float) -> float:
    """Mean over anchors of max(0, margin + d(hardest pos) - d(hardest neg))."""
    loss, _ = triplet_batch_hard_with_grad(features, labels, margin)
    return loss


def triplet_batch_hard_with_grad(
    features: np.ndarray, labels: np.ndarray, margin: float
) -> tuple[float, np.ndarray]:
    f = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    b = f.shape[0]
    dist = pairwise_euclidean(f)
    hardest_pos, hardest_neg = _hardest_indices(dist, labels)
    anchor_terms = margin + dist[np.arange(b), hardest_pos] - dist[np.arange(b), hardest_neg]
    active = anchor_terms > 0
    loss = float(np.mean(np.maximum(anchor_terms, 0.0)))

    grad = np.zeros_like(f)
    for i in np.flatnonzero(active):
        p = hardest_pos[i]
        n = hardest_neg[i]
        d_p = dist[i, p]
        d_n = dist[i, n]
        if d_p > 1e-12:
            gp = (f[i] - f[p]) / (d_p * b)
            grad[i] += gp
            grad[p] -= gp
        if d_n > 1e-12:
            gn = (f[i] - f[n]) / (d_n * b)
            grad[i] -= gn
            grad[n] += gn
    return loss, grad


def center_loss(features: np.ndarray, labels: np.ndarray, table: CenterTable) -> float:
    loss, _, _ = center_loss_with_grad(features, labels, table)
    return loss


def center_loss_with_grad(
    features: np.ndarray, labels: np.ndarray, table: CenterTable
) -> tuple[float, np.ndarray, np.ndarray]:
    """Returns (loss, grad wrt features, grad wrt centers).

    loss = sum_i ||f_i - c_{y_i}||^2 / (2B)
    """
    f = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= table.num_classes:
        raise IndexError("label out of range of the center table")
    b = f.shape[0]
    delta = f - table.centers[labels]
    loss = float(np.sum(delta * delta) / (2.0 * b))
    grad_f = delta / b
    grad_c = np.zeros_like(table.centers)
    np.add.at(grad_c, labels, -delta / b)
    return loss, grad_f, grad_c


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))


def smoothed_targets(labels: np.ndarray, num_classes: int, smoothing: float) -> np.ndarray:
    """(B, P) targets: 1 - eps on the true class, eps/(P-1) elsewhere."""
    if num_classes < 2:
        raise ValueError("label smoothing needs at least 2 classes")
    b = labels.shape[0]
    q = np.full((b, num_classes), smoothing / (num_classes - 1))
    q[np.arange(b), labels] = 1.0 - smoothing
    return q


def id_loss(logits: np.ndarray, labels: np.ndarray, smoothing: float) -> float:
    loss, _ = id_loss_with_grad(logits, labels, smoothing)
    return loss


def id_loss_with_grad(
    logits: np.ndarray, labels: np.ndarray, smoothing: float
) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b, p = logits.shape
    q = smoothed_targets(labels, p, smoothing)
    log_probs = _log_softmax(logits)
    loss = float(-np.sum(q * log_probs) / b)
    grad = (np.exp(log_probs) - q) / b
    return loss, grad


def combined_loss(
    triplet: float, center: float, ident: float, lambda_center: float = DEFAULT_LAMBDA_CENTER
) -> float:
    """Exact weighted sum: triplet + lambda * center + id."""
    return triplet + lambda_center * center + ident
