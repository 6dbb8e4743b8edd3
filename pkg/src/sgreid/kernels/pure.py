"""Pure numpy implementations of the edge-indexed kernels.

These are the reference semantics for the compiled extension in ``_native.pyx``.
Both backends accumulate in the same (edge-index) order, so they agree exactly
on the scatter sums; the softmax paths may differ in the last ulp because numpy
and libm round ``exp`` independently. Within one backend every function is
bit-for-bit deterministic, and the backend in use is recorded by training runs.
All functions take float64 arrays and int64 segment/index vectors.
"""

from __future__ import annotations

import numpy as np


def segment_softmax(logits: np.ndarray, segments: np.ndarray, n_segments: int) -> np.ndarray:
    """Softmax of ``logits`` grouped by ``segments``.

    Entry ``i`` is normalised against every entry with the same segment id.
    Empty segments are allowed (they simply contribute no entries). The
    per-segment max is subtracted before exponentiation for stability.
    """
    logits = np.asarray(logits, dtype=np.float64)
    segments = np.asarray(segments, dtype=np.int64)
    seg_max = np.full(n_segments, -np.inf, dtype=np.float64)
    np.maximum.at(seg_max, segments, logits)
    shifted = np.exp(logits - seg_max[segments])
    seg_sum = np.zeros(n_segments, dtype=np.float64)
    np.add.at(seg_sum, segments, shifted)
    return shifted / seg_sum[segments]


def segment_softmax_backward(
    alpha: np.ndarray, grad_alpha: np.ndarray, segments: np.ndarray, n_segments: int
) -> np.ndarray:
    """Gradient of segment_softmax w.r.t. its logits.

    d logit_i = alpha_i * (g_i - sum_j alpha_j g_j) with the sum taken over
    the segment of i.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    grad_alpha = np.asarray(grad_alpha, dtype=np.float64)
    segments = np.asarray(segments, dtype=np.int64)
    weighted = alpha * grad_alpha
    seg_dot = np.zeros(n_segments, dtype=np.float64)
    np.add.at(seg_dot, segments, weighted)
    return alpha * (grad_alpha - seg_dot[segments])


def scatter_rowsum(rows: np.ndarray, index: np.ndarray, n_out: int) -> np.ndarray:
    """Sum rows of a (E, D) matrix into an (n_out, D) accumulator by index."""
    rows = np.asarray(rows, dtype=np.float64)
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((n_out, rows.shape[1]), dtype=np.float64)
    np.add.at(out, index, rows)
    return out


def scatter_weighted_rowsum(
    rows: np.ndarray, weights: np.ndarray, index: np.ndarray, n_out: int
) -> np.ndarray:
    """Sum ``weights[e] * rows[e]`` into an (n_out, D) accumulator by index."""
    rows = np.asarray(rows, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((n_out, rows.shape[1]), dtype=np.float64)
    np.add.at(out, index, rows * weights[:, None])
    return out
