"""Scaled dot-product attention with additive masks.

This is the dense reference path. It is written against the tape dispatch
ops, so the same code serves inference (numpy in, numpy out) and training
(Tensor in, Tensor out). The block-sparse evaluation kernel lives in `sga`
and is verified against this implementation.
"""

from __future__ import annotations

import numpy as np

from . import tape as T
from .errors import ShapeError
from .numerics import as_array, score_flops_dense  # noqa: F401  (re-export for cost model users)

NEG_INF = -np.inf


def causal_mask(length: int) -> np.ndarray:
    """Additive mask keeping (r, t) iff t <= r."""
    if length < 1:
        raise ShapeError("mask length must be >= 1")
    mask = np.zeros((length, length), dtype=np.float64)
    mask[np.triu_indices(length, k=1)] = NEG_INF
    return mask


def combine_masks(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Entrywise AND of two additive masks (keep only if kept in both)."""
    a, b = as_array(a), as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return np.minimum(a, b)


def dense_attention(q, k, v, mask):
    """softmax((q @ k^T) / sqrt(d) + mask) @ v.

    Returns (output, weights). Weights are returned because the guiding
    pass harvests them for block-affinity pooling.
    """
    qv, kv, vv = T.value_of(q), T.value_of(k), T.value_of(v)
    if qv.ndim != 2 or kv.ndim != 2 or vv.ndim != 2:
        raise ShapeError("q, k, v must be 2D")
    if qv.shape[1] != kv.shape[1]:
        raise ShapeError(f"q width {qv.shape[1]} != k width {kv.shape[1]}")
    if kv.shape[0] != vv.shape[0]:
        raise ShapeError(f"k rows {kv.shape[0]} != v rows {vv.shape[0]}")
    mask = as_array(mask)
    if mask.shape != (qv.shape[0], kv.shape[0]):
        raise ShapeError(f"mask shape {mask.shape} != {(qv.shape[0], kv.shape[0])}")
    scores = T.scale(T.matmul(q, k, transpose_b=True), 1.0 / np.sqrt(qv.shape[1]))
    weights = T.masked_softmax(scores, mask)
    return T.matmul(weights, v), weights
