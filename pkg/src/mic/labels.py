"""Label bookkeeping shared by the sampler and the summaries."""

from __future__ import annotations

import itertools
import logging
from functools import lru_cache

import numpy as np
from scipy.optimize import linear_sum_assignment

logger = logging.getLogger(__name__)

PERMUTATION_CAP = 8


def one_hot(labels, K):
    labels = np.asarray(labels)
    return (labels[..., None] == np.arange(K)).astype(np.float64)


@lru_cache(maxsize=None)
def permutations(K: int) -> np.ndarray:
    """All K! permutations as rows, identity first."""
    return np.array(list(itertools.permutations(range(K))), dtype=np.int64)


def agreement_matrix(labels, anchor, K):
    """``M[..., a, b] = #{j : labels_j = a, anchor_j = b}``.

    Equals ``Z(labels)' Z(anchor)`` for one-hot membership matrices ``Z``, so
    the agreement of ``perm[labels]`` with ``anchor`` is
    ``trace(Z(anchor)' Z(perm[labels]))``.
    """
    return np.einsum("...pk,...pl->...kl", one_hot(labels, K), one_hot(anchor, K))


def best_permutations(labels, anchor, K, cap: int = PERMUTATION_CAP) -> np.ndarray:
    """Permutation(s) ``perm`` maximizing agreement of ``perm[labels]`` with ``anchor``.

    Works on a batch: ``labels`` and ``anchor`` of shape ``(..., p)`` return
    ``(..., K)``.  Exhaustive over K! up to ``cap`` (ties go to the first
    permutation in lexicographic order, so the identity wins ties); above
    ``cap`` an assignment-problem solver is used.
    """
    labels, anchor = np.asarray(labels), np.asarray(anchor)
    M = agreement_matrix(labels, anchor, K)
    batch = M.shape[:-2]
    M = M.reshape(-1, K, K)
    if K <= cap:
        P = permutations(K)
        score = M[:, np.arange(K), P].sum(axis=-1)         # (B, K!)
        out = P[np.argmax(score, axis=1)]
    else:
        logger.warning("K=%d above exhaustive permutation cap %d; using assignment solver", K, cap)
        out = np.empty((M.shape[0], K), dtype=np.int64)
        for b in range(M.shape[0]):
            rows, cols = linear_sum_assignment(M[b], maximize=True)
            out[b, rows] = cols
    return out.reshape(batch + (K,))


def apply_permutation(labels, perm):
    """``perm[labels]`` along the last axis, batched over leading axes of ``perm``."""
    labels, perm = np.asarray(labels), np.asarray(perm)
    if perm.ndim == 1:
        return perm[labels]
    return np.take_along_axis(perm, labels, axis=-1)


def mode_labels(labels, K, axis=0):
    """Most frequent label along ``axis``; ties go to the smallest label."""
    counts = one_hot(labels, K).sum(axis=axis)
    return np.argmax(counts, axis=-1)
