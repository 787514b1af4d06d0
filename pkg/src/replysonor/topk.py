"""
Top-N selection over score vectors.

Ranking is by score descending; equal scores rank the lower id first.
"""

from typing import Optional

import numpy as np

from .errors import InvariantViolation


def top_n(scores: np.ndarray, n: int, ids: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Ids of the ``n`` highest scores, best first.

    Args:
        scores: 1-D score vector
        n: Number of ids wanted (capped at ``len(scores)``)
        ids: Id of each score; defaults to the position, so ``scores`` is indexed by id

    Returns:
        int64 array of ids
    """
    if n < 1:
        raise InvariantViolation(f"n must be >= 1, got {n}")
    scores = np.asarray(scores)
    size = scores.shape[0]
    if ids is not None and len(ids) != size:
        raise InvariantViolation(f"{len(ids)} ids for {size} scores")
    n = min(n, size)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if n < size:
        # keep every position tied with the n-th best so the id tie-break stays exact
        threshold = np.partition(scores, size - n)[size - n]
        candidates = np.flatnonzero(scores >= threshold)
    else:
        candidates = np.arange(size)
    keys = candidates if ids is None else np.asarray(ids)[candidates]
    order = np.lexsort((keys, -scores[candidates]))
    return keys[order[:n]].astype(np.int64)
