"""Sign-random-projection LSH baseline for the speed/recall benchmark."""

import logging
from typing import List, Tuple

import numpy as np

from .errors import InvariantViolation
from .hq_index import exact_scores
from .topk import top_n

logger = logging.getLogger(__name__)


class SignProjectionLSH:
    """
    Hamming-ranked sign projections.

    Each vector is hashed to ``bits`` signs of random Gaussian projections;
    a query keeps the ``retrieve_m`` vectors agreeing on the most signs and
    reranks them with exact dot products.
    """

    def __init__(self, vectors: np.ndarray, bits: int = 64, seed: int = 0):
        if bits < 1:
            raise InvariantViolation("bits must be >= 1")
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        rng = np.random.default_rng(seed)
        self.planes = rng.standard_normal((self.vectors.shape[1], bits)).astype(np.float32)
        self.signs = np.where(self.vectors @ self.planes >= 0, 1.0, -1.0).astype(np.float32)
        self._zero_bias = np.zeros(len(self.vectors), dtype=np.float32)

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def search(self, h_x: np.ndarray, n: int, retrieve_m: int) -> List[Tuple[int, float]]:
        if retrieve_m < n:
            raise InvariantViolation(f"retrieve_m ({retrieve_m}) must be >= N ({n})")
        query_signs = np.where(np.asarray(h_x, dtype=np.float32) @ self.planes >= 0, 1.0, -1.0)
        agreement = self.signs @ query_signs.astype(np.float32)
        ids = np.sort(top_n(agreement, retrieve_m))
        exact = exact_scores(self.vectors, ids, np.asarray(h_x), self._zero_bias)
        return [(int(ids[j]), float(exact[j])) for j in top_n(exact, n)]
