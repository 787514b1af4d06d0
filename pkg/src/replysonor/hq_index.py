"""
Hierarchical quantization for maximum inner product search.

A response vector h is approximated as ``HQ(h) = C_VQ[v] + R^T concat_k C_PQ[k][p_k]``:
a coarse vector-quantization center plus the product-quantized residual in a
learned rotated space. Queries are scored against the codes through lookup
tables (asymmetric distance computation), ``h_x . HQ(h) = (C_VQ h_x)[v] +
sum_k ((R h_x)^(k) . C_PQ[k])[p_k]``, optionally followed by an exact rerank
of the best candidates.
"""

import hashlib
import io
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import orthogonal_procrustes
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from .config import HQConfig
from .errors import ArtifactFormatError, InvariantViolation
from .topk import top_n

logger = logging.getLogger(__name__)

INDEX_MAGIC = b"SRHQ"
INDEX_VERSION = 1
FLAG_VECTORS = 1

_ASSIGN_CHUNK = 4096


@dataclass
class HQCodebooks:
    """C_VQ (vq_size x d), rotation R (d x d) and PQ codebooks (K x pq_size x d/K)."""

    vq: np.ndarray
    rotation: np.ndarray
    pq: np.ndarray

    def __post_init__(self):
        d = self.vq.shape[1]
        if self.rotation.shape != (d, d):
            raise InvariantViolation(f"rotation must be {d}x{d}, got {self.rotation.shape}")
        if self.pq.ndim != 3 or self.pq.shape[0] * self.pq.shape[2] != d:
            raise InvariantViolation(f"PQ codebooks {self.pq.shape} do not tile dimension {d}")

    @property
    def d(self) -> int:
        return self.vq.shape[1]

    @property
    def vq_size(self) -> int:
        return self.vq.shape[0]

    @property
    def num_subspaces(self) -> int:
        return self.pq.shape[0]

    @property
    def pq_size(self) -> int:
        return self.pq.shape[1]

    @property
    def sub_dim(self) -> int:
        return self.pq.shape[2]

    def orthogonality_error(self) -> float:
        """Max-norm deviation of R^T R from the identity."""
        r = self.rotation
        return float(np.max(np.abs(r.T @ r - np.eye(self.d))))


@dataclass
class QuantizedSet:
    """Codes of every response, aligned with the response set, plus the bias column."""

    vq_codes: np.ndarray
    pq_codes: np.ndarray
    bias: Optional[np.ndarray] = None  # log P_LM(y) per response, float32

    def __len__(self) -> int:
        return self.vq_codes.shape[0]

    def validate(self, books: HQCodebooks):
        if self.pq_codes.shape != (len(self), books.num_subspaces):
            raise InvariantViolation("one PQ code per subspace per response required")
        if len(self) and (int(self.vq_codes.max()) >= books.vq_size
                          or int(self.pq_codes.max()) >= books.pq_size):
            raise InvariantViolation("code outside codebook range")
        if self.bias is not None and self.bias.shape != (len(self),):
            raise InvariantViolation("bias column must align with the codes")


@dataclass
class LookupTables:
    """Per-query tables: vq_table (vq_size,), pq_tables (K, pq_size) and the bias weight."""

    vq_table: np.ndarray
    pq_tables: np.ndarray
    alpha: float = 0.0


# --------------------------------------------------------------------------
# Assignment and reconstruction
# --------------------------------------------------------------------------


def nearest_centers(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Index of the nearest center for every row; ties go to the lowest index."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    centers = np.asarray(centers, dtype=np.float64)
    if not len(centers):
        raise InvariantViolation("codebook is empty")
    c_sq = np.einsum("ij,ij->i", centers, centers)
    out = np.empty(points.shape[0], dtype=np.int64)
    for start in range(0, points.shape[0], _ASSIGN_CHUNK):
        chunk = points[start:start + _ASSIGN_CHUNK]
        dist = c_sq[None, :] - 2.0 * chunk @ centers.T
        out[start:start + _ASSIGN_CHUNK] = np.argmin(dist, axis=1)
    return out


def vq_assign(h: np.ndarray, c_vq: np.ndarray) -> int:
    """Nearest VQ center of one vector."""
    return int(nearest_centers(np.asarray(h)[None, :], c_vq)[0])


def _split(rows: np.ndarray, books: HQCodebooks) -> np.ndarray:
    return rows.reshape(rows.shape[0], books.num_subspaces, books.sub_dim)


def nearest_k_centers(points: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """The ``k`` nearest center indices of every row, nearest first; ties go to the lower index."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    centers = np.asarray(centers, dtype=np.float64)
    k = min(k, len(centers))
    c_sq = np.einsum("ij,ij->i", centers, centers)
    out = np.empty((points.shape[0], k), dtype=np.int64)
    for start in range(0, points.shape[0], _ASSIGN_CHUNK):
        chunk = points[start:start + _ASSIGN_CHUNK]
        dist = c_sq[None, :] - 2.0 * chunk @ centers.T
        out[start:start + _ASSIGN_CHUNK] = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return out


def _pq_assign(rotated: np.ndarray, books: HQCodebooks) -> Tuple[np.ndarray, np.ndarray]:
    """PQ codes of rotated residuals and their squared quantization error."""
    parts = _split(rotated, books)
    codes = np.empty((rotated.shape[0], books.num_subspaces), dtype=np.int64)
    error = np.zeros(rotated.shape[0])
    for k in range(books.num_subspaces):
        codes[:, k] = nearest_centers(parts[:, k, :], books.pq[k])
        diff = parts[:, k, :] - books.pq[k][codes[:, k]]
        error += np.einsum("ij,ij->i", diff, diff)
    return codes, error


def quantize_batch(
    vectors: np.ndarray, books: HQCodebooks, vq_probe: int = 1
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Encode vectors to (vq_codes (n,), pq_codes (n, K)).

    For each of the ``vq_probe`` nearest VQ centers the residual is rotated by
    R and every subvector is assigned to its nearest PQ center; the center
    whose code tuple reconstructs best is kept. With ``vq_probe=1`` this is
    plain nearest-center assignment; with ``vq_probe >= vq_size`` the codes
    minimize the reconstruction error over all code tuples.
    """
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if vectors.shape[1] != books.d:
        raise InvariantViolation(f"vectors have dimension {vectors.shape[1]}, codebooks {books.d}")
    if vq_probe < 1:
        raise InvariantViolation(f"vq_probe must be >= 1, got {vq_probe}")
    if vq_probe == 1:
        candidates = nearest_centers(vectors, books.vq)[:, None]
    else:
        candidates = nearest_k_centers(vectors, books.vq, vq_probe)
    vq_codes = candidates[:, 0].copy()
    pq_codes, best = _pq_assign((vectors - books.vq[vq_codes]) @ books.rotation.T, books)
    for j in range(1, candidates.shape[1]):
        v = candidates[:, j]
        codes, error = _pq_assign((vectors - books.vq[v]) @ books.rotation.T, books)
        better = error < best
        vq_codes[better] = v[better]
        pq_codes[better] = codes[better]
        best[better] = error[better]
    return vq_codes, pq_codes


def quantize(h: np.ndarray, books: HQCodebooks, vq_probe: int = 1) -> Tuple[int, np.ndarray]:
    vq_codes, pq_codes = quantize_batch(np.asarray(h)[None, :], books, vq_probe)
    return int(vq_codes[0]), pq_codes[0]


def _pq_vectors(pq_codes: np.ndarray, books: HQCodebooks) -> np.ndarray:
    k_idx = np.arange(books.num_subspaces)[None, :]
    return books.pq[k_idx, pq_codes].reshape(pq_codes.shape[0], books.d)


def reconstruct_batch(vq_codes: np.ndarray, pq_codes: np.ndarray, books: HQCodebooks) -> np.ndarray:
    vq_codes = np.asarray(vq_codes, dtype=np.int64)
    pq_codes = np.atleast_2d(np.asarray(pq_codes, dtype=np.int64))
    if (vq_codes.min(initial=0) < 0 or vq_codes.max(initial=0) >= books.vq_size
            or pq_codes.min(initial=0) < 0 or pq_codes.max(initial=0) >= books.pq_size):
        raise InvariantViolation("code outside codebook range")
    if pq_codes.shape[1] != books.num_subspaces:
        raise InvariantViolation(f"expected {books.num_subspaces} PQ codes, got {pq_codes.shape[1]}")
    return books.vq[vq_codes] + _pq_vectors(pq_codes, books) @ books.rotation


def reconstruct(codes: Tuple[int, Sequence[int]], books: HQCodebooks) -> np.ndarray:
    """``C_VQ[vq] + R^T concat(C_PQ[k][pq_k])``."""
    vq_code, pq_codes = codes
    return reconstruct_batch(np.array([vq_code]), np.asarray(pq_codes)[None, :], books)[0]


def reconstruction_error(vectors: np.ndarray, books: HQCodebooks, vq_probe: int = 1) -> float:
    """Mean squared reconstruction error of the codes ``quantize_batch`` assigns."""
    vectors = np.asarray(vectors, dtype=np.float64)
    vq_codes, pq_codes = quantize_batch(vectors, books, vq_probe)
    diff = vectors - reconstruct_batch(vq_codes, pq_codes, books)
    return float(np.mean(np.sum(diff * diff, axis=1)))


def vq_only_error(vectors: np.ndarray, c_vq: np.ndarray) -> float:
    """Mean squared error of coarse quantization alone."""
    vectors = np.asarray(vectors, dtype=np.float64)
    diff = vectors - c_vq[nearest_centers(vectors, c_vq)]
    return float(np.mean(np.sum(diff * diff, axis=1)))


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def _kmeans(points: np.ndarray, k: int, seed: int, init: Optional[np.ndarray] = None) -> np.ndarray:
    """k-means centers; warm-starts from ``init`` when given."""
    with warnings.catch_warnings():
        # duplicate points leave fewer distinct clusters than k; duplicate centers are fine
        warnings.simplefilter("ignore", ConvergenceWarning)
        if init is None:
            km = KMeans(n_clusters=k, n_init=1, random_state=seed)
        else:
            km = KMeans(n_clusters=k, init=init, n_init=1, random_state=seed)
        km.fit(points)
    return km.cluster_centers_.astype(np.float64)


@dataclass
class HQTrainingReport:
    """Reconstruction error history; entry 0 is the starting error."""

    errors: List[float] = field(default_factory=list)
    vq_only_error: float = 0.0


def _check_training_input(vectors: np.ndarray, cfg: HQConfig) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[1] != cfg.d:
        raise InvariantViolation(f"expected n x {cfg.d} vectors, got {vectors.shape}")
    n = vectors.shape[0]
    if n < cfg.vq_size or n < cfg.pq_size:
        raise InvariantViolation(
            f"need at least max(vq_size, pq_size) = {max(cfg.vq_size, cfg.pq_size)} vectors, got {n}"
        )
    if not np.all(np.isfinite(vectors)):
        raise InvariantViolation("training vectors must be finite")
    return vectors


def _train_alternating(vectors, cfg: HQConfig, seed: int, report: HQTrainingReport) -> HQCodebooks:
    c_vq = _kmeans(vectors, cfg.vq_size, seed)
    residuals = vectors - c_vq[nearest_centers(vectors, c_vq)]
    report.vq_only_error = vq_only_error(vectors, c_vq)
    d, k, s = cfg.d, cfg.num_subspaces, cfg.sub_dim
    rotation = np.eye(d)
    pq = np.stack([
        _kmeans(residuals[:, i * s:(i + 1) * s], cfg.pq_size, seed + 1 + i) for i in range(k)
    ])
    books = HQCodebooks(c_vq, rotation, pq)
    report.errors.append(reconstruction_error(vectors, books))
    logger.info("HQ init: vq-only error %.6f, hq error %.6f", report.vq_only_error, report.errors[-1])

    for it in range(cfg.iterations):
        rotated = residuals @ rotation.T
        parts = rotated.reshape(-1, k, s)
        pq = np.stack([_kmeans(parts[:, i, :], cfg.pq_size, seed, init=pq[i]) for i in range(k)])
        books = HQCodebooks(c_vq, rotation, pq)
        codes = np.stack([nearest_centers(parts[:, i, :], pq[i]) for i in range(k)], axis=1)
        targets = _pq_vectors(codes, books)
        # min ||residuals @ Q - targets||, Q orthogonal; R = Q^T
        q, _ = orthogonal_procrustes(residuals, targets)
        rotation = q.T
        books = HQCodebooks(c_vq, rotation, pq)
        report.errors.append(reconstruction_error(vectors, books))
        logger.info("HQ iteration %d: reconstruction error %.6f", it + 1, report.errors[-1])
    return books


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    q, upper = np.linalg.qr(r)
    signs = np.sign(np.diag(upper))
    signs[signs == 0] = 1.0
    return q * signs[None, :]


def _train_sgd(vectors, cfg: HQConfig, seed: int, report: HQTrainingReport) -> HQCodebooks:
    rng = np.random.default_rng(seed)
    n = vectors.shape[0]
    k, s = cfg.num_subspaces, cfg.sub_dim
    c_vq = vectors[rng.choice(n, cfg.vq_size, replace=False)].copy()
    residuals = vectors - c_vq[nearest_centers(vectors, c_vq)]
    report.vq_only_error = vq_only_error(vectors, c_vq)
    pq = np.stack([
        residuals[rng.choice(n, cfg.pq_size, replace=False), i * s:(i + 1) * s] for i in range(k)
    ])
    books = HQCodebooks(c_vq, np.eye(cfg.d), pq.copy())
    report.errors.append(reconstruction_error(vectors, books))
    logger.info("HQ sgd init: reconstruction error %.6f", report.errors[-1])

    batch = min(cfg.sgd_batch, n)
    for step in range(cfg.sgd_steps):
        rows = vectors[rng.choice(n, batch, replace=False)]
        vq_codes, pq_codes = quantize_batch(rows, books)
        pq_vecs = _pq_vectors(pq_codes, books)
        delta = rows - books.vq[vq_codes] - pq_vecs @ books.rotation
        report.errors.append(float(np.mean(np.sum(delta * delta, axis=1))))

        # rotation: gradient of the mean squared error, then back onto the orthogonal group
        grad_r = -2.0 / batch * pq_vecs.T @ delta
        rotation = _orthonormalize(books.rotation - cfg.sgd_lr * grad_r)

        # centers move toward the mean error of the rows assigned to them
        vq_step = np.zeros_like(books.vq)
        np.add.at(vq_step, vq_codes, delta)
        vq_counts = np.bincount(vq_codes, minlength=cfg.vq_size)[:, None]
        c_vq = books.vq + cfg.sgd_lr * 2.0 * vq_step / np.maximum(vq_counts, 1)

        back = (delta @ books.rotation.T).reshape(batch, k, s)
        new_pq = books.pq.copy()
        for i in range(k):
            pq_step = np.zeros_like(new_pq[i])
            np.add.at(pq_step, pq_codes[:, i], back[:, i, :])
            counts = np.bincount(pq_codes[:, i], minlength=cfg.pq_size)[:, None]
            new_pq[i] += cfg.sgd_lr * 2.0 * pq_step / np.maximum(counts, 1)
        books = HQCodebooks(c_vq, rotation, new_pq)
        if cfg.sgd_steps >= 10 and (step + 1) % max(1, cfg.sgd_steps // 10) == 0:
            logger.info("HQ sgd step %d: batch error %.6f", step + 1, report.errors[-1])
    return books


def train_hq(
    vectors: np.ndarray, cfg: HQConfig, seed: int = 0, report: Optional[HQTrainingReport] = None
) -> HQCodebooks:
    """
    Learn codebooks and rotation minimizing mean ||h - HQ(h)||^2.

    Args:
        vectors: n x d training vectors
        cfg: Codebook sizes and training mode
        seed: Seed for every random choice
        report: Optional report receiving the error history

    Returns:
        HQCodebooks
    """
    vectors = _check_training_input(vectors, cfg)
    report = report if report is not None else HQTrainingReport()
    if cfg.mode == "alternating":
        books = _train_alternating(vectors, cfg, seed, report)
    else:
        books = _train_sgd(vectors, cfg, seed, report)
    if not all(np.all(np.isfinite(a)) for a in (books.vq, books.rotation, books.pq)):
        raise InvariantViolation("quantizer training produced non-finite codebooks")
    return books


# --------------------------------------------------------------------------
# Querying
# --------------------------------------------------------------------------


def build_tables(h_x: np.ndarray, books: HQCodebooks, alpha: float = 0.0) -> LookupTables:
    """Lookup tables for one query."""
    h_x = np.asarray(h_x, dtype=np.float64)
    if h_x.shape != (books.d,):
        raise InvariantViolation(f"query has shape {h_x.shape}, codebooks dimension {books.d}")
    rotated = (books.rotation @ h_x).reshape(books.num_subspaces, books.sub_dim)
    pq_tables = np.einsum("kcs,ks->kc", books.pq, rotated)
    return LookupTables(books.vq @ h_x, pq_tables, float(alpha))


def adc_score(tables: LookupTables, codes: Tuple[int, Sequence[int]], bias: float = 0.0) -> float:
    """Table score of one code tuple plus ``alpha * bias``."""
    vq_code, pq_codes = codes
    pq_codes = np.asarray(pq_codes, dtype=np.int64)
    total = tables.vq_table[vq_code] + tables.pq_tables[np.arange(len(pq_codes)), pq_codes].sum()
    return float(total + tables.alpha * bias)


def flat_codes(pq_codes: np.ndarray, pq_size: int) -> np.ndarray:
    """PQ codes as offsets into the raveled (K, pq_size) table."""
    pq_codes = np.asarray(pq_codes, dtype=np.intp)
    return pq_codes + np.arange(pq_codes.shape[1], dtype=np.intp) * pq_size


def adc_scores(tables: LookupTables, quantized: QuantizedSet) -> np.ndarray:
    """Table scores of every response (float64)."""
    flat = flat_codes(quantized.pq_codes, tables.pq_tables.shape[1])
    scores = tables.vq_table[quantized.vq_codes] + np.take(tables.pq_tables.ravel(), flat).sum(axis=1)
    if quantized.bias is not None and tables.alpha:
        scores = scores + tables.alpha * quantized.bias
    return scores


def bias_terms(logprobs: Optional[np.ndarray], alpha: float, n: int) -> np.ndarray:
    """``alpha * log P_LM`` in single precision (zeros when there is no bias)."""
    if logprobs is None or alpha == 0:
        return np.zeros(n, dtype=np.float32)
    return np.float32(alpha) * np.asarray(logprobs, dtype=np.float32)


def exact_scores(vectors: np.ndarray, ids: np.ndarray, h_x: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Full-precision dot products of ``vectors[ids]`` with ``h_x`` plus bias; ids should be sorted."""
    return vectors[ids] @ h_x.astype(vectors.dtype) + bias[ids]


def exhaustive_search(
    vectors: np.ndarray, h_x: np.ndarray, n: int, bias: Optional[np.ndarray] = None
) -> List[Tuple[int, float]]:
    """Exact top-n by dot product (plus bias), ties to the lower id."""
    scores = vectors @ np.asarray(h_x).astype(vectors.dtype)
    if bias is not None:
        scores = scores + bias
    return [(int(i), float(scores[i])) for i in top_n(scores, n)]


class HQIndex:
    """Codebooks, codes, bias column and (optionally) full-precision vectors for rerank."""

    def __init__(
        self,
        books: HQCodebooks,
        quantized: QuantizedSet,
        vectors: Optional[np.ndarray] = None,
        source_hash: str = "",
    ):
        quantized.validate(books)
        if vectors is not None and vectors.shape != (len(quantized), books.d):
            raise InvariantViolation("stored vectors must align with the codes")
        self.books = books
        self.quantized = quantized
        self.vectors = None if vectors is None else np.ascontiguousarray(vectors, dtype=np.float32)
        self.source_hash = source_hash
        self._layout_cells()

    def _layout_cells(self):
        """Group the codes by VQ cell so a query can scan whole cells."""
        q, books = self.quantized, self.books
        vq = q.vq_codes.astype(np.intp)
        self._order = np.argsort(vq, kind="stable")
        counts = np.bincount(vq, minlength=books.vq_size)
        self._starts = np.concatenate([[0], np.cumsum(counts)]).astype(np.intp)
        self._sizes = counts
        self._cell_vq = vq[self._order]
        self._cell_flat = flat_codes(q.pq_codes, books.pq_size)[self._order]
        self._cell_bias = None if q.bias is None else np.asarray(q.bias, dtype=np.float32)[self._order]
        if self._cell_bias is not None:
            high = np.full(books.vq_size, -np.inf, dtype=np.float32)
            low = np.full(books.vq_size, np.inf, dtype=np.float32)
            np.maximum.at(high, self._cell_vq, self._cell_bias)
            np.minimum.at(low, self._cell_vq, self._cell_bias)
            # per-cell extremes; empty cells never get scanned
            self._bias_range = (np.where(counts > 0, low, 0).astype(np.float32),
                                np.where(counts > 0, high, 0).astype(np.float32))

    def __len__(self) -> int:
        return len(self.quantized)

    @property
    def d(self) -> int:
        return self.books.d

    @classmethod
    def build(
        cls,
        vectors: np.ndarray,
        cfg: HQConfig,
        seed: int = 0,
        logprobs: Optional[np.ndarray] = None,
        keep_vectors: bool = True,
        source_hash: str = "",
        report: Optional[HQTrainingReport] = None,
    ) -> "HQIndex":
        """Train codebooks on ``vectors`` and encode them."""
        books = train_hq(vectors, cfg, seed, report)
        return cls.from_codebooks(books, vectors, logprobs, keep_vectors, source_hash, cfg.vq_probe)

    @classmethod
    def from_codebooks(
        cls, books: HQCodebooks, vectors: np.ndarray, logprobs: Optional[np.ndarray] = None,
        keep_vectors: bool = True, source_hash: str = "", vq_probe: int = 1,
    ) -> "HQIndex":
        vq_codes, pq_codes = quantize_batch(vectors, books, vq_probe)
        code_dtype = np.uint8 if books.pq_size <= 256 else np.uint16
        quantized = QuantizedSet(
            vq_codes.astype(np.uint16),
            pq_codes.astype(code_dtype),
            None if logprobs is None else np.asarray(logprobs, dtype=np.float32),
        )
        return cls(books, quantized, vectors if keep_vectors else None, source_hash)

    def tables(self, h_x: np.ndarray, alpha: float = 0.0) -> LookupTables:
        return build_tables(h_x, self.books, alpha)

    def search(
        self, h_x: np.ndarray, n: int, retrieve_m: int, rerank: bool = True, alpha: float = 0.0
    ) -> List[Tuple[int, float]]:
        """
        Top-n responses for one query.

        Args:
            h_x: Query encoding
            n: Results wanted (capped at the index size)
            retrieve_m: Candidates kept from the table scan
            rerank: Re-score candidates with exact dot products
            alpha: Weight of the stored bias column

        Returns:
            (response id, score) pairs, best first
        """
        if n < 1:
            raise InvariantViolation(f"N must be >= 1, got {n}")
        if retrieve_m < n:
            raise InvariantViolation(f"retrieve_m ({retrieve_m}) must be >= N ({n})")
        if rerank and self.vectors is None:
            raise InvariantViolation("exact rerank needs the index to keep full-precision vectors")
        ids, approx = self.scan(self.tables(h_x, alpha), retrieve_m)
        if not rerank:
            best = top_n(approx, n, ids)
            by_id = np.argsort(ids)
            at = by_id[np.searchsorted(ids, best, sorter=by_id)]
            return [(int(i), float(approx[j])) for i, j in zip(best, at)]
        ids = np.sort(top_n(approx, retrieve_m, ids))
        bias = bias_terms(None if self.quantized.bias is None else self.quantized.bias[ids], alpha, len(ids))
        exact = self.vectors[ids] @ np.asarray(h_x).astype(np.float32) + bias
        best = top_n(exact, n)
        return [(int(ids[j]), float(exact[j])) for j in best]

    def scan(self, tables: LookupTables, retrieve_m: int) -> Tuple[np.ndarray, np.ndarray]:
        """
        Table scores of a subset of responses that holds the ``retrieve_m`` best.

        Cells are visited by their score bound ``vq_table[c] + sum_k max(pq_tables[k])
        + alpha * max bias``, best first, until ``retrieve_m`` codes are scored; then
        every remaining cell whose bound reaches the current ``retrieve_m``-th score
        is scored as well. Ranking the returned subset therefore matches ranking a
        full ``adc_scores`` pass.

        Returns:
            (ids, scores) of the scored responses
        """
        alpha = tables.alpha
        pq_bound = tables.pq_tables.max(axis=1).sum()
        bound = tables.vq_table + pq_bound
        scale = np.abs(tables.vq_table) + np.abs(tables.pq_tables).max(axis=1).sum()
        if self._cell_bias is not None and alpha:
            low, high = self._bias_range
            # same float32 product as the scores, so the bound rounds the same way
            term = alpha * (high if alpha > 0 else low)
            bound = bound + term
            scale = scale + np.abs(term)
        # summation order differs between the bound and the scores
        bound = bound + 1e-9 * (1.0 + scale)
        bound[self._sizes == 0] = -np.inf
        cells = np.argsort(-bound, kind="stable")
        seen = np.cumsum(self._sizes[cells])
        first = min(int(np.searchsorted(seen, retrieve_m)) + 1, len(cells))
        pos = self._cell_positions(cells[:first])
        scores = self._score_positions(tables, pos)
        if first < len(cells) and len(pos) >= retrieve_m:
            threshold = np.partition(scores, len(scores) - retrieve_m)[len(scores) - retrieve_m]
            rest = cells[first:]
            more = self._cell_positions(rest[bound[rest] >= threshold])
            if len(more):
                pos = np.concatenate([pos, more])
                scores = np.concatenate([scores, self._score_positions(tables, more)])
        logger.debug("HQ scan: %d of %d codes scored", len(pos), len(self))
        return self._order[pos], scores

    def _cell_positions(self, cells: np.ndarray) -> np.ndarray:
        sizes = self._sizes[cells]
        # concatenated ranges starts[c] .. starts[c] + sizes[c]
        shift = self._starts[cells] - (np.cumsum(sizes) - sizes)
        return np.repeat(shift, sizes) + np.arange(int(sizes.sum()), dtype=np.intp)

    def _score_positions(self, tables: LookupTables, pos: np.ndarray) -> np.ndarray:
        pq_part = np.take(tables.pq_tables.ravel(), self._cell_flat[pos]).sum(axis=1)
        scores = tables.vq_table[self._cell_vq[pos]] + pq_part
        if self._cell_bias is not None and tables.alpha:
            scores = scores + tables.alpha * self._cell_bias[pos]
        return scores

    # ---- serialization ----------------------------------------------------

    def to_bytes(self) -> bytes:
        b = self.books
        q = self.quantized
        buf = io.BytesIO()
        buf.write(INDEX_MAGIC)
        flags = FLAG_VECTORS if self.vectors is not None else 0
        buf.write(struct.pack("<IIIIIII", INDEX_VERSION, b.d, b.vq_size, b.num_subspaces,
                              b.pq_size, len(q), flags))
        buf.write(self.source_hash.encode("ascii").ljust(64, b"\0")[:64])
        for arr in (b.vq, b.rotation, b.pq):
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(q.vq_codes, dtype="<u2").tobytes())
        buf.write(np.ascontiguousarray(q.pq_codes, dtype="<u1" if b.pq_size <= 256 else "<u2").tobytes())
        bias = q.bias if q.bias is not None else np.zeros(len(q), dtype=np.float32)
        buf.write(np.ascontiguousarray(bias, dtype="<f4").tobytes())
        if self.vectors is not None:
            buf.write(np.ascontiguousarray(self.vectors, dtype="<f4").tobytes())
        return buf.getvalue()

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path: Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "HQIndex":
        buf = io.BytesIO(data)
        if buf.read(4) != INDEX_MAGIC:
            raise ArtifactFormatError("not a ReplySonor index file (bad magic)")
        header = buf.read(28)
        if len(header) != 28:
            raise ArtifactFormatError("index file truncated in header")
        version, d, vq_size, k, pq_size, n, flags = struct.unpack("<IIIIIII", header)
        if version != INDEX_VERSION:
            raise ArtifactFormatError(f"unsupported index format version {version}")
        if k == 0 or d % k:
            raise ArtifactFormatError(f"subspace count {k} does not divide dimension {d}")
        source_hash = buf.read(64).rstrip(b"\0").decode("ascii")

        def take(dtype, shape):
            count = int(np.prod(shape))
            raw = buf.read(count * np.dtype(dtype).itemsize)
            if len(raw) != count * np.dtype(dtype).itemsize:
                raise ArtifactFormatError("index file truncated")
            return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

        vq = take("<f8", (vq_size, d)).astype(np.float64)
        rotation = take("<f8", (d, d)).astype(np.float64)
        pq = take("<f8", (k, pq_size, d // k)).astype(np.float64)
        vq_codes = take("<u2", (n,)).astype(np.uint16)
        pq_codes = take("<u1" if pq_size <= 256 else "<u2", (n, k))
        pq_codes = pq_codes.astype(np.uint8 if pq_size <= 256 else np.uint16)
        bias = take("<f4", (n,)).astype(np.float32)
        vectors = take("<f4", (n, d)).astype(np.float32) if flags & FLAG_VECTORS else None
        return cls(HQCodebooks(vq, rotation, pq), QuantizedSet(vq_codes, pq_codes, bias), vectors, source_hash)

    @classmethod
    def load(cls, path: Path) -> "HQIndex":
        return cls.from_bytes(Path(path).read_bytes())


def recall(retrieved: Sequence[int], truth: Sequence[int], n: int) -> float:
    """|retrieved intersect truth| / n."""
    return len(set(int(i) for i in retrieved) & set(int(i) for i in truth)) / float(n)


def recall_at(
    index: HQIndex,
    queries: np.ndarray,
    n: int,
    ground_truth_fn: Callable[[np.ndarray], Sequence[int]],
    retrieve_m: Optional[int] = None,
    rerank: bool = True,
) -> float:
    """
    Mean recall of the top-n over queries.

    Args:
        index: Index to query
        queries: (q, d) query encodings
        n: Neighbors per query
        ground_truth_fn: Query -> ids of its true top-n
        retrieve_m: Table-scan width (defaults to n)
        rerank: Exact rerank of the candidates

    Returns:
        Fraction in [0, 1]
    """
    queries = np.atleast_2d(queries)
    if not len(queries):
        raise InvariantViolation("recall needs at least one query")
    m = retrieve_m if retrieve_m is not None else n
    total = 0.0
    for q in queries:
        found = [i for i, _ in index.search(q, n, m, rerank)]
        total += recall(found, ground_truth_fn(q), n)
    return total / len(queries)
