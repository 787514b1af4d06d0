"""Tests for hierarchical quantization and the MIPS index."""

import itertools

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from replysonor.config import HQConfig
from replysonor.corpus import gaussian_mixture
from replysonor.errors import ArtifactFormatError, InvariantViolation
from replysonor.evaluation import speed_recall_bench
from replysonor.hq_index import (
    HQCodebooks,
    HQIndex,
    HQTrainingReport,
    adc_score,
    adc_scores,
    build_tables,
    exhaustive_search,
    nearest_centers,
    nearest_k_centers,
    quantize,
    quantize_batch,
    recall,
    recall_at,
    reconstruct,
    reconstruct_batch,
    reconstruction_error,
    train_hq,
    vq_assign,
)
from replysonor.lsh import SignProjectionLSH
from replysonor.topk import top_n

SMALL = HQConfig(d=16, vq_size=8, num_subspaces=4, pq_size=16, iterations=3)


def random_rotation(rng, d):
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return q


def random_books(rng, d=4, vq=2, k=2, pq=4):
    return HQCodebooks(rng.normal(size=(vq, d)), random_rotation(rng, d), rng.normal(size=(k, pq, d // k)))


@pytest.fixture(scope="module")
def vectors():
    return np.random.default_rng(5).normal(size=(400, 16)).astype(np.float32)


@pytest.fixture(scope="module")
def index(vectors):
    return HQIndex.build(vectors, SMALL, seed=0)


@pytest.fixture(scope="module")
def mixture():
    vectors, queries = gaussian_mixture(100_000, 1000, d=64, clusters=64, seed=0)
    index = HQIndex.build(vectors, HQConfig(d=64, vq_size=256, num_subspaces=8, pq_size=256, iterations=4))
    return vectors, queries, index


class TestAssignment:
    """Tests for nearest-center assignment"""

    def test_exact_center(self, rng):
        centers = rng.normal(size=(16, 5))
        assert vq_assign(centers[3], centers) == 3

    def test_single_center(self, rng):
        centers = rng.normal(size=(1, 5))
        assert all(vq_assign(h, centers) == 0 for h in rng.normal(size=(10, 5)))

    def test_matches_distance_scan(self, rng):
        centers = rng.normal(size=(16, 6))
        for h in rng.normal(size=(200, 6)):
            dist = [float(np.sum((h - c) ** 2)) for c in centers]
            assert vq_assign(h, centers) == int(np.argmin(dist))

    def test_ties_go_to_lower_index(self):
        centers = np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
        assert nearest_centers(np.array([[0.0, 1.0]]), centers)[0] == 0
        assert nearest_centers(np.array([[2.0, 0.0]]), centers)[0] == 0

    def test_k_nearest_order(self, rng):
        centers = rng.normal(size=(10, 3))
        points = rng.normal(size=(50, 3))
        got = nearest_k_centers(points, centers, 4)
        for p, row in zip(points, got):
            dist = np.sum((centers - p) ** 2, axis=1)
            assert_array_equal(row, np.argsort(dist, kind="stable")[:4])

    def test_empty_codebook(self):
        with pytest.raises(InvariantViolation):
            nearest_centers(np.zeros((1, 2)), np.zeros((0, 2)))


class TestQuantize:
    """Tests for encoding and reconstruction"""

    def test_zero_residual(self):
        """Test a vector on a VQ center encodes to zero PQ centers exactly"""
        vq = np.array([[1.0, 2.0, 3.0, 4.0], [0.0, 0.0, 0.0, 0.0]])
        pq = np.zeros((2, 3, 2))
        pq[:, 1, :] = 5.0
        books = HQCodebooks(vq, np.eye(4), pq)
        vq_code, pq_codes = quantize(vq[0], books)
        assert vq_code == 0
        assert_array_equal(pq_codes, [0, 0])
        assert_allclose(reconstruct((vq_code, pq_codes), books), vq[0])

    def test_identity_collapse(self, rng):
        """Test R = I and C_VQ = {0} reduce to per-subspace nearest centers"""
        pq = rng.normal(size=(2, 4, 3))
        books = HQCodebooks(np.zeros((1, 6)), np.eye(6), pq)
        for h in rng.normal(size=(20, 6)):
            _, codes = quantize(h, books)
            for k in range(2):
                dist = np.sum((pq[k] - h[3 * k:3 * k + 3]) ** 2, axis=1)
                assert codes[k] == int(np.argmin(dist))

    def test_minimal_over_all_code_tuples(self, rng):
        """Test codes minimize reconstruction error by exhaustive enumeration (vq 2, pq 4, K=2, d=4)"""
        violations = 0
        for _ in range(1000):
            books = random_books(rng)
            h = rng.normal(size=4) * 2.0
            chosen = reconstruct(quantize(h, books, vq_probe=2), books)
            chosen_error = float(np.sum((h - chosen) ** 2))
            best = min(
                float(np.sum((h - reconstruct((v, np.array([a, b])), books)) ** 2))
                for v, a, b in itertools.product(range(2), range(4), range(4))
            )
            violations += chosen_error > best + 1e-9
        assert violations == 0

    def test_single_probe_is_nearest_center(self, rng):
        books = random_books(rng, vq=6)
        points = rng.normal(size=(100, 4))
        vq_codes, _ = quantize_batch(points, books, vq_probe=1)
        assert_array_equal(vq_codes, nearest_centers(points, books.vq))

    def test_default_is_nearest_center(self, rng):
        books = random_books(rng, vq=6)
        for h in rng.normal(size=(50, 4)):
            assert quantize(h, books)[0] == vq_assign(h, books.vq)

    def test_probing_never_worse(self, rng):
        books = random_books(rng, d=8, vq=16, k=4, pq=4)
        points = rng.normal(size=(300, 8))
        errors = []
        for tried in (1, 4, 16):
            codes = quantize_batch(points, books, vq_probe=tried)
            diff = points - reconstruct_batch(*codes, books)
            errors.append(np.sum(diff * diff, axis=1))
        assert np.all(errors[1] <= errors[0] + 1e-12)
        assert np.all(errors[2] <= errors[1] + 1e-12)

    def test_reconstruct_matches_matrix_arithmetic(self, rng):
        books = random_books(rng, d=6, vq=3, k=3, pq=5)
        vq_code, codes = 2, np.array([4, 0, 3])
        sub = np.concatenate([books.pq[k][codes[k]] for k in range(3)])
        expected = books.vq[vq_code] + books.rotation.T @ sub
        assert_allclose(reconstruct((vq_code, codes), books), expected, atol=1e-12)

    def test_reconstruct_rejects_bad_codes(self, rng):
        books = random_books(rng)
        with pytest.raises(InvariantViolation):
            reconstruct((2, np.array([0, 0])), books)
        with pytest.raises(InvariantViolation):
            reconstruct((0, np.array([0, 4])), books)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(InvariantViolation):
            quantize(np.zeros(5), random_books(rng))

    def test_codebooks_must_tile(self):
        with pytest.raises(InvariantViolation):
            HQCodebooks(np.zeros((1, 4)), np.eye(4), np.zeros((3, 2, 1)))


class TestTraining:
    """Tests for codebook and rotation learning"""

    @pytest.mark.parametrize("mode", ["alternating", "sgd"])
    def test_rotation_stays_orthogonal(self, vectors, mode):
        cfg = HQConfig(d=16, vq_size=8, num_subspaces=4, pq_size=16, mode=mode, iterations=3,
                       sgd_steps=50, sgd_batch=64)
        books = train_hq(vectors, cfg, seed=1)
        assert books.orthogonality_error() < 1e-5

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_alternating_error_never_rises(self, vectors, seed):
        cfg = HQConfig(d=16, vq_size=8, num_subspaces=4, pq_size=16, iterations=6)
        report = HQTrainingReport()
        train_hq(vectors, cfg, seed=seed, report=report)
        errors = report.errors
        assert len(errors) == cfg.iterations + 1
        assert all(b <= a * (1 + 1e-6) for a, b in zip(errors, errors[1:]))

    def test_sgd_error_falls(self, vectors):
        cfg = HQConfig(d=16, vq_size=8, num_subspaces=4, pq_size=16, mode="sgd", sgd_steps=400, sgd_batch=64)
        report = HQTrainingReport()
        train_hq(vectors, cfg, seed=0, report=report)
        steps = report.errors[1:]
        assert len(steps) == cfg.sgd_steps
        tail = steps[-(len(steps) // 10):]
        assert np.mean(tail) < report.errors[0]

    def test_beats_vq_only(self):
        """Test the residual PQ lowers the error below coarse quantization alone"""
        vectors = np.random.default_rng(2).normal(size=(10_000, 32))
        cfg = HQConfig(d=32, vq_size=16, num_subspaces=4, pq_size=16, iterations=2)
        report = HQTrainingReport()
        books = train_hq(vectors, cfg, seed=0, report=report)
        assert reconstruction_error(vectors, books) < report.vq_only_error

    def test_identical_vectors(self):
        """Test degenerate input reconstructs exactly with one center"""
        vectors = np.tile(np.arange(8, dtype=np.float64), (20, 1))
        cfg = HQConfig(d=8, vq_size=1, num_subspaces=2, pq_size=1, iterations=1)
        books = train_hq(vectors, cfg)
        assert_allclose(books.vq[0], vectors[0], atol=1e-9)
        assert reconstruction_error(vectors, books) == pytest.approx(0.0, abs=1e-12)

    def test_distinct_points_reconstruct_exactly(self, rng):
        points = rng.normal(size=(4, 8))
        vectors = points[rng.integers(0, 4, size=200)]
        cfg = HQConfig(d=8, vq_size=4, num_subspaces=2, pq_size=4, iterations=2)
        assert reconstruction_error(vectors, train_hq(vectors, cfg)) < 1e-9

    def test_deterministic(self, vectors):
        a = HQIndex.build(vectors, SMALL, seed=4)
        b = HQIndex.build(vectors, SMALL, seed=4)
        assert a.to_bytes() == b.to_bytes()

    def test_too_few_vectors(self, rng):
        with pytest.raises(InvariantViolation):
            train_hq(rng.normal(size=(10, 16)), SMALL)

    def test_wrong_dimension(self, rng):
        with pytest.raises(InvariantViolation):
            train_hq(rng.normal(size=(100, 12)), SMALL)

    def test_subspaces_must_divide(self):
        with pytest.raises(InvariantViolation):
            HQConfig(d=10, num_subspaces=4)


class TestLookupTables:
    """Tests for asymmetric distance computation"""

    def test_zero_query(self, index):
        tables = build_tables(np.zeros(16), index.books)
        assert not np.any(tables.vq_table)
        assert not np.any(tables.pq_tables)

    def test_rotation_is_isometry(self, index, rng):
        for h_x in rng.normal(size=(20, 16)):
            assert np.linalg.norm(index.books.rotation @ h_x) == pytest.approx(np.linalg.norm(h_x), abs=1e-5)

    def test_entries_match_direct_products(self, index, rng):
        books = index.books
        h_x = rng.normal(size=16)
        tables = build_tables(h_x, books)
        rotated = books.rotation @ h_x
        for j in range(books.vq_size):
            assert tables.vq_table[j] == pytest.approx(float(books.vq[j] @ h_x))
        for k in range(books.num_subspaces):
            part = rotated[4 * k:4 * k + 4]
            for c in range(books.pq_size):
                assert tables.pq_tables[k, c] == pytest.approx(float(books.pq[k][c] @ part))

    def test_adc_equals_reconstructed_dot_product(self, index, rng):
        """Test table scores equal h_x . HQ(h_y) over 10k random (query, code) trials"""
        books = index.books
        trials = 10_000
        queries = rng.normal(size=(trials, 16))
        vq_codes = rng.integers(books.vq_size, size=trials)
        pq_codes = rng.integers(books.pq_size, size=(trials, books.num_subspaces))
        recon = reconstruct_batch(vq_codes, pq_codes, books)
        expected = np.einsum("ij,ij->i", recon, queries)
        got = np.array([
            adc_score(build_tables(h_x, books), (int(v), p)) for h_x, v, p in zip(queries, vq_codes, pq_codes)
        ])
        assert np.max(np.abs(got - expected)) < 1e-4

    def test_adc_scores_whole_index(self, index, rng):
        q = index.quantized
        recon = reconstruct_batch(q.vq_codes, q.pq_codes, index.books)
        for h_x in rng.normal(size=(20, 16)):
            assert_allclose(adc_scores(build_tables(h_x, index.books), q), recon @ h_x, atol=1e-4)

    def test_bias_added_after_lookup(self, index, rng):
        h_x = rng.normal(size=16)
        tables = build_tables(h_x, index.books, alpha=0.5)
        codes = (int(index.quantized.vq_codes[0]), index.quantized.pq_codes[0])
        assert adc_score(tables, codes, bias=-4.0) == pytest.approx(
            build_tables(h_x, index.books).vq_table[codes[0]]
            + build_tables(h_x, index.books).pq_tables[np.arange(4), codes[1]].sum() - 2.0
        )


class TestSearch:
    """Tests for top-N queries"""

    def test_full_rerank_equals_exhaustive(self, index, vectors, rng):
        """Test retrieve_m = |R| with rerank reproduces exact search"""
        for h_x in rng.normal(size=(20, 16)).astype(np.float32):
            got = index.search(h_x, 10, len(index), rerank=True)
            assert got == exhaustive_search(vectors, h_x, 10)

    def test_results_sorted_best_first(self, index, rng):
        got = index.search(rng.normal(size=16), 20, 60, rerank=False)
        scores = [s for _, s in got]
        assert scores == sorted(scores, reverse=True)

    def test_bias_column(self, vectors, rng):
        logprobs = -rng.uniform(0, 10, size=len(vectors))
        index = HQIndex.build(vectors, SMALL, seed=0, logprobs=logprobs)
        h_x = rng.normal(size=16).astype(np.float32)
        bias = np.float32(0.25) * logprobs.astype(np.float32)
        assert index.search(h_x, 5, len(index), alpha=0.25) == exhaustive_search(vectors, h_x, 5, bias)

    @pytest.mark.parametrize("alpha", [0.0, 0.25, -0.5])
    def test_cell_scan_matches_full_table_pass(self, vectors, rng, alpha):
        """Test the bound-pruned scan ranks exactly like scoring every code"""
        logprobs = -rng.uniform(0, 10, size=len(vectors))
        index = HQIndex.build(vectors, SMALL, seed=0, logprobs=logprobs)
        for h_x in rng.normal(size=(50, 16)):
            full = adc_scores(index.tables(h_x, alpha), index.quantized)
            for m in (1, 7, 60, 400):
                expected = [(int(i), float(full[i])) for i in top_n(full, m)]
                assert index.search(h_x, m, m, rerank=False, alpha=alpha) == expected

    def test_scan_skips_cells(self):
        vectors, queries = gaussian_mixture(3000, 20, d=32, clusters=32, seed=3)
        index = HQIndex.build(vectors, HQConfig(d=32, vq_size=16, num_subspaces=8, pq_size=16, iterations=2))
        scanned = [len(index.scan(index.tables(q), 10)[0]) for q in queries]
        assert np.mean(scanned) < len(index)

    def test_index_encoding_tries_several_centers(self, index, vectors):
        """Test probing VQ centers at build time never raises a vector's error"""
        books = index.books
        errors = []
        for tried in (1, SMALL.vq_probe):
            built = HQIndex.from_codebooks(books, vectors, vq_probe=tried)
            diff = vectors - reconstruct_batch(built.quantized.vq_codes, built.quantized.pq_codes, books)
            errors.append(np.sum(diff * diff, axis=1))
        assert np.all(errors[1] <= errors[0] + 1e-9)
        rebuilt = HQIndex.from_codebooks(books, vectors, vq_probe=SMALL.vq_probe)
        assert_array_equal(index.quantized.vq_codes, rebuilt.quantized.vq_codes)

    def test_n_larger_than_index(self, rng):
        vectors = rng.normal(size=(16, 16)).astype(np.float32)
        index = HQIndex.build(vectors, HQConfig(d=16, vq_size=2, num_subspaces=4, pq_size=4, iterations=1))
        assert len(index.search(rng.normal(size=16), 20, 40)) == 16

    def test_invalid_requests(self, index, rng):
        h_x = rng.normal(size=16)
        with pytest.raises(InvariantViolation):
            index.search(h_x, 0, 10)
        with pytest.raises(InvariantViolation):
            index.search(h_x, 10, 5)

    def test_rerank_needs_vectors(self, vectors, rng):
        index = HQIndex.build(vectors, SMALL, keep_vectors=False)
        with pytest.raises(InvariantViolation):
            index.search(rng.normal(size=16), 5, 10, rerank=True)
        assert len(index.search(rng.normal(size=16), 5, 10, rerank=False)) == 5

    def test_recall(self):
        assert recall([1, 2, 3], [3, 2, 9], 3) == pytest.approx(2 / 3)

    def test_recall_grows_with_retrieve_m(self):
        vectors, queries = gaussian_mixture(3000, 50, d=32, clusters=32, seed=3)
        index = HQIndex.build(vectors, HQConfig(d=32, vq_size=16, num_subspaces=8, pq_size=16, iterations=2))

        def truth(q):
            return [i for i, _ in exhaustive_search(vectors, q, 10)]

        values = [recall_at(index, queries, 10, truth, retrieve_m=m) for m in (10, 50, 200, 3000)]
        assert all(a <= b + 1e-12 for a, b in zip(values, values[1:]))
        assert values[-1] == 1.0

    def test_lsh_baseline(self, vectors, rng):
        lsh = SignProjectionLSH(vectors, bits=32, seed=0)
        h_x = rng.normal(size=16).astype(np.float32)
        assert lsh.search(h_x, 10, len(vectors)) == exhaustive_search(vectors, h_x, 10)

    @pytest.mark.slow
    def test_recall_at_scale(self, mixture):
        """Test recall@30 of at least 0.99 on 100k mixture vectors"""
        vectors, queries, index = mixture

        def truth(q):
            return [i for i, _ in exhaustive_search(vectors, q, 30)]

        assert recall_at(index, queries, 30, truth, retrieve_m=1000) >= 0.99

    @pytest.mark.slow
    def test_speedup_at_scale(self, mixture):
        """Test some retrieve_m reaches recall@30 >= 0.99 at least 5x faster than exhaustive search"""
        vectors, queries, index = mixture
        points = speed_recall_bench(vectors, index, queries[:300], sweep=(100, 300, 1000), n=30, warmup=50)
        hq = [p for p in points if p.label == "hq"]
        assert len(hq) == 3
        assert any(p.recall_at_30 >= 0.99 and p.speedup_vs_exhaustive >= 5.0 for p in hq), hq


class TestPersistence:
    """Tests for the index file format"""

    def test_save_load(self, index, tmp_path):
        path = tmp_path / "index.hq"
        index.save(path)
        loaded = HQIndex.load(path)
        assert loaded.content_hash() == index.content_hash()
        q = np.ones(16, dtype=np.float32)
        assert loaded.search(q, 5, 50) == index.search(q, 5, 50)

    def test_source_hash_kept(self, vectors, tmp_path):
        index = HQIndex.build(vectors, SMALL, source_hash="ab" * 32)
        path = tmp_path / "index.hq"
        index.save(path)
        assert HQIndex.load(path).source_hash == "ab" * 32

    def test_without_vectors(self, vectors, tmp_path):
        index = HQIndex.build(vectors, SMALL, keep_vectors=False)
        path = tmp_path / "index.hq"
        index.save(path)
        assert HQIndex.load(path).vectors is None

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "index.hq"
        path.write_bytes(b"NOPE" + bytes(100))
        with pytest.raises(ArtifactFormatError):
            HQIndex.load(path)

    def test_truncated(self, index, tmp_path):
        path = tmp_path / "index.hq"
        path.write_bytes(index.to_bytes()[:-10])
        with pytest.raises(ArtifactFormatError):
            HQIndex.load(path)
