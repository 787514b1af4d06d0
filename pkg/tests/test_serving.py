"""Tests for response precomputation and the serving architectures."""

import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from replysonor.config import BiasConfig, HQConfig
from replysonor.corpus import SyntheticCorpus
from replysonor.encoder import DotProductEncoder, JointScorer
from replysonor.errors import ArtifactFormatError, EmptyInputError, InvariantViolation, StaleArtifactError
from replysonor.evaluation import architecture_latency_bench
from replysonor.featurizer import build_vocabulary
from replysonor.hq_index import HQIndex
from replysonor.language_model import train_lm
from replysonor.serving import (
    ResponseSet,
    SuggestionService,
    SuggestRequest,
    check_index,
    precompute_responses,
    suggest_dot_exhaustive,
    suggest_exhaustive,
    suggest_single_pass,
    suggest_two_pass,
)

FEATURES = ("body", "subject")
HQ = HQConfig(d=16, vq_size=16, num_subspaces=4, pq_size=16, iterations=2)
ALPHA = BiasConfig(alpha=0.25)


@pytest.fixture(scope="module")
def corpus():
    return SyntheticCorpus(num_topics=250, words_per_topic=8, responses_per_topic=4, filler_words=40, seed=11)


@pytest.fixture(scope="module")
def vocab(corpus):
    records = corpus.generate(500)
    texts = [r["body"] for r in records] + corpus.responses()
    return build_vocabulary(texts, max_n=2, size_cap=20_000, min_count=1)


@pytest.fixture(scope="module")
def encoder(vocab):
    return DotProductEncoder.build(len(vocab), 16, [16], [16], FEATURES, seed=3,
                                   vocab_hash=vocab.content_hash())


@pytest.fixture(scope="module")
def joint(vocab):
    return JointScorer.build(len(vocab), 16, [16], [16], FEATURES, seed=4, vocab_hash=vocab.content_hash())


@pytest.fixture(scope="module")
def response_set(corpus, encoder, joint, vocab):
    responses = corpus.responses()
    return precompute_responses(responses, encoder, train_lm(responses), vocab, joint)


@pytest.fixture(scope="module")
def index(response_set):
    return HQIndex.build(response_set.encodings, HQ, logprobs=response_set.logprobs,
                         source_hash=response_set.content_hash())


@pytest.fixture(scope="module")
def service(response_set, vocab, encoder, joint, index):
    return SuggestionService(response_set, vocab, encoder, joint, index, ALPHA, HQ)


@pytest.fixture(scope="module")
def requests(corpus):
    return [SuggestRequest(r["body"], r.get("subject")) for r in corpus.generate(20)]


class TestResponseSet:
    """Tests for precomputed response encodings"""

    def test_aligned(self, response_set, corpus):
        assert len(response_set) == 1000
        assert response_set.responses == tuple(corpus.responses())
        assert response_set.encodings.shape == (1000, 16)
        assert response_set.joint_embeds.shape == (1000, 16)
        assert np.all(response_set.logprobs <= 0)

    def test_bias_column(self, response_set):
        assert_array_equal(response_set.bias(0.0), np.zeros(1000, dtype=np.float32))
        assert response_set.bias(0.5).dtype == np.float32

    def test_save_load(self, response_set, tmp_path):
        path = tmp_path / "responses.rs"
        response_set.save(path)
        loaded = ResponseSet.load(path)
        assert loaded.content_hash() == response_set.content_hash()
        assert loaded.bags == response_set.bags

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "responses.rs"
        path.write_bytes(b"XXXX" + bytes(64))
        with pytest.raises(ArtifactFormatError):
            ResponseSet.load(path)

    def test_empty(self, encoder, vocab):
        with pytest.raises(EmptyInputError):
            precompute_responses([], encoder, None, vocab)

    def test_without_language_model(self, encoder, vocab):
        rs = precompute_responses(["Sure.", "No."], encoder, None, vocab)
        assert_array_equal(rs.logprobs, [0.0, 0.0])
        assert rs.joint_embeds is None

    def test_positive_logprob_rejected(self, response_set):
        with pytest.raises(InvariantViolation):
            ResponseSet(response_set.responses[:1], response_set.bags[:1], response_set.encodings[:1],
                        np.array([0.5]))


class TestSuggestRequest:
    """Tests for request validation"""

    def test_defaults(self):
        req = SuggestRequest("hi")
        assert (req.mode, req.n, req.m, req.trigger) == ("single_pass", 100, 500, True)

    def test_unknown_mode(self):
        with pytest.raises(InvariantViolation):
            SuggestRequest("hi", mode="fast")

    def test_m_below_n(self):
        with pytest.raises(InvariantViolation):
            SuggestRequest("hi", mode="two_pass", n=10, m=5)

    def test_unknown_field(self):
        with pytest.raises(InvariantViolation):
            SuggestRequest.from_dict({"body": "hi", "colour": "red"})

    def test_missing_body(self):
        with pytest.raises(InvariantViolation):
            SuggestRequest.from_dict({"subject": "hi"})


class TestArchitectures:
    """Tests for the three serving architectures"""

    def test_two_pass_with_full_list_is_exhaustive(self, requests, encoder, joint, response_set, vocab):
        """Test M = |R| makes two-pass identical to exhaustive joint scoring"""
        for base in requests:
            req = SuggestRequest(base.body, base.subject, mode="two_pass", n=30, m=len(response_set))
            two = suggest_two_pass(req, encoder, joint, response_set, vocab, ALPHA)
            full = suggest_exhaustive(req, joint, response_set, vocab, ALPHA)
            assert two.suggestions == full.suggestions

    def test_single_pass_with_full_scan_is_exact(self, requests, encoder, index, response_set, vocab):
        """Test retrieve_m = |R| with rerank equals exhaustive dot-product ranking"""
        hq = HQConfig(d=16, vq_size=16, num_subspaces=4, pq_size=16, retrieve_m=len(response_set))
        for base in requests:
            req = SuggestRequest(base.body, base.subject, n=30)
            single = suggest_single_pass(req, encoder, index, response_set, vocab, ALPHA, hq)
            exact = suggest_dot_exhaustive(req, encoder, response_set, vocab, ALPHA)
            assert single.ids == exact.ids
            assert [s.final_score for s in single.suggestions] == [s.final_score for s in exact.suggestions]

    def test_ranked_by_final_score(self, service, requests):
        for mode in ("exhaustive", "two_pass", "single_pass"):
            req = SuggestRequest(requests[0].body, requests[0].subject, mode=mode, n=20, m=100)
            result = service.suggest(req)
            finals = [s.final_score for s in result.suggestions]
            assert finals == sorted(finals, reverse=True)
            assert len(result.suggestions) == 20
            assert result.mode == mode
            for s in result.suggestions:
                assert s.final_score == pytest.approx(s.model_score + s.bias, abs=1e-5)

    def test_bias_follows_alpha(self, service, requests, response_set):
        result = service.suggest(SuggestRequest(requests[0].body, mode="exhaustive", n=5))
        for s in result.suggestions:
            assert s.bias == pytest.approx(0.25 * response_set.logprobs[s.id], abs=1e-9)

    def test_n_capped_at_response_count(self, encoder, index, response_set, vocab):
        req = SuggestRequest("hello", n=5000)
        hq = HQConfig(d=16, vq_size=16, num_subspaces=4, pq_size=16, retrieve_m=100)
        assert len(suggest_single_pass(req, encoder, index, response_set, vocab, ALPHA, hq).ids) == 1000

    def test_timings_reported(self, service, requests):
        timings = service.suggest(SuggestRequest(requests[0].body, mode="two_pass", n=5, m=50)).timings
        assert set(timings) == {"encode_us", "search_us", "rescore_us", "format_us", "total_us"}
        assert timings["total_us"] >= timings["search_us"] >= 0

    @pytest.mark.parametrize("mode", ["exhaustive", "two_pass", "single_pass"])
    def test_stages_add_up_to_total(self, service, requests, mode):
        for req in requests:
            timings = service.suggest(SuggestRequest(req.body, req.subject, mode=mode, n=5, m=50)).timings
            total = timings.pop("total_us")
            assert abs(sum(timings.values()) - total) <= 0.05 * total

    def test_untriggered_request(self, service):
        result = service.suggest(SuggestRequest("hi", trigger=False))
        assert result.suggestions == []


class TestStaleArtifacts:
    """Tests for artifact consistency checks"""

    def test_index_from_other_response_set(self, response_set, index):
        stale = HQIndex(index.books, index.quantized, index.vectors, source_hash="0" * 64)
        with pytest.raises(StaleArtifactError):
            check_index(stale, response_set)

    def test_service_rejects_retrained_encoder(self, response_set, vocab):
        other = DotProductEncoder.build(len(vocab), 16, [16], [16], FEATURES, seed=99)
        with pytest.raises(StaleArtifactError):
            SuggestionService(response_set, vocab, encoder=other)

    def test_single_pass_verifies(self, response_set, index, encoder, vocab):
        stale = HQIndex(index.books, index.quantized, index.vectors, source_hash="")
        with pytest.raises(StaleArtifactError):
            suggest_single_pass(SuggestRequest("hi"), encoder, stale, response_set, vocab)

    def test_missing_model_for_mode(self, response_set, vocab, encoder):
        service = SuggestionService(response_set, vocab, encoder=encoder)
        with pytest.raises(InvariantViolation):
            service.suggest(SuggestRequest("hi", mode="exhaustive"))


class TestHandleLine:
    """Tests for the line protocol"""

    def test_answer(self, service):
        out = json.loads(service.handle_line('{"body": "are you free tomorrow", "n": 3}', {"mode": "two_pass"}))
        assert out["mode"] == "two_pass"
        assert len(out["suggestions"]) == 3
        assert set(out["suggestions"][0]) == {"id", "response", "model_score", "bias", "final_score"}

    def test_request_overrides_defaults(self, service):
        out = json.loads(service.handle_line('{"body": "x", "mode": "exhaustive", "n": 2}', {"mode": "two_pass"}))
        assert out["mode"] == "exhaustive"

    def test_invalid_json(self, service):
        with pytest.raises(InvariantViolation):
            service.handle_line("{not json")

    def test_not_an_object(self, service):
        with pytest.raises(InvariantViolation):
            service.handle_line("[1, 2]")


class TestLatencyBench:
    """Tests for the per-architecture latency comparison"""

    def test_relative_to_exhaustive(self, service, requests):
        reqs = [SuggestRequest(r.body, r.subject, n=10, m=50) for r in requests[:5]]
        results = architecture_latency_bench(service, reqs, ("exhaustive", "two_pass", "single_pass"), repeats=1)
        assert set(results) == {"exhaustive", "two_pass", "single_pass"}
        assert results["exhaustive"]["relative_to_exhaustive"] == pytest.approx(1.0)
        assert all(row["median_us"] > 0 for row in results.values())

    def test_empty_requests(self, service):
        with pytest.raises(InvariantViolation):
            architecture_latency_bench(service, [], ("exhaustive",))
