"""Tests for corpus I/O, response selection and synthetic data."""

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from replysonor.corpus import (
    SyntheticCorpus,
    featurize_dataset,
    gaussian_mixture,
    iter_texts,
    normalize_response,
    read_jsonl,
    select_response_set,
    synthetic_corpus,
    write_jsonl,
)
from replysonor.errors import EmptyInputError, InvariantViolation


class TestJsonl:
    """Tests for the record format"""

    def test_write_read(self, tmp_path, toy_records):
        path = tmp_path / "pairs.jsonl"
        assert write_jsonl(toy_records, path) == 3
        assert read_jsonl(path) == toy_records

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "pairs.jsonl"
        path.write_text('{"body": "a"}\n\n{"body": "b"}\n', encoding="utf-8")
        assert [r["body"] for r in read_jsonl(path)] == ["a", "b"]

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "pairs.jsonl"
        path.write_text('{"body": "a"}\n{oops\n', encoding="utf-8")
        with pytest.raises(InvariantViolation, match=":2:"):
            read_jsonl(path)

    def test_missing_body(self, tmp_path):
        path = tmp_path / "pairs.jsonl"
        path.write_text('{"response": "a"}\n', encoding="utf-8")
        with pytest.raises(InvariantViolation):
            read_jsonl(path)

    def test_iter_texts(self, toy_records):
        texts = list(iter_texts(toy_records))
        assert texts[:3] == ["are you coming to the party tonight", "party", "Yes, I'll be there."]
        assert len(texts) == 8


class TestResponseSelection:
    """Tests for choosing the suggestion set"""

    def test_frequency_order(self):
        records = [{"body": "x", "response": r} for r in ["Ok.", "Sure", "ok.", "Thanks", "sure", "OK."]]
        assert select_response_set(records, 10) == ["Ok.", "Sure", "Thanks"]

    def test_size_and_threshold(self):
        records = [{"body": "x", "response": r} for r in ["a", "a", "b", "b", "c"]]
        assert select_response_set(records, 1) == ["a"]
        assert select_response_set(records, 10, min_count=2) == ["a", "b"]

    def test_none_eligible(self):
        with pytest.raises(EmptyInputError):
            select_response_set([{"body": "x", "response": "a"}], 10, min_count=2)

    def test_normalize(self):
        assert normalize_response("  Sounds   GOOD ") == "sounds good"


class TestSyntheticCorpus:
    """Tests for the seeded topic generator"""

    def test_deterministic(self):
        assert synthetic_corpus(200, 5, seed=3) == synthetic_corpus(200, 5, seed=3)
        assert synthetic_corpus(200, 5, seed=3) != synthetic_corpus(200, 5, seed=4)

    def test_responses_follow_topics(self):
        corpus = SyntheticCorpus(num_topics=5, responses_per_topic=3, seed=1)
        for record in corpus.generate(300):
            assert record["response"] in corpus.topic_responses[record["topic"]]
            assert record["body"]

    def test_distinct_responses(self):
        corpus = SyntheticCorpus(num_topics=20, responses_per_topic=4, seed=2)
        assert len(set(corpus.responses())) == 80

    def test_invalid_sizes(self):
        with pytest.raises(InvariantViolation):
            SyntheticCorpus(num_topics=0)

    def test_featurize_dataset(self, small_synthetic, small_vocab):
        examples = featurize_dataset(small_synthetic[:50], small_vocab)
        assert len(examples) == 50
        assert all(len(e.x_bags) == 2 and e.y_bag.source_field == "response" for e in examples)

    def test_gaussian_mixture(self):
        vectors, queries = gaussian_mixture(100, 10, d=8, clusters=4, seed=0)
        assert vectors.shape == (100, 8) and queries.shape == (10, 8)
        assert vectors.dtype == np.float32
        again, _ = gaussian_mixture(100, 10, d=8, clusters=4, seed=0)
        assert_array_equal(vectors, again)
        with pytest.raises(InvariantViolation):
            gaussian_mixture(0, 1)
