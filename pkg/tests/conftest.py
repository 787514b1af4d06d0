"""Shared fixtures for the ReplySonor tests."""

import numpy as np
import pytest

from replysonor.corpus import SyntheticCorpus
from replysonor.featurizer import FeatureBag, NGramVocabulary, build_vocabulary
from replysonor.trainer import TrainingBatch, TrainingExample

FEATURES = ("body", "subject")


def random_bag(rng: np.random.Generator, vocab_size: int, field: str = "body", max_items: int = 4) -> FeatureBag:
    """A non-empty bag of distinct random ids with small counts."""
    size = int(rng.integers(1, max_items + 1))
    ids = np.sort(rng.choice(vocab_size, size=min(size, vocab_size), replace=False))
    return FeatureBag(tuple((int(i), int(rng.integers(1, 3))) for i in ids), field)


def random_batch(rng: np.random.Generator, vocab_size: int, k: int, features=FEATURES) -> TrainingBatch:
    examples = [
        TrainingExample([random_bag(rng, vocab_size, f) for f in features], random_bag(rng, vocab_size, "response"))
        for _ in range(k)
    ]
    return TrainingBatch.from_examples(examples)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_records():
    """Three unambiguous message/response pairs."""
    return [
        {"body": "are you coming to the party tonight", "subject": "party", "response": "Yes, I'll be there."},
        {"body": "can you send me the report", "subject": "report", "response": "Sure, sending it now."},
        {"body": "thanks for the help yesterday", "response": "You're welcome!"},
    ]


@pytest.fixture
def toy_vocab(toy_records):
    texts = []
    for r in toy_records:
        texts.extend([r["body"], r.get("subject") or "", r["response"]])
    return build_vocabulary(texts, max_n=2, size_cap=1000, min_count=1)


@pytest.fixture(scope="session")
def small_synthetic():
    """A small topic corpus: 2000 pairs over 10 topics."""
    return SyntheticCorpus(num_topics=10, words_per_topic=20, responses_per_topic=3, filler_words=60, seed=7).generate(2000)


@pytest.fixture(scope="session")
def small_vocab(small_synthetic):
    texts = []
    for r in small_synthetic:
        texts.extend([r["body"], r.get("subject") or "", r["response"]])
    return build_vocabulary(texts, max_n=2, size_cap=5000, min_count=2)


@pytest.fixture
def empty_vocab():
    return NGramVocabulary([], [], 2, 10)
