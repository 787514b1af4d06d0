"""
Corpus handling: JSONL message/response pairs, the synthetic topic corpus,
selection of the fixed response set, and a Gaussian-mixture vector surrogate.
"""

import json
import logging
import re
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyInputError, InvariantViolation
from .featurizer import NGramVocabulary, featurize, featurize_message, strip_quoted_text
from .trainer import TrainingExample

logger = logging.getLogger(__name__)

Record = Dict[str, object]

_SPACE_RE = re.compile(r"\s+")

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st", "tr")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ou")
_OPENERS = (
    "sure", "thanks", "sounds good", "yes", "no problem", "ok", "great",
    "will do", "sorry", "got it",
)


def read_jsonl(path: Path) -> List[Record]:
    """
    Read message/response records, one JSON object per line.

    Args:
        path: JSONL file with ``body``, optional ``subject`` and ``response``

    Returns:
        Records in file order (blank lines skipped)
    """
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise InvariantViolation(f"{path}:{lineno}: invalid JSON ({e.msg})") from e
            if not isinstance(record, dict) or "body" not in record:
                raise InvariantViolation(f"{path}:{lineno}: record needs a 'body' field")
            records.append(record)
    logger.info("read %d records from %s", len(records), path)
    return records


def write_jsonl(records: Iterable[Record], path: Path) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
            count += 1
    return count


def iter_texts(records: Iterable[Record], features: Sequence[str] = ("body", "subject")) -> Iterator[str]:
    """Yield every input field and response text of the records."""
    for record in records:
        for name in features:
            text = record.get(name) or ""
            if name == "body":
                text = strip_quoted_text(text)
            if text:
                yield text
        if record.get("response"):
            yield record["response"]


def normalize_response(text: str) -> str:
    return _SPACE_RE.sub(" ", text.strip()).lower()


def select_response_set(
    records: Iterable[Record], size: int, min_count: int = 1
) -> List[str]:
    """
    Pick the most common responses as the fixed suggestion set.

    Responses are grouped by normalized text; the first surface form seen
    represents each group. Ranking is by count, ties by normalized text.

    Args:
        records: Records with a ``response`` field
        size: Maximum number of responses
        min_count: Minimum occurrences to be eligible

    Returns:
        Ordered response strings; the position is the response id
    """
    counts: Counter = Counter()
    surface: Dict[str, str] = {}
    for record in records:
        text = record.get("response")
        if not text:
            continue
        key = normalize_response(text)
        counts[key] += 1
        surface.setdefault(key, text.strip())
    ranked = sorted((k for k, c in counts.items() if c >= min_count), key=lambda k: (-counts[k], k))
    chosen = [surface[k] for k in ranked[:size]]
    if not chosen:
        raise EmptyInputError("no responses meet the selection threshold")
    logger.info("selected %d of %d distinct responses", len(chosen), len(counts))
    return chosen


def featurize_dataset(
    records: Sequence[Record], vocab: NGramVocabulary, features: Sequence[str] = ("body", "subject")
) -> List[TrainingExample]:
    """Featurize records into training examples (input bags per feature, response bag)."""
    examples = []
    for record in records:
        x_bags = featurize_message(record, vocab, features)
        y_bag = featurize(record.get("response") or "", vocab, "response")
        examples.append(TrainingExample(x_bags, y_bag))
    return examples


# --------------------------------------------------------------------------
# Synthetic topic corpus
# --------------------------------------------------------------------------


def _make_words(rng: np.random.Generator, count: int, taken: set) -> List[str]:
    words = []
    while len(words) < count:
        syllables = rng.integers(2, 4)
        word = "".join(
            _ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
            for _ in range(syllables)
        )
        if word not in taken:
            taken.add(word)
            words.append(word)
    return words


class SyntheticCorpus:
    """
    Seeded generator of topic-clustered message/response pairs.

    Every topic owns a pool of message words and a few canonical responses;
    a pair's response is drawn from the topic of its message. Messages mix
    topic words with shared filler words.
    """

    def __init__(
        self,
        num_topics: int = 50,
        words_per_topic: int = 30,
        responses_per_topic: int = 4,
        filler_words: int = 200,
        seed: int = 0,
    ):
        if num_topics < 1 or words_per_topic < 1 or responses_per_topic < 1:
            raise InvariantViolation("topic counts must be >= 1")
        self.seed = seed
        rng = np.random.default_rng(seed)
        taken: set = set()
        self.fillers = _make_words(rng, filler_words, taken)
        self.topic_words: List[List[str]] = []
        self.topic_responses: List[List[str]] = []
        for _ in range(num_topics):
            words = _make_words(rng, words_per_topic, taken)
            self.topic_words.append(words)
            responses = []
            while len(responses) < responses_per_topic:
                opener = _OPENERS[rng.integers(len(_OPENERS))]
                picks = rng.choice(len(words), size=2, replace=False)
                text = f"{opener}, {words[picks[0]]} {words[picks[1]]}.".capitalize()
                if text not in responses:
                    responses.append(text)
            self.topic_responses.append(responses)

    @property
    def num_topics(self) -> int:
        return len(self.topic_words)

    def responses(self) -> List[str]:
        """Every canonical response, topic by topic."""
        return [r for group in self.topic_responses for r in group]

    def generate(self, num_pairs: int, topic_fraction: float = 0.6) -> List[Record]:
        """
        Draw ``num_pairs`` records.

        Args:
            num_pairs: Number of records
            topic_fraction: Share of message words taken from the topic pool

        Returns:
            Records with body, subject, response and topic fields
        """
        rng = np.random.default_rng(self.seed + 1)
        records = []
        for _ in range(num_pairs):
            topic = int(rng.integers(self.num_topics))
            words = self.topic_words[topic]
            length = int(rng.integers(6, 16))
            body = [
                words[rng.integers(len(words))] if rng.random() < topic_fraction
                else self.fillers[rng.integers(len(self.fillers))]
                for _ in range(length)
            ]
            subject: Optional[str] = None
            if rng.random() < 0.8:
                subject = " ".join(words[rng.integers(len(words))] for _ in range(rng.integers(1, 4)))
            responses = self.topic_responses[topic]
            record: Record = {
                "body": " ".join(body) + ".",
                "response": responses[rng.integers(len(responses))],
                "topic": topic,
            }
            if subject:
                record["subject"] = subject
            records.append(record)
        return records


def synthetic_corpus(num_pairs: int = 20_000, num_topics: int = 50, seed: int = 0) -> List[Record]:
    """Shorthand for :meth:`SyntheticCorpus.generate` with default topic sizes."""
    return SyntheticCorpus(num_topics=num_topics, seed=seed).generate(num_pairs)


def gaussian_mixture(
    num_vectors: int, num_queries: int, d: int = 64, clusters: int = 64,
    spread: float = 0.35, seed: int = 0,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Seeded surrogate for encoder outputs: points around random unit centers.

    Returns:
        (vectors, queries) as float32 arrays drawn from the same mixture
    """
    if num_vectors < 1 or d < 1 or clusters < 1:
        raise InvariantViolation("mixture sizes must be >= 1")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((clusters, d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)

    def draw(count: int) -> np.ndarray:
        which = rng.integers(clusters, size=count)
        noise = rng.standard_normal((count, d)) * (spread / np.sqrt(d))
        return (centers[which] + noise).astype(np.float32)

    return draw(num_vectors), draw(num_queries)
