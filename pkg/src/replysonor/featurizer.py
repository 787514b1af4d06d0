"""
Text featurization: tokenization, n-gram extraction and the n-gram vocabulary.

Messages are lowercased, split into word and punctuation tokens, and URLs,
e-mail addresses, phone numbers and numbers are replaced by special tokens.
A message field is then represented as a bag of in-vocabulary n-grams.
"""

import hashlib
import logging
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .errors import ArtifactFormatError, InvariantViolation

logger = logging.getLogger(__name__)

URL_TOKEN = "<url>"
EMAIL_TOKEN = "<email>"
PHONE_TOKEN = "<phone>"
NUM_TOKEN = "<num>"
SPECIAL_TOKENS = (URL_TOKEN, EMAIL_TOKEN, PHONE_TOKEN, NUM_TOKEN)

# Joins the tokens of an n-gram; whitespace never occurs inside a token.
NGRAM_SEPARATOR = " "

VOCAB_HEADER = "#vocab v1 max_n={max_n}"

_TOKEN_RE = re.compile(
    r"""
      (?P<special><url>|<email>|<phone>|<num>)
    | (?P<url>(?:[a-z][a-z0-9+.\-]*://|www\.)\S+?(?=[.,!?;:)\]'"]*(?:\s|$)))
    | (?P<email>[\w.+\-]+@[\w\-]+(?:\.[\w\-]+)+)
    | (?P<phone>(?:\+?\d{7,}|\+?(?:\d{1,3}[\s\-.])?\(?\d{3}\)?[\s\-.]?\d{3}[\s\-.]\d{4}|\d{3}-\d{4})(?![^\W_]))
    | (?P<num>\d+(?:[.,]\d+)*(?![^\W_]))
    | (?P<word>[^\W_]+(?:'[^\W_]+)*)
    | (?P<punct>[^\w\s])
    | (?P<under>_)
    """,
    re.VERBOSE,
)

_REPLACEMENTS = {"url": URL_TOKEN, "email": EMAIL_TOKEN, "phone": PHONE_TOKEN, "num": NUM_TOKEN}

_WROTE_RE = re.compile(r"^\s*on\b.*\bwrote:\s*$", re.IGNORECASE)
_FORWARD_MARKERS = ("-----original message-----", "---------- forwarded message")


def strip_quoted_text(text: str) -> str:
    """
    Remove quoted reply/forward text from a message body.

    Lines starting with ">" are dropped, and everything from an
    "On ... wrote:" line or an original/forwarded message marker onwards.
    """
    kept = []
    for line in text.splitlines():
        lowered = line.strip().lower()
        if _WROTE_RE.match(line) or lowered.startswith(_FORWARD_MARKERS):
            break
        if line.lstrip().startswith(">"):
            continue
        kept.append(line)
    return "\n".join(kept)


def tokenize(text: str) -> List[str]:
    """
    Split text into lowercase word and punctuation tokens.

    Args:
        text: Raw message text (may be empty)

    Returns:
        Token list; URL/email/phone/number spans become special tokens
    """
    tokens = []
    for match in _TOKEN_RE.finditer(text.lower()):
        group = match.lastgroup
        tokens.append(_REPLACEMENTS.get(group, match.group(group)))
    return tokens


def extract_ngrams(tokens: Sequence[str], max_n: int) -> List[str]:
    """
    List every contiguous n-gram of order 1..max_n, multiplicities preserved.

    Args:
        tokens: Token sequence
        max_n: Highest n-gram order

    Returns:
        N-gram strings, unigrams first, then bigrams, and so on
    """
    if max_n < 1:
        raise InvariantViolation(f"max_n must be >= 1, got {max_n}")
    grams = []
    for n in range(1, max_n + 1):
        for start in range(len(tokens) - n + 1):
            grams.append(NGRAM_SEPARATOR.join(tokens[start:start + n]))
    return grams


@dataclass(frozen=True)
class FeatureBag:
    """Bag of n-gram ids for one message field, sorted by id."""

    items: Tuple[Tuple[int, int], ...] = ()
    source_field: str = "body"

    def __len__(self) -> int:
        return len(self.items)

    @property
    def ids(self) -> List[int]:
        return [i for i, _ in self.items]

    @property
    def counts(self) -> List[int]:
        return [c for _, c in self.items]

    def scaled(self, factor: int) -> "FeatureBag":
        """Return the bag with every count multiplied by ``factor``."""
        return FeatureBag(tuple((i, c * factor) for i, c in self.items), self.source_field)


class NGramVocabulary:
    """Frequency-ranked n-gram vocabulary with dense ids."""

    def __init__(self, ngrams: Sequence[str], counts: Sequence[int], max_n: int, size_cap: int):
        """
        Initialize vocabulary from n-grams already in id order.

        Args:
            ngrams: N-gram strings; position is the id
            counts: Corpus frequency per id
            max_n: Highest n-gram order used at build time
            size_cap: Maximum vocabulary size
        """
        if len(ngrams) != len(counts):
            raise InvariantViolation("ngrams and counts must align")
        if len(ngrams) > size_cap:
            raise InvariantViolation(f"{len(ngrams)} entries exceed size_cap {size_cap}")
        self.entries: Dict[str, int] = {gram: i for i, gram in enumerate(ngrams)}
        if len(self.entries) != len(ngrams):
            raise InvariantViolation("duplicate n-grams in vocabulary")
        self.ngrams: List[str] = list(ngrams)
        self.counts: List[int] = [int(c) for c in counts]
        self.max_n = max_n
        self.size_cap = size_cap

    def __len__(self) -> int:
        return len(self.ngrams)

    def __contains__(self, ngram: str) -> bool:
        return ngram in self.entries

    def get(self, ngram: str) -> Optional[int]:
        return self.entries.get(ngram)

    def to_text(self) -> str:
        lines = [VOCAB_HEADER.format(max_n=self.max_n)]
        for i, (gram, count) in enumerate(zip(self.ngrams, self.counts)):
            lines.append(f"{gram}\t{i}\t{count}")
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        """SHA-256 of the serialized vocabulary."""
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path: Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.to_text())

    @classmethod
    def load(cls, path: Path, size_cap: Optional[int] = None) -> "NGramVocabulary":
        """
        Load a vocabulary file.

        Args:
            path: Vocabulary file written by :meth:`save`
            size_cap: Cap to record; defaults to the entry count

        Returns:
            The vocabulary
        """
        with open(path, "r", encoding="utf-8") as f:
            header = f.readline().rstrip("\n")
            match = re.fullmatch(r"#vocab v1 max_n=(\d+)", header)
            if not match:
                raise ArtifactFormatError(f"{path}: bad vocabulary header {header!r}")
            ngrams, counts = [], []
            for lineno, line in enumerate(f, start=2):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3 or int(parts[1]) != len(ngrams):
                    raise ArtifactFormatError(f"{path}:{lineno}: malformed vocabulary entry")
                ngrams.append(parts[0])
                counts.append(int(parts[2]))
        cap = size_cap if size_cap is not None else max(len(ngrams), 1)
        return cls(ngrams, counts, int(match.group(1)), cap)


def count_ngrams(corpus: Iterable[str], max_n: int) -> Counter:
    """Count n-grams over a stream of texts."""
    counter: Counter = Counter()
    for text in corpus:
        counter.update(extract_ngrams(tokenize(text), max_n))
    return counter


def build_vocabulary(
    corpus: Iterable[str], max_n: int = 2, size_cap: int = 200_000, min_count: int = 2
) -> NGramVocabulary:
    """
    Build a vocabulary of the most frequent n-grams.

    Ranking is by descending frequency, ties broken lexicographically; ids follow
    the ranking.

    Args:
        corpus: Stream of texts
        max_n: Highest n-gram order
        size_cap: Maximum number of entries
        min_count: Minimum corpus frequency to be retained

    Returns:
        The vocabulary (possibly empty)
    """
    if size_cap < 1 or min_count < 1:
        raise InvariantViolation("size_cap and min_count must be >= 1")
    counter = count_ngrams(corpus, max_n)
    eligible = [(gram, c) for gram, c in counter.items() if c >= min_count]
    eligible.sort(key=lambda item: (-item[1], item[0]))
    kept = eligible[:size_cap]
    logger.info(
        "vocabulary: %d distinct n-grams, %d above min_count=%d, kept %d",
        len(counter), len(eligible), min_count, len(kept),
    )
    return NGramVocabulary([g for g, _ in kept], [c for _, c in kept], max_n, size_cap)


def featurize(text: str, vocab: NGramVocabulary, source_field: str = "body") -> FeatureBag:
    """
    Represent text as a bag of in-vocabulary n-gram ids.

    Args:
        text: Raw text
        vocab: Vocabulary (its ``max_n`` is used)
        source_field: Message field the text came from

    Returns:
        FeatureBag; out-of-vocabulary n-grams are dropped
    """
    counts: Counter = Counter()
    for gram in extract_ngrams(tokenize(text), vocab.max_n):
        idx = vocab.entries.get(gram)
        if idx is not None:
            counts[idx] += 1
    return FeatureBag(tuple(sorted(counts.items())), source_field)


def featurize_message(
    record: Mapping[str, str], vocab: NGramVocabulary, features: Sequence[str] = ("body", "subject")
) -> List[FeatureBag]:
    """
    Featurize the input side of a record, one bag per feature in order.

    Missing optional fields give empty bags; bodies are stripped of quoted text.
    """
    bags = []
    for name in features:
        text = record.get(name) or ""
        if name == "body":
            text = strip_quoted_text(text)
        bags.append(featurize(text, vocab, name))
    return bags
