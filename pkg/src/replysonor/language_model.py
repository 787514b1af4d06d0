"""
Response prior: a smoothed bigram language model over response texts and the
biased final score ``S_f(x, y) = S_m(x, y) + alpha * log P_LM(y)``.
"""

import hashlib
import logging
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .config import BiasConfig
from .errors import ArtifactFormatError, EmptyInputError, InvariantViolation
from .featurizer import tokenize

logger = logging.getLogger(__name__)

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"

LM_HEADER = "#bigram-lm v1 k={k!r} vocab={vocab}"
ALPHA_GRID = (0.0, 0.1, 0.25, 0.5, 1.0)


class BigramLM:
    """Add-k smoothed word bigram model with sentence boundaries and an unknown-word class."""

    def __init__(self, unigrams: Dict[str, int], bigrams: Dict[Tuple[str, str], int], k: float):
        """
        Initialize from raw counts.

        Args:
            unigrams: Count of every predicted token (words and ``</s>``)
            bigrams: Count of every (context, token) transition; contexts include ``<s>``
            k: Additive smoothing constant, > 0
        """
        if k <= 0:
            raise InvariantViolation(f"smoothing constant must be > 0, got {k}")
        self.k = float(k)
        self.unigrams = dict(unigrams)
        self.bigrams = dict(bigrams)
        # predicted symbols: every seen token plus <unk>
        self.vocab = sorted(set(self.unigrams) | {UNK})
        self._vocab_set = set(self.vocab)
        self._context_totals: Dict[str, int] = defaultdict(int)
        for (context, _), count in self.bigrams.items():
            self._context_totals[context] += count

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def _map(self, token: str) -> str:
        return token if token in self._vocab_set else UNK

    def cond_prob(self, token: str, context: str) -> float:
        """P(token | context) with add-k smoothing; unseen contexts are uniform."""
        if context != BOS:
            context = self._map(context)
        token = self._map(token)
        num = self.bigrams.get((context, token), 0) + self.k
        return num / (self._context_totals.get(context, 0) + self.k * self.vocab_size)

    def logprob(self, text: str) -> float:
        """Log-probability of a whole response including both boundary transitions."""
        tokens = [BOS] + tokenize(text) + [EOS]
        return float(sum(math.log(self.cond_prob(w, prev)) for prev, w in zip(tokens, tokens[1:])))

    # ---- persistence -------------------------------------------------------

    def to_text(self) -> str:
        lines = [LM_HEADER.format(k=self.k, vocab=self.vocab_size), "[unigrams]"]
        for token in sorted(self.unigrams):
            lines.append(f"{token}\t{self.unigrams[token]}")
        lines.append("[bigrams]")
        for (context, token) in sorted(self.bigrams):
            lines.append(f"{context}\t{token}\t{self.bigrams[(context, token)]}")
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path: Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.to_text())

    @classmethod
    def load(cls, path: Path) -> "BigramLM":
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
        match = re.fullmatch(r"#bigram-lm v1 k=([^ ]+) vocab=(\d+)", lines[0] if lines else "")
        if not match:
            raise ArtifactFormatError(f"{path}: bad language model header")
        unigrams: Dict[str, int] = {}
        bigrams: Dict[Tuple[str, str], int] = {}
        section = None
        for lineno, line in enumerate(lines[1:], start=2):
            if line in ("[unigrams]", "[bigrams]"):
                section = line
                continue
            parts = line.split("\t")
            if section == "[unigrams]" and len(parts) == 2:
                unigrams[parts[0]] = int(parts[1])
            elif section == "[bigrams]" and len(parts) == 3:
                bigrams[(parts[0], parts[1])] = int(parts[2])
            else:
                raise ArtifactFormatError(f"{path}:{lineno}: malformed language model entry")
        lm = cls(unigrams, bigrams, float(match.group(1)))
        if lm.vocab_size != int(match.group(2)):
            raise ArtifactFormatError(f"{path}: vocabulary size does not match header")
        return lm


def train_lm(responses: Iterable[str], k: float = 0.1) -> BigramLM:
    """
    Count unigrams and bigrams over response texts.

    Args:
        responses: Response strings (one sentence each)
        k: Additive smoothing constant

    Returns:
        BigramLM
    """
    unigrams: Counter = Counter()
    bigrams: Counter = Counter()
    sentences = 0
    for text in responses:
        tokens = tokenize(text) + [EOS]
        unigrams.update(tokens)
        bigrams.update(zip([BOS] + tokens[:-1], tokens))
        sentences += 1
    if not sentences:
        raise EmptyInputError("cannot train a language model on an empty corpus")
    lm = BigramLM(dict(unigrams), dict(bigrams), k)
    logger.info("language model: %d sentences, %d words, %d bigrams", sentences, lm.vocab_size, len(bigrams))
    return lm


def lm_logprob(y: str, lm: BigramLM) -> float:
    return lm.logprob(y)


def final_score(s_m: float, logp: float, cfg: BiasConfig) -> float:
    """Model score plus the weighted response prior."""
    return s_m + cfg.alpha * logp


def extend_vectors(h_x: np.ndarray, h_y: np.ndarray, logp: float, cfg: BiasConfig):
    """
    Fold the bias into one dot product: ``h_x ++ [alpha]`` and ``h_y ++ [logp]``.

    Returns:
        (extended h_x, extended h_y) as float64 vectors
    """
    h_x = np.asarray(h_x, dtype=np.float64)
    h_y = np.asarray(h_y, dtype=np.float64)
    if h_x.shape != h_y.shape:
        raise InvariantViolation(f"dimension mismatch: {h_x.shape} vs {h_y.shape}")
    return np.append(h_x, cfg.alpha), np.append(h_y, logp)


@dataclass(frozen=True)
class BiasedResponseSet:
    """Response encodings with their LM log-probabilities."""

    responses: Tuple[str, ...]
    encodings: np.ndarray
    logprobs: np.ndarray

    def __post_init__(self):
        if self.encodings.shape[0] != len(self.responses) or self.logprobs.shape != (len(self.responses),):
            raise InvariantViolation("encodings and log-probabilities must align with responses")
        if not np.all(np.isfinite(self.logprobs)) or np.any(self.logprobs > 0):
            raise InvariantViolation("log-probabilities must be finite and <= 0")

    @classmethod
    def build(
        cls, responses: Sequence[str], encodings: np.ndarray, lm: Optional[BigramLM]
    ) -> "BiasedResponseSet":
        """Score every response with ``lm``; no model gives a zero column."""
        if lm is None:
            logprobs = np.zeros(len(responses))
        else:
            logprobs = np.array([lm_logprob(r, lm) for r in responses], dtype=np.float64)
        return cls(tuple(responses), encodings, logprobs)

    @property
    def extended(self) -> np.ndarray:
        """(n, d + 1) encodings with the log-probability column appended."""
        return np.hstack([self.encodings.astype(np.float64), self.logprobs[:, None]])


def select_alpha(
    base_scorer,
    eval_set,
    logprobs: np.ndarray,
    eval_cfg,
    grid: Sequence[float] = ALPHA_GRID,
):
    """
    Grid-search the bias weight on held-out P@1.

    Args:
        base_scorer: Pair scorer returning model scores S_m
        eval_set: Held-out EvalSet
        logprobs: log P_LM of every response of ``eval_set``
        eval_cfg: EvalConfig for the P@1 protocol
        grid: Candidate weights

    Returns:
        (best alpha, {alpha: P@1}); ties go to the smaller alpha
    """
    from .evaluation import biased_scorer, p_at_1

    results: Dict[float, float] = {}
    for alpha in sorted(grid):
        results[alpha] = p_at_1(biased_scorer(base_scorer, logprobs, alpha), eval_set, eval_cfg)
        logger.info("alpha %.2f: P@1 %.4f", alpha, results[alpha])
    best = max(results, key=lambda a: (results[a], -a))
    return best, results
