"""
Suggestion serving over a fixed response set.

Three architectures answer the same request:

* ``exhaustive``: joint-score every response.
* ``two_pass``: dot-product scoring picks an M-best list that the joint
  scorer rescores.
* ``single_pass``: dot-product scoring through the quantized index only.

Every mode ranks by ``S_m + alpha * log P_LM(y)``, ties to the lower response id.
"""

import hashlib
import io
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import BiasConfig, HQConfig
from .encoder import DotProductEncoder, JointScorer, embed_bags
from .errors import ArtifactFormatError, EmptyInputError, InvariantViolation, StaleArtifactError
from .featurizer import FeatureBag, NGramVocabulary, featurize, featurize_message
from .hq_index import HQIndex, bias_terms, exact_scores
from .language_model import BiasedResponseSet, BigramLM
from .topk import top_n

logger = logging.getLogger(__name__)

MODES = ("exhaustive", "two_pass", "single_pass")
DEFAULT_N = 100
DEFAULT_M = 500

RS_MAGIC = b"SRRS"
RS_VERSION = 1
STAGES = ("encode_us", "search_us", "rescore_us", "format_us")


@dataclass(frozen=True)
class ResponseSet:
    """The fixed suggestion set with precomputed encodings and log-probabilities."""

    responses: Tuple[str, ...]
    bags: Tuple[FeatureBag, ...]
    encodings: np.ndarray
    logprobs: np.ndarray
    joint_embeds: Optional[np.ndarray] = None
    encoder_hash: str = ""
    joint_hash: str = ""
    vocab_hash: str = ""

    def __post_init__(self):
        n = len(self.responses)
        if not n:
            raise EmptyInputError("the response set is empty")
        if self.encodings.shape[0] != n or self.logprobs.shape != (n,) or len(self.bags) != n:
            raise InvariantViolation("encodings, bags and log-probabilities must align with responses")
        self.biased()
        if self.joint_embeds is not None and self.joint_embeds.shape[0] != n:
            raise InvariantViolation("joint embeddings must align with responses")

    def __len__(self) -> int:
        return len(self.responses)

    @property
    def d(self) -> int:
        return self.encodings.shape[1]

    def biased(self) -> BiasedResponseSet:
        """The texts, encodings and log-probabilities as a validated bias view."""
        return BiasedResponseSet(self.responses, self.encodings, self.logprobs)

    def bias(self, alpha: float) -> np.ndarray:
        """Single-precision bias column used by the dot-product paths."""
        return bias_terms(self.logprobs, alpha, len(self))

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(RS_MAGIC)
        joint_dim = 0 if self.joint_embeds is None else self.joint_embeds.shape[1]
        buf.write(struct.pack("<IIII", RS_VERSION, len(self), self.d, joint_dim))
        for digest in (self.encoder_hash, self.joint_hash, self.vocab_hash):
            buf.write(digest.encode("ascii").ljust(64, b"\0")[:64])
        for text, bag in zip(self.responses, self.bags):
            raw = text.encode("utf-8")
            buf.write(struct.pack("<II", len(raw), len(bag)))
            buf.write(raw)
            if len(bag):
                buf.write(np.asarray(bag.items, dtype="<u4").tobytes())
        buf.write(np.ascontiguousarray(self.logprobs, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(self.encodings, dtype="<f4").tobytes())
        if self.joint_embeds is not None:
            buf.write(np.ascontiguousarray(self.joint_embeds, dtype="<f4").tobytes())
        return buf.getvalue()

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path: Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: Path) -> "ResponseSet":
        buf = io.BytesIO(Path(path).read_bytes())
        if buf.read(4) != RS_MAGIC:
            raise ArtifactFormatError(f"{path}: not a response set file (bad magic)")
        version, n, d, joint_dim = struct.unpack("<IIII", buf.read(16))
        if version != RS_VERSION:
            raise ArtifactFormatError(f"{path}: unsupported response set version {version}")
        hashes = [buf.read(64).rstrip(b"\0").decode("ascii") for _ in range(3)]
        responses, bags = [], []
        for _ in range(n):
            length, items = struct.unpack("<II", buf.read(8))
            responses.append(buf.read(length).decode("utf-8"))
            pairs = np.frombuffer(buf.read(8 * items), dtype="<u4").reshape(items, 2)
            bags.append(FeatureBag(tuple((int(i), int(c)) for i, c in pairs), "response"))
        logprobs = np.frombuffer(buf.read(8 * n), dtype="<f8").astype(np.float64)
        encodings = np.frombuffer(buf.read(4 * n * d), dtype="<f4").reshape(n, d).astype(np.float32)
        joint = None
        if joint_dim:
            joint = np.frombuffer(buf.read(4 * n * joint_dim), dtype="<f4").reshape(n, joint_dim)
            joint = joint.astype(np.float32)
        return cls(tuple(responses), tuple(bags), encodings, logprobs, joint, *hashes)


def precompute_responses(
    responses: Sequence[str],
    encoder: DotProductEncoder,
    lm: Optional[BigramLM],
    vocab: NGramVocabulary,
    joint: Optional[JointScorer] = None,
) -> ResponseSet:
    """
    Encode the response set once.

    Args:
        responses: Ordered response strings; the position is the response id
        encoder: Dot-product model (response towers)
        lm: Language model for the bias column (None gives zero bias)
        vocab: Vocabulary the models were trained with
        joint: Optional joint scorer whose response embeddings are cached too

    Returns:
        ResponseSet
    """
    if not responses:
        raise EmptyInputError("the response set is empty")
    bags = tuple(featurize(text, vocab, "response") for text in responses)
    encodings, _ = encoder.encode_responses(list(bags))
    logprobs = BiasedResponseSet.build(responses, encodings, lm).logprobs
    joint_embeds = None
    joint_hash = ""
    if joint is not None:
        joint_embeds = embed_bags(list(bags), joint.response_embeddings).astype(np.float32)
        joint_hash = joint.content_hash()
    logger.info("encoded %d responses (dimension %d)", len(responses), encodings.shape[1])
    return ResponseSet(
        tuple(responses), bags, encodings.astype(np.float32), logprobs.astype(np.float64),
        joint_embeds, encoder.content_hash(), joint_hash, vocab.content_hash(),
    )


@dataclass
class SuggestRequest:
    """One suggestion request; ``trigger=False`` skips suggestion entirely."""

    body: str
    subject: Optional[str] = None
    mode: str = "single_pass"
    n: int = DEFAULT_N
    m: int = DEFAULT_M
    trigger: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvariantViolation(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.n < 1:
            raise InvariantViolation(f"N must be >= 1, got {self.n}")
        if self.mode == "two_pass" and self.m < self.n:
            raise InvariantViolation(f"M ({self.m}) must be >= N ({self.n}) in two_pass mode")

    @classmethod
    def from_dict(cls, data: Dict) -> "SuggestRequest":
        if "body" not in data:
            raise InvariantViolation("request needs a 'body' field")
        known = {"body", "subject", "mode", "n", "m", "trigger"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvariantViolation(f"unknown request fields: {', '.join(unknown)}")
        return cls(**data)

    def record(self) -> Dict[str, str]:
        return {"body": self.body, "subject": self.subject or ""}


@dataclass
class Suggestion:
    id: int
    response: str
    model_score: float
    bias: float
    final_score: float


@dataclass
class SuggestResult:
    """Ranked suggestions and per-stage timings in microseconds."""

    suggestions: List[Suggestion] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)
    mode: str = ""

    @property
    def ids(self) -> List[int]:
        return [s.id for s in self.suggestions]

    def to_dict(self) -> Dict:
        return {"mode": self.mode, "suggestions": [asdict(s) for s in self.suggestions],
                "timings": dict(self.timings)}


class _Timer:
    def __init__(self):
        self.start = time.perf_counter_ns()
        self.mark = self.start
        self.stages: Dict[str, float] = dict.fromkeys(STAGES, 0.0)

    def lap(self, stage: str):
        now = time.perf_counter_ns()
        self.stages[stage] += (now - self.mark) / 1000.0
        self.mark = now

    def finish(self) -> Dict[str, float]:
        """Close the format stage; the total ends where the last stage does."""
        self.lap("format_us")
        self.stages["total_us"] = (self.mark - self.start) / 1000.0
        return self.stages


def _result(rs: ResponseSet, ranked: List[Tuple[int, float, float]], timer: _Timer, mode: str):
    suggestions = [
        Suggestion(i, rs.responses[i], float(model), float(final - model), float(final))
        for i, model, final in ranked
    ]
    return SuggestResult(suggestions, timer.finish(), mode)


def _final_scores(model_scores: np.ndarray, ids: np.ndarray, rs: ResponseSet, bias: BiasConfig):
    return model_scores.astype(np.float64) + bias.alpha * rs.logprobs[ids]


def _input_bags(req: SuggestRequest, vocab: NGramVocabulary, features: Sequence[str]):
    return featurize_message(req.record(), vocab, features)


def suggest_exhaustive(
    req: SuggestRequest, joint: JointScorer, rs: ResponseSet, vocab: NGramVocabulary,
    bias: BiasConfig = BiasConfig(),
) -> SuggestResult:
    """Joint-score the whole response set."""
    if rs.joint_embeds is None:
        raise InvariantViolation("response set was encoded without a joint scorer")
    timer = _Timer()
    x_bags = _input_bags(req, vocab, joint.features)
    timer.lap("encode_us")
    ids = np.arange(len(rs))
    model = joint.score_against(x_bags, rs.joint_embeds[ids])
    final = _final_scores(model, ids, rs, bias)
    best = top_n(final, req.n)
    timer.lap("search_us")
    return _result(rs, [(int(i), model[i], final[i]) for i in best], timer, "exhaustive")


def suggest_dot_exhaustive(
    req: SuggestRequest, encoder: DotProductEncoder, rs: ResponseSet, vocab: NGramVocabulary,
    bias: BiasConfig = BiasConfig(),
) -> SuggestResult:
    """Exact dot-product ranking of the whole response set (the single-pass oracle)."""
    timer = _Timer()
    h_x, _ = encoder.encode_inputs([_input_bags(req, vocab, encoder.features)])
    timer.lap("encode_us")
    ids = np.arange(len(rs))
    column = rs.bias(bias.alpha)
    scores = exact_scores(rs.encodings, ids, h_x[0], column)
    best = top_n(scores, req.n)
    timer.lap("search_us")
    return _result(rs, [(int(i), scores[i] - column[i], scores[i]) for i in best], timer, "exhaustive_dot")


def suggest_two_pass(
    req: SuggestRequest, encoder: DotProductEncoder, joint: JointScorer, rs: ResponseSet,
    vocab: NGramVocabulary, bias: BiasConfig = BiasConfig(),
) -> SuggestResult:
    """Dot-product M-best list, joint rescoring, top-N; the bias applies in both passes."""
    if rs.joint_embeds is None:
        raise InvariantViolation("response set was encoded without a joint scorer")
    if req.m < req.n:
        raise InvariantViolation(f"M ({req.m}) must be >= N ({req.n})")
    timer = _Timer()
    h_x, _ = encoder.encode_inputs([_input_bags(req, vocab, encoder.features)])
    x_bags = _input_bags(req, vocab, joint.features)
    timer.lap("encode_us")
    first = exact_scores(rs.encodings, np.arange(len(rs)), h_x[0], rs.bias(bias.alpha))
    ids = np.sort(top_n(first, req.m))
    timer.lap("search_us")
    model = joint.score_against(x_bags, rs.joint_embeds[ids])
    final = _final_scores(model, ids, rs, bias)
    best = top_n(final, req.n)
    timer.lap("rescore_us")
    return _result(rs, [(int(ids[j]), model[j], final[j]) for j in best], timer, "two_pass")


def check_index(index: HQIndex, rs: ResponseSet, index_path: str = "index"):
    """Raise StaleArtifactError unless the index was built from this response set."""
    actual = rs.content_hash()
    if index.source_hash != actual:
        raise StaleArtifactError(index_path, index.source_hash, actual)


def suggest_single_pass(
    req: SuggestRequest, encoder: DotProductEncoder, index: HQIndex, rs: ResponseSet,
    vocab: NGramVocabulary, bias: BiasConfig = BiasConfig(), hq: Optional[HQConfig] = None,
    verify: bool = True,
) -> SuggestResult:
    """Quantized dot-product search; the bias column is added after table lookup."""
    if verify:
        check_index(index, rs)
    retrieve_m = hq.retrieve_m if hq is not None else max(req.n, 100)
    rerank = hq.rerank if hq is not None else True
    timer = _Timer()
    h_x, _ = encoder.encode_inputs([_input_bags(req, vocab, encoder.features)])
    timer.lap("encode_us")
    n = min(req.n, len(rs))
    hits = index.search(h_x[0], n, max(retrieve_m, n), rerank, bias.alpha)
    column = rs.bias(bias.alpha)
    timer.lap("search_us")
    return _result(rs, [(i, score - column[i], score) for i, score in hits], timer, "single_pass")


class SuggestionService:
    """
    Loaded serving state. Everything is read-only after construction, so one
    instance can answer concurrent requests.
    """

    def __init__(
        self,
        rs: ResponseSet,
        vocab: NGramVocabulary,
        encoder: Optional[DotProductEncoder] = None,
        joint: Optional[JointScorer] = None,
        index: Optional[HQIndex] = None,
        bias: BiasConfig = BiasConfig(),
        hq: Optional[HQConfig] = None,
    ):
        if rs.vocab_hash and rs.vocab_hash != vocab.content_hash():
            raise StaleArtifactError("responses", rs.vocab_hash, vocab.content_hash())
        if encoder is not None and rs.encoder_hash and rs.encoder_hash != encoder.content_hash():
            raise StaleArtifactError("responses", rs.encoder_hash, encoder.content_hash())
        if joint is not None and rs.joint_hash and rs.joint_hash != joint.content_hash():
            raise StaleArtifactError("responses", rs.joint_hash, joint.content_hash())
        if index is not None:
            check_index(index, rs)
        self.rs = rs
        self.vocab = vocab
        self.encoder = encoder
        self.joint = joint
        self.index = index
        self.bias = bias
        self.hq = hq

    def suggest(self, req: SuggestRequest) -> SuggestResult:
        if not req.trigger:
            return SuggestResult([], dict.fromkeys(STAGES + ("total_us",), 0.0), req.mode)
        if req.mode == "exhaustive":
            self._need(joint=True)
            return suggest_exhaustive(req, self.joint, self.rs, self.vocab, self.bias)
        if req.mode == "two_pass":
            self._need(encoder=True, joint=True)
            return suggest_two_pass(req, self.encoder, self.joint, self.rs, self.vocab, self.bias)
        self._need(encoder=True, index=True)
        return suggest_single_pass(req, self.encoder, self.index, self.rs, self.vocab, self.bias,
                                   self.hq, verify=False)

    def _need(self, encoder=False, joint=False, index=False):
        missing = [name for name, wanted, have in (
            ("dot-product model", encoder, self.encoder),
            ("joint model", joint, self.joint),
            ("index", index, self.index),
        ) if wanted and have is None]
        if missing:
            raise InvariantViolation(f"this mode needs: {', '.join(missing)}")

    def handle_line(self, line: str, defaults: Optional[Dict] = None) -> str:
        """Answer one JSON request line with one JSON result line."""
        try:
            data = json.loads(line)
        except json.JSONDecodeError as e:
            raise InvariantViolation(f"invalid JSON request ({e.msg})") from e
        if not isinstance(data, dict):
            raise InvariantViolation("request must be a JSON object")
        merged = dict(defaults or {})
        merged.update(data)
        return json.dumps(self.suggest(SuggestRequest.from_dict(merged)).to_dict(), ensure_ascii=False)
