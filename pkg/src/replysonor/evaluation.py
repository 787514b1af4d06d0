"""
Offline evaluation: P@1 against sampled distractors, training ablations,
the speed/recall benchmark of the quantized index and serving latency.
"""

import logging
import math
import statistics
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .config import EvalConfig, ModelConfig, TrainConfig
from .corpus import Record, featurize_dataset, normalize_response
from .encoder import DotProductEncoder, JointScorer, ScoringModel, build_model, embed_bags
from .errors import EmptyInputError, InvariantViolation
from .featurizer import NGramVocabulary, featurize, featurize_message
from .hq_index import HQIndex, exhaustive_search, recall
from .lsh import SignProjectionLSH
from .trainer import train

logger = logging.getLogger(__name__)

PairScorer = Callable[[int, np.ndarray], np.ndarray]


def split_dataset(pairs: Sequence, ratio: float = 0.95, seed: int = 0) -> Tuple[list, list]:
    """
    Split uniformly at random into disjoint train and test parts.

    Args:
        pairs: Items to split
        ratio: Training share in [0, 1]
        seed: Shuffle seed

    Returns:
        (train, test), each in original order
    """
    if not len(pairs):
        raise EmptyInputError("cannot split an empty dataset")
    if not 0.0 <= ratio <= 1.0:
        raise InvariantViolation(f"split ratio must lie in [0, 1], got {ratio}")
    order = np.random.default_rng(seed).permutation(len(pairs))
    n_train = int(round(ratio * len(pairs)))
    train_idx = np.sort(order[:n_train])
    test_idx = np.sort(order[n_train:])
    return [pairs[i] for i in train_idx], [pairs[i] for i in test_idx]


@dataclass
class EvalSet:
    """Held-out records with their distinct responses; ``targets[i]`` is pair i's response id."""

    records: List[Record]
    responses: List[str]
    targets: np.ndarray

    @classmethod
    def from_records(cls, records: Sequence[Record]) -> "EvalSet":
        if not records:
            raise EmptyInputError("evaluation needs at least one test pair")
        ids: Dict[str, int] = {}
        responses: List[str] = []
        targets = []
        for record in records:
            key = normalize_response(record.get("response") or "")
            if key not in ids:
                ids[key] = len(responses)
                responses.append(record.get("response") or "")
            targets.append(ids[key])
        return cls(list(records), responses, np.array(targets, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.records)


# --------------------------------------------------------------------------
# Scorers
# --------------------------------------------------------------------------


def oracle_scorer(eval_set: EvalSet) -> PairScorer:
    """Scores 1 for the true response and 0 otherwise."""
    return lambda i, cands: (cands == eval_set.targets[i]).astype(np.float64)


def constant_scorer(value: float = 0.0) -> PairScorer:
    return lambda i, cands: np.full(len(cands), value, dtype=np.float64)


def dot_scorer(model: DotProductEncoder, eval_set: EvalSet, vocab: NGramVocabulary) -> PairScorer:
    inputs = [featurize_message(r, vocab, model.features) for r in eval_set.records]
    h_x, _ = model.encode_inputs(inputs)
    h_y, _ = model.encode_responses([featurize(t, vocab, "response") for t in eval_set.responses])
    return lambda i, cands: h_y[cands] @ h_x[i]


def joint_scorer(model: JointScorer, eval_set: EvalSet, vocab: NGramVocabulary) -> PairScorer:
    inputs = [featurize_message(r, vocab, model.features) for r in eval_set.records]
    embeds = embed_bags([featurize(t, vocab, "response") for t in eval_set.responses],
                        model.response_embeddings)
    return lambda i, cands: model.score_against(inputs[i], embeds[cands])


def model_scorer(model: ScoringModel, eval_set: EvalSet, vocab: NGramVocabulary) -> PairScorer:
    if isinstance(model, DotProductEncoder):
        return dot_scorer(model, eval_set, vocab)
    return joint_scorer(model, eval_set, vocab)


def biased_scorer(base: PairScorer, logprobs: np.ndarray, alpha: float) -> PairScorer:
    """Adds ``alpha * log P_LM`` of every candidate to the base scores."""
    logprobs = np.asarray(logprobs, dtype=np.float64)
    return lambda i, cands: np.asarray(base(i, cands), dtype=np.float64) + alpha * logprobs[cands]


# --------------------------------------------------------------------------
# P@1
# --------------------------------------------------------------------------


@dataclass
class PAt1Report:
    """P@1 under strict ties (ties fail) and under uniformly random tie-breaking."""

    strict: float
    random_ties: float
    pairs: int
    candidates: int
    with_replacement: bool = False


def _sample_candidates(target: int, pool_size: int, count: int, rng: np.random.Generator):
    """True id first, then ``count`` distractor ids drawn from the other responses."""
    others = pool_size - 1
    draws = rng.choice(others, size=count, replace=others < count)
    draws = draws + (draws >= target)
    return np.concatenate([[target], draws]).astype(np.int64)


def p_at_1_report(scorer: PairScorer, eval_set: EvalSet, cfg: EvalConfig = EvalConfig()) -> PAt1Report:
    """
    Precision at 1 of the true response among ``num_candidates`` candidates.

    Distractors are drawn from the distinct test responses other than the
    true one, without replacement when enough are available.

    Args:
        scorer: (pair index, candidate response ids) -> scores
        eval_set: Held-out pairs
        cfg: Candidate count, trials and seed

    Returns:
        PAt1Report averaged over ``cfg.trials`` resamplings
    """
    pool = len(eval_set.responses)
    distractors = cfg.num_candidates - 1
    if pool < 2:
        raise InvariantViolation("need at least two distinct responses to sample distractors")
    with_replacement = pool - 1 < distractors
    if with_replacement:
        logger.warning(
            "only %d distinct distractors for %d slots; sampling with replacement", pool - 1, distractors
        )
    rng = np.random.default_rng(cfg.seed)
    strict = 0.0
    random_ties = 0.0
    for _ in range(cfg.trials):
        for i in range(len(eval_set)):
            cands = _sample_candidates(int(eval_set.targets[i]), pool, distractors, rng)
            scores = np.asarray(scorer(i, cands), dtype=np.float64)
            best = scores.max()
            if scores[0] == best:
                ties = int(np.count_nonzero(scores == best))
                random_ties += 1.0 / ties
                strict += 1.0 if ties == 1 else 0.0
    total = cfg.trials * len(eval_set)
    return PAt1Report(strict / total, random_ties / total, len(eval_set), cfg.num_candidates,
                      with_replacement)


def p_at_1(scorer: PairScorer, eval_set: EvalSet, cfg: EvalConfig = EvalConfig()) -> float:
    """Strict-tie P@1."""
    return p_at_1_report(scorer, eval_set, cfg).strict


def wilson_interval(successes: float, n: int, confidence: float = 0.95) -> Tuple[float, float]:
    """Wilson score interval of a binomial proportion."""
    if n <= 0:
        return 0.0, 1.0
    z = stats.norm.ppf(0.5 + confidence / 2.0)
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    low = 0.0 if successes <= 0 else max(0.0, center - half)
    high = 1.0 if successes >= n else min(1.0, center + half)
    return low, high


# --------------------------------------------------------------------------
# Ablation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationConfig:
    model: str = "dot"
    loss: str = "multiple_negatives"
    k: int = 32


@dataclass
class AblationRow:
    model: str
    loss: str
    k: int
    seed: int
    p_at_1: float
    ci_low: float = 0.0
    ci_high: float = 1.0


@dataclass
class AblationSummary:
    config: AblationConfig
    mean: float
    ci_low: float
    ci_high: float
    seeds: int


@dataclass
class AblationTable:
    rows: List[AblationRow] = field(default_factory=list)

    def summary(self, confidence: float = 0.95) -> List[AblationSummary]:
        """Mean P@1 per configuration with a t-interval over seeds."""
        groups: Dict[AblationConfig, List[float]] = {}
        for row in self.rows:
            groups.setdefault(AblationConfig(row.model, row.loss, row.k), []).append(row.p_at_1)
        out = []
        for config, values in groups.items():
            mean = float(np.mean(values))
            if len(values) > 1:
                sem = stats.sem(values)
                half = float(sem * stats.t.ppf(0.5 + confidence / 2.0, len(values) - 1))
            else:
                half = float("nan")
            out.append(AblationSummary(config, mean, mean - half, mean + half, len(values)))
        return out

    def mean(self, model: str, loss: str, k: int) -> float:
        values = [r.p_at_1 for r in self.rows if (r.model, r.loss, r.k) == (model, loss, k)]
        if not values:
            raise InvariantViolation(f"no ablation rows for {model}/{loss}/k={k}")
        return float(np.mean(values))


def ablation_report(
    train_records: Sequence[Record],
    test_records: Sequence[Record],
    vocab: NGramVocabulary,
    configs: Sequence[AblationConfig],
    seeds: Sequence[int] = (0, 1, 2),
    model_cfg: ModelConfig = ModelConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    eval_cfg: EvalConfig = EvalConfig(),
    features: Sequence[str] = ("body", "subject"),
) -> AblationTable:
    """
    Train every (config, seed) identically apart from the ablated settings and
    report held-out P@1.

    Args:
        train_records: Training split
        test_records: Held-out split
        vocab: Shared vocabulary
        configs: Model kind, loss and batch size per row
        seeds: Seeds for initialization and shuffling
        model_cfg: Architecture shared by all rows (kind overridden)
        train_cfg: Schedule shared by all rows (loss, k and seed overridden)
        eval_cfg: P@1 protocol

    Returns:
        AblationTable with one row per (config, seed)
    """
    if len(seeds) < 1:
        raise InvariantViolation("ablation needs at least one seed")
    examples = featurize_dataset(train_records, vocab, features)
    eval_set = EvalSet.from_records(test_records)
    table = AblationTable()
    for config in configs:
        for seed in seeds:
            mcfg = ModelConfig(config.model, model_cfg.d, model_cfg.towers, model_cfg.fusion, seed)
            tcfg = TrainConfig(config.k, train_cfg.epochs, train_cfg.lr, train_cfg.lr_decay_step,
                               train_cfg.lr_decayed, seed, config.loss, train_cfg.log_every)
            model = build_model(mcfg, len(vocab), features, vocab.content_hash())
            trained = train(model, examples, tcfg).model
            report = p_at_1_report(model_scorer(trained, eval_set, vocab), eval_set, eval_cfg)
            low, high = wilson_interval(report.strict * report.pairs, report.pairs)
            table.rows.append(AblationRow(config.model, config.loss, config.k, seed, report.strict, low, high))
            logger.info("ablation %s/%s/k=%d seed %d: P@1 %.4f",
                        config.model, config.loss, config.k, seed, report.strict)
    return table


# --------------------------------------------------------------------------
# Speed / recall
# --------------------------------------------------------------------------


@dataclass
class BenchPoint:
    """One operating point of the speed/recall sweep."""

    label: str
    retrieve_m: int
    recall_at_30: float
    speedup_vs_exhaustive: float
    qps: float

    def __post_init__(self):
        if not 0.0 <= self.recall_at_30 <= 1.0:
            raise InvariantViolation(f"recall {self.recall_at_30} outside [0, 1]")
        if self.speedup_vs_exhaustive <= 0:
            raise InvariantViolation("speedup must be positive")


def _median_seconds(run: Callable[[], None], repeats: int) -> float:
    timings = []
    for _ in range(repeats):
        start = time.perf_counter()
        run()
        timings.append(time.perf_counter() - start)
    return statistics.median(timings)


def speed_recall_bench(
    vectors: np.ndarray,
    index: HQIndex,
    queries: np.ndarray,
    sweep: Sequence[int],
    n: int = 30,
    rerank: bool = True,
    warmup: int = 100,
    repeats: int = 3,
    lsh: Optional[SignProjectionLSH] = None,
) -> List[BenchPoint]:
    """
    Time exhaustive search and the index across ``retrieve_m`` values.

    Args:
        vectors: Full-precision response encodings (the exhaustive baseline)
        index: Quantized index over the same vectors
        queries: Query encodings
        sweep: retrieve_m values
        n: Neighbors per query for recall
        rerank: Exact rerank in the index
        warmup: Untimed queries before each measurement
        repeats: Timed repetitions; the median is reported
        lsh: Optional sign-projection baseline swept over the same values

    Returns:
        Exhaustive point first, then one point per sweep value (and LSH points)
    """
    queries = np.atleast_2d(queries)
    if not len(queries):
        raise InvariantViolation("benchmark needs at least one query")
    vectors = np.ascontiguousarray(vectors, dtype=np.float32)
    warm = queries[:warmup]

    def exhaustive_pass(qs):
        return [[i for i, _ in exhaustive_search(vectors, q, n)] for q in qs]

    exhaustive_pass(warm)
    truth = exhaustive_pass(queries)
    base = _median_seconds(lambda: exhaustive_pass(queries), repeats)
    points = [BenchPoint("exhaustive", len(vectors), 1.0, 1.0, len(queries) / base)]
    logger.info("exhaustive: %.1f queries/s", points[0].qps)

    searchers = [("hq", lambda q, m: index.search(q, n, m, rerank))]
    if lsh is not None:
        searchers.append(("lsh", lambda q, m: lsh.search(q, n, m)))
    for label, search in searchers:
        for m in sorted(sweep):
            m = max(m, n)

            def run(qs=queries, m=m, search=search):
                return [[i for i, _ in search(q, m)] for q in qs]

            run(warm)
            found = run()
            elapsed = _median_seconds(run, repeats)
            mean_recall = float(np.mean([recall(f, t, n) for f, t in zip(found, truth)]))
            point = BenchPoint(label, m, mean_recall, base / elapsed, len(queries) / elapsed)
            points.append(point)
            logger.info("%s retrieve_m=%d: recall@%d %.4f, speedup %.2fx",
                        label, m, n, point.recall_at_30, point.speedup_vs_exhaustive)
    return points


def architecture_latency_bench(service, requests: Sequence, modes: Sequence[str], repeats: int = 3):
    """
    Median request latency per serving architecture.

    Returns:
        {mode: {"median_us": ..., "relative_to_exhaustive": ...}}; the ratio is
        only filled when ``exhaustive`` is among the modes
    """
    if not requests:
        raise InvariantViolation("latency benchmark needs at least one request")
    results: Dict[str, Dict[str, float]] = {}
    for mode in modes:
        totals = []
        for _ in range(repeats):
            for req in requests:
                totals.append(service.suggest(replace(req, mode=mode)).timings["total_us"])
        results[mode] = {"median_us": float(statistics.median(totals))}
    if "exhaustive" in results:
        base = results["exhaustive"]["median_us"]
        for mode, row in results.items():
            row["relative_to_exhaustive"] = row["median_us"] / base if base > 0 else float("nan")
    return results
