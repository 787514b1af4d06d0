"""
Command-line interface for ReplySonor.
"""

import os

# BLAS must be single-threaded before numpy loads
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import functools  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402
from typing import List, Optional, Sequence  # noqa: E402

import click  # noqa: E402
import numpy as np  # noqa: E402
from rich.console import Console  # noqa: E402
from rich.logging import RichHandler  # noqa: E402
from rich.table import Table  # noqa: E402

from . import __version__  # noqa: E402
from .config import (  # noqa: E402
    BiasConfig,
    Config,
    EvalConfig,
    FeaturizerConfig,
    HQConfig,
    ModelConfig,
    PRESETS,
    TrainConfig,
)
from .corpus import (  # noqa: E402
    featurize_dataset,
    gaussian_mixture,
    iter_texts,
    read_jsonl,
    select_response_set,
    synthetic_corpus,
    write_jsonl,
)
from .encoder import DotProductEncoder, JointScorer, ScoringModel, build_model  # noqa: E402
from .errors import EmptyInputError, InvariantViolation, ReplySonorError, StaleArtifactError  # noqa: E402
from .evaluation import (  # noqa: E402
    AblationConfig,
    EvalSet,
    ablation_report,
    architecture_latency_bench,
    biased_scorer,
    model_scorer,
    oracle_scorer,
    p_at_1_report,
    speed_recall_bench,
    split_dataset,
)
from .exporter import ExportManager  # noqa: E402
from .featurizer import FeatureBag, NGramVocabulary, build_vocabulary, featurize_message  # noqa: E402
from .gradcheck import gradient_check  # noqa: E402
from .hq_index import HQIndex, HQTrainingReport  # noqa: E402
from .language_model import BigramLM, select_alpha, train_lm  # noqa: E402
from .lsh import SignProjectionLSH  # noqa: E402
from .manifest import RunManifest, default_manifest_path  # noqa: E402
from .serving import MODES, ResponseSet, SuggestRequest, SuggestionService, check_index, precompute_responses  # noqa: E402
from .trainer import LOSSES, TrainingBatch, TrainingExample, train  # noqa: E402

console = Console()
err_console = Console(stderr=True)
logger = logging.getLogger("replysonor")

INPUT_FILE = click.Path(exists=True, dir_okay=False, path_type=Path)
OUTPUT_FILE = click.Path(dir_okay=False, path_type=Path)


def _fail(kind: str, message: str):
    message = " ".join(str(message).split())
    click.echo(f"error: {kind}: {message}", err=True)
    sys.exit(1)


def handle_errors(func):
    """Turn library errors into one ``error: <kind>: <message>`` line and exit code 1."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ReplySonorError as e:
            _fail(e.kind, str(e))
        except OSError as e:
            _fail("io", str(e))

    return wrapper


def common_options(func):
    """--config, --preset, --seed, --out and --manifest."""
    func = click.option("--manifest", type=OUTPUT_FILE, default=None,
                        help="Run manifest (default: run_manifest.json next to --out)")(func)
    func = click.option("--seed", type=int, default=None, help="Seed for every random choice")(func)
    func = click.option("--preset", type=click.Choice(sorted(PRESETS)), default="desk",
                        show_default=True, help="Built-in defaults")(func)
    func = click.option("--config", "config_file", type=INPUT_FILE, default=None,
                        help="key: value config file")(func)
    return func


def _config(config_file: Optional[Path], preset: str, seed: Optional[int], **flags) -> Config:
    return Config(config_file, preset).override(seed=seed, **flags)


def _manifest(manifest: Optional[Path], anchor: Optional[Path]) -> RunManifest:
    return RunManifest(manifest if manifest is not None else default_manifest_path(anchor))


def _int_list(value: str) -> List[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError as e:
        raise InvariantViolation(f"expected comma-separated integers, got {value!r}") from e


def _str_list(value: str) -> List[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _load_vocab(path: Path, manifest: RunManifest) -> NGramVocabulary:
    manifest.verify(path)
    return NGramVocabulary.load(path)


def _load_model(path: Path, vocab: Optional[NGramVocabulary], manifest: RunManifest) -> ScoringModel:
    manifest.verify(path)
    model = ScoringModel.load(path)
    if vocab is not None and model.vocab_hash and model.vocab_hash != vocab.content_hash():
        raise StaleArtifactError(path, model.vocab_hash, vocab.content_hash())
    return model


def _load_encoder(path: Path, vocab: NGramVocabulary, manifest: RunManifest) -> DotProductEncoder:
    model = _load_model(path, vocab, manifest)
    if not isinstance(model, DotProductEncoder):
        raise InvariantViolation(f"{path} holds a {model.kind} model; a dot-product model is needed")
    return model


def _load_joint(path: Path, vocab: NGramVocabulary, manifest: RunManifest) -> JointScorer:
    model = _load_model(path, vocab, manifest)
    if not isinstance(model, JointScorer):
        raise InvariantViolation(f"{path} holds a {model.kind} model; a joint model is needed")
    return model


def _read_responses(path: Path) -> List[str]:
    with open(path, "r", encoding="utf-8") as f:
        responses = [line.strip() for line in f if line.strip()]
    if not responses:
        raise EmptyInputError(f"{path} lists no responses")
    return responses


def _split(records, cfg: Config):
    eval_cfg = cfg.section(EvalConfig)
    return split_dataset(records, eval_cfg.split, cfg.get("seed", 0))


def _fit_codebooks(hq: HQConfig, n: int) -> HQConfig:
    """Shrink codebooks that would outnumber the vectors."""
    vq, pq = min(hq.vq_size, n), min(hq.pq_size, n)
    if (vq, pq) != (hq.vq_size, hq.pq_size):
        logger.warning("only %d vectors: using vq_size=%d, pq_size=%d", n, vq, pq)
    return replace(hq, vq_size=vq, pq_size=pq)


@click.group()
@click.version_option(version=__version__, prog_name="ReplySonor")
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
@click.option("--quiet", "-q", is_flag=True, help="Warnings and errors only")
def cli(verbose, quiet):
    """
    ReplySonor - Smart Reply suggestion engine.

    Builds n-gram vocabularies, trains dot-product and joint scoring models,
    indexes the response set and serves ranked reply suggestions.
    """
    level = logging.WARNING if quiet else logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(message)s",
        handlers=[RichHandler(console=err_console, show_path=False, show_time=False)],
        force=True,
    )


@cli.command()
@click.option("--pairs", type=int, default=20_000, show_default=True, help="Number of records")
@click.option("--topics", type=int, default=50, show_default=True, help="Number of topics")
@click.option("--seed", type=int, default=0, show_default=True, help="Generator seed")
@click.option("--out", type=OUTPUT_FILE, required=True, help="Output JSONL corpus")
@click.option("--manifest", type=OUTPUT_FILE, default=None, help="Run manifest")
@handle_errors
def synth(pairs, topics, seed, out, manifest):
    """Write a synthetic topic-clustered message/response corpus."""
    count = write_jsonl(synthetic_corpus(pairs, topics, seed), out)
    _manifest(manifest, out).record("corpus", out, {"pairs": pairs, "topics": topics, "seed": seed})
    click.echo(f"records={count}")


@cli.command("build-vocab")
@click.argument("corpus", type=INPUT_FILE)
@common_options
@click.option("--max-n", type=int, default=None, help="Highest n-gram order")
@click.option("--size-cap", type=int, default=None, help="Maximum vocabulary size")
@click.option("--min-count", type=int, default=None, help="Minimum n-gram frequency")
@click.option("--out", type=OUTPUT_FILE, required=True, help="Output vocabulary file")
@handle_errors
def build_vocab(corpus, config_file, preset, seed, manifest, max_n, size_cap, min_count, out):
    """
    Build the n-gram vocabulary from a JSONL corpus.

    Counts n-grams over message bodies, subjects and responses.
    """
    cfg = _config(config_file, preset, seed, max_n=max_n, size_cap=size_cap, min_count=min_count)
    fcfg = cfg.section(FeaturizerConfig)
    runs = _manifest(manifest, out)
    runs.verify(corpus)
    records = read_jsonl(corpus)
    vocab = build_vocabulary(iter_texts(records, fcfg.features), fcfg.max_n, fcfg.size_cap, fcfg.min_count)
    if not len(vocab):
        raise EmptyInputError("no n-grams retained")
    vocab.save(out)
    runs.record("vocab", out, cfg.snapshot())
    click.echo(f"entries={len(vocab)}")


@cli.command("select-responses")
@click.argument("corpus", type=INPUT_FILE)
@click.option("--size", type=int, default=1000, show_default=True, help="Maximum responses kept")
@click.option("--min-count", type=int, default=1, show_default=True, help="Minimum occurrences")
@click.option("--out", type=OUTPUT_FILE, required=True, help="Output text file, one response per line")
@click.option("--manifest", type=OUTPUT_FILE, default=None, help="Run manifest")
@handle_errors
def select_responses(corpus, size, min_count, out, manifest):
    """Pick the most frequent responses as the suggestion set."""
    runs = _manifest(manifest, out)
    runs.verify(corpus)
    responses = select_response_set(read_jsonl(corpus), size, min_count)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="\n") as f:
        for text in responses:
            f.write(" ".join(text.split()) + "\n")
    runs.record("response_texts", out, {"size": size, "min_count": min_count})
    click.echo(f"responses={len(responses)}")


@cli.command("train")
@click.argument("corpus", type=INPUT_FILE)
@click.option("--vocab", "vocab_path", type=INPUT_FILE, required=True, help="Vocabulary file")
@common_options
@click.option("--model-kind", type=click.Choice(["dot", "joint"]), default=None, help="Scorer architecture")
@click.option("--dims", type=int, default=None, help="Embedding dimension")
@click.option("--k", type=int, default=None, help="Batch size (negatives per example + 1)")
@click.option("--epochs", type=int, default=None, help="Training epochs")
@click.option("--lr", type=float, default=None, help="Initial learning rate")
@click.option("--loss", type=click.Choice(LOSSES), default=None, help="Training objective")
@click.option("--split", type=float, default=None, help="Training share of the corpus")
@click.option("--loss-curve", type=OUTPUT_FILE, default=None, help="Write the loss curve CSV here")
@click.option("--out", type=OUTPUT_FILE, required=True, help="Output model file")
@handle_errors
def train_cmd(corpus, vocab_path, config_file, preset, seed, manifest, model_kind, dims, k,
              epochs, lr, loss, split, loss_curve, out):
    """Train a dot-product or joint scoring model on the training split."""
    cfg = _config(config_file, preset, seed, model=model_kind, dims=dims, k=k, epochs=epochs,
                  lr=lr, loss=loss, split=split)
    runs = _manifest(manifest, out)
    runs.verify(corpus)
    vocab = _load_vocab(vocab_path, runs)
    features = cfg.section(FeaturizerConfig).features
    train_records, _ = _split(read_jsonl(corpus), cfg)
    model = build_model(cfg.section(ModelConfig), len(vocab), features, vocab.content_hash())
    result = train(model, featurize_dataset(train_records, vocab, features), cfg.section(TrainConfig))
    result.model.save(out)
    runs.record("model", out, cfg.snapshot())
    if loss_curve is not None:
        ExportManager().export_loss_curve(result.curve, loss_curve)
        runs.record("loss_curve", loss_curve, cfg.snapshot())
    final = result.curve[-1].loss if result.curve else float("nan")
    click.echo(f"steps={result.steps} final_loss={final:.6f}")


@cli.command("train-lm")
@click.argument("corpus", type=INPUT_FILE)
@common_options
@click.option("--lm-k", type=float, default=None, help="Additive smoothing constant")
@click.option("--split", type=float, default=None, help="Training share of the corpus")
@click.option("--out", type=OUTPUT_FILE, required=True, help="Output language model file")
@handle_errors
def train_lm_cmd(corpus, config_file, preset, seed, manifest, lm_k, split, out):
    """Train the response language model on responses of the training split."""
    cfg = _config(config_file, preset, seed, lm_k=lm_k, split=split)
    runs = _manifest(manifest, out)
    runs.verify(corpus)
    train_records, _ = _split(read_jsonl(corpus), cfg)
    lm = train_lm((r["response"] for r in train_records if r.get("response")), cfg.section(BiasConfig).lm_k)
    lm.save(out)
    runs.record("lm", out, cfg.snapshot())
    click.echo(f"lm_vocab={lm.vocab_size}")


@cli.command("encode-responses")
@click.argument("responses", type=INPUT_FILE)
@click.option("--vocab", "vocab_path", type=INPUT_FILE, required=True, help="Vocabulary file")
@click.option("--model", "model_path", type=INPUT_FILE, required=True, help="Dot-product model")
@click.option("--joint", "joint_path", type=INPUT_FILE, default=None, help="Joint model to cache embeddings for")
@click.option("--lm", "lm_path", type=INPUT_FILE, default=None, help="Language model for the bias column")
@common_options
@click.option("--out", type=OUTPUT_FILE, required=True, help="Output response set file")
@handle_errors
def encode_responses(responses, vocab_path, model_path, joint_path, lm_path, config_file, preset,
                     seed, manifest, out):
    """Precompute encodings and log-probabilities of the response set."""
    cfg = _config(config_file, preset, seed)
    runs = _manifest(manifest, out)
    runs.verify(responses)
    vocab = _load_vocab(vocab_path, runs)
    encoder = _load_encoder(model_path, vocab, runs)
    joint = _load_joint(joint_path, vocab, runs) if joint_path else None
    lm = None
    if lm_path:
        runs.verify(lm_path)
        lm = BigramLM.load(lm_path)
    rs = precompute_responses(_read_responses(responses), encoder, lm, vocab, joint)
    rs.save(out)
    runs.record("responses", out, cfg.snapshot())
    click.echo(f"responses={len(rs)} dims={rs.d}")


@cli.command("build-index")
@click.option("--responses", "rs_path", type=INPUT_FILE, required=True, help="Response set file")
@common_options
@click.option("--vq-size", type=int, default=None, help="Coarse codebook size")
@click.option("--num-subspaces", type=int, default=None, help="Product-quantizer subspaces")
@click.option("--pq-size", type=int, default=None, help="Codewords per subspace")
@click.option("--hq-mode", type=click.Choice(["alternating", "sgd"]), default=None, help="Codebook training")
@click.option("--out", type=OUTPUT_FILE, required=True, help="Output index file")
@handle_errors
def build_index(rs_path, config_file, preset, seed, manifest, vq_size, num_subspaces, pq_size, hq_mode, out):
    """Train the hierarchical quantizer and encode the response set."""
    cfg = _config(config_file, preset, seed, vq_size=vq_size, num_subspaces=num_subspaces,
                  pq_size=pq_size, hq_mode=hq_mode)
    runs = _manifest(manifest, out)
    runs.verify(rs_path)
    rs = ResponseSet.load(rs_path)
    hq = _fit_codebooks(cfg.section(HQConfig, d=rs.d), len(rs))
    report = HQTrainingReport()
    index = HQIndex.build(rs.encodings, hq, cfg.get("seed", 0), rs.logprobs,
                          source_hash=rs.content_hash(), report=report)
    index.save(out)
    runs.record("index", out, cfg.snapshot())
    click.echo(f"vectors={len(index)} reconstruction_error={report.errors[-1]:.6f}")


@cli.command("eval")
@click.argument("corpus", type=INPUT_FILE)
@click.option("--vocab", "vocab_path", type=INPUT_FILE, default=None, help="Vocabulary file")
@click.option("--model", "model_path", type=INPUT_FILE, default=None, help="Model to evaluate")
@click.option("--oracle", is_flag=True, help="Score with the true-response oracle")
@click.option("--lm", "lm_path", type=INPUT_FILE, default=None, help="Language model for the bias")
@click.option("--alpha", type=float, default=None, help="Bias weight")
@click.option("--select-alpha", "tune_alpha", is_flag=True, help="Grid-search alpha on the test split")
@common_options
@click.option("--num-candidates", type=int, default=None, help="Candidates per test pair")
@click.option("--trials", type=int, default=None, help="Resamplings of the distractors")
@click.option("--split", type=float, default=None, help="Training share of the corpus")
@click.option("--out", type=OUTPUT_FILE, default=None, help="Write the report as JSON")
@handle_errors
def eval_cmd(corpus, vocab_path, model_path, oracle, lm_path, alpha, tune_alpha, config_file, preset,
             seed, manifest, num_candidates, trials, split, out):
    """
    Report P@1 on the held-out split.

    The true response competes with sampled distractors from the other test
    responses; ties count as failures (strict) or are broken uniformly at
    random (random_ties).
    """
    cfg = _config(config_file, preset, seed, alpha=alpha, num_candidates=num_candidates,
                  trials=trials, split=split)
    runs = _manifest(manifest, out or model_path)
    runs.verify(corpus)
    eval_cfg = cfg.section(EvalConfig)
    _, test_records = _split(read_jsonl(corpus), cfg)
    eval_set = EvalSet.from_records(test_records)
    if oracle:
        scorer = oracle_scorer(eval_set)
    else:
        if model_path is None or vocab_path is None:
            raise InvariantViolation("eval needs --model and --vocab, or --oracle")
        vocab = _load_vocab(vocab_path, runs)
        scorer = model_scorer(_load_model(model_path, vocab, runs), eval_set, vocab)
    result = {}
    if lm_path:
        runs.verify(lm_path)
        lm = BigramLM.load(lm_path)
        logprobs = np.array([lm.logprob(r) for r in eval_set.responses])
        weight = cfg.section(BiasConfig).alpha
        if tune_alpha:
            weight, grid = select_alpha(scorer, eval_set, logprobs, eval_cfg)
            result["alpha_grid"] = {str(a): p for a, p in grid.items()}
        scorer = biased_scorer(scorer, logprobs, weight)
        result["alpha"] = weight
    report = p_at_1_report(scorer, eval_set, eval_cfg)
    result.update(p_at_1=report.strict, p_at_1_random_ties=report.random_ties, pairs=report.pairs,
                  candidates=report.candidates, with_replacement=report.with_replacement)
    if out is not None:
        ExportManager().export(result, out, "json")
    click.echo(f"p_at_1={round(report.strict, 6)}")
    click.echo(f"p_at_1_random_ties={round(report.random_ties, 6)}")
    if "alpha" in result:
        click.echo(f"alpha={result['alpha']}")


def _encode_queries(records, encoder: DotProductEncoder, vocab: NGramVocabulary, limit: int) -> np.ndarray:
    bags = [featurize_message(r, vocab, encoder.features) for r in records[:limit]]
    if not bags:
        raise EmptyInputError("no queries to benchmark")
    h_x, _ = encoder.encode_inputs(bags)
    return np.asarray(h_x, dtype=np.float32)


def display_bench(points):
    """Display speed/recall points as a table."""
    table = Table(title="Speed vs. recall", show_header=True)
    table.add_column("Method", style="cyan")
    table.add_column("retrieve_m", justify="right")
    table.add_column("recall@30", style="green", justify="right")
    table.add_column("speedup", style="yellow", justify="right")
    table.add_column("queries/s", justify="right")
    for p in points:
        table.add_row(p.label, str(p.retrieve_m), f"{p.recall_at_30:.4f}",
                      f"{p.speedup_vs_exhaustive:.2f}x", f"{p.qps:,.0f}")
    console.print(table)


@cli.command()
@click.option("--responses", "rs_path", type=INPUT_FILE, default=None, help="Response set file")
@click.option("--index", "index_path", type=INPUT_FILE, default=None, help="Index file")
@click.option("--corpus", type=INPUT_FILE, default=None, help="Corpus whose messages are the queries")
@click.option("--vocab", "vocab_path", type=INPUT_FILE, default=None, help="Vocabulary file")
@click.option("--model", "model_path", type=INPUT_FILE, default=None, help="Dot-product model")
@click.option("--surrogate", type=int, default=None,
              help="Benchmark a seeded Gaussian mixture of this many vectors instead of artifacts")
@click.option("--dims", type=int, default=64, show_default=True, help="Surrogate dimension")
@click.option("--queries", "num_queries", type=int, default=1000, show_default=True, help="Query count")
@click.option("--sweep", default="30,50,100,200,500,1000", show_default=True, help="retrieve_m values")
@click.option("--no-rerank", is_flag=True, help="Rank by table scores only")
@click.option("--lsh-bits", type=int, default=None, help="Also sweep a sign-projection LSH baseline")
@click.option("--repeats", type=int, default=3, show_default=True, help="Timed repetitions")
@click.option("--warmup", type=int, default=100, show_default=True, help="Untimed warm-up queries")
@common_options
@click.option("--out", type=OUTPUT_FILE, required=True, help="Output CSV")
@handle_errors
def bench(rs_path, index_path, corpus, vocab_path, model_path, surrogate, dims, num_queries, sweep,
          no_rerank, lsh_bits, repeats, warmup, config_file, preset, seed, manifest, out):
    """Sweep retrieve_m and report recall@30 and speedup over exhaustive search."""
    cfg = _config(config_file, preset, seed)
    seed = cfg.get("seed", 0)
    runs = _manifest(manifest, out)
    if surrogate is not None:
        vectors, queries = gaussian_mixture(surrogate, num_queries, dims, seed=seed)
        hq = _fit_codebooks(cfg.section(HQConfig, d=dims), surrogate)
        index = HQIndex.build(vectors, hq, seed)
    else:
        if None in (rs_path, index_path, corpus, vocab_path, model_path):
            raise InvariantViolation(
                "bench needs --responses, --index, --corpus, --vocab and --model, or --surrogate"
            )
        for path in (rs_path, index_path, corpus):
            runs.verify(path)
        rs = ResponseSet.load(rs_path)
        index = HQIndex.load(index_path)
        check_index(index, rs, str(index_path))
        vocab = _load_vocab(vocab_path, runs)
        encoder = _load_encoder(model_path, vocab, runs)
        vectors = rs.encodings
        queries = _encode_queries(read_jsonl(corpus), encoder, vocab, num_queries)
    lsh = SignProjectionLSH(vectors, lsh_bits, seed) if lsh_bits else None
    points = speed_recall_bench(vectors, index, queries, _int_list(sweep), rerank=not no_rerank,
                                warmup=warmup, repeats=repeats, lsh=lsh)
    exporter = ExportManager()
    exporter.export_bench([p for p in points if p.label != "lsh"], out)
    runs.record("bench", out, cfg.snapshot())
    if lsh is not None:
        lsh_out = out.with_name(f"{out.stem}_lsh{out.suffix}")
        exporter.export_bench([p for p in points if p.label == "lsh"], lsh_out)
        runs.record("bench_lsh", lsh_out, cfg.snapshot())
    display_bench(points)


def _service(rs_path, vocab_path, model_path, joint_path, index_path, runs: RunManifest, cfg: Config):
    for path in (rs_path, index_path):
        if path is not None:
            runs.verify(path)
    vocab = _load_vocab(vocab_path, runs)
    rs = ResponseSet.load(rs_path)
    encoder = _load_encoder(model_path, vocab, runs) if model_path else None
    joint = _load_joint(joint_path, vocab, runs) if joint_path else None
    index = HQIndex.load(index_path) if index_path else None
    if index is not None:
        check_index(index, rs, str(index_path))
    hq = cfg.section(HQConfig, d=rs.d) if index is not None else None
    return SuggestionService(rs, vocab, encoder, joint, index, cfg.section(BiasConfig), hq)


def _default_mode(model_path, joint_path, index_path) -> str:
    if index_path:
        return "single_pass"
    if joint_path and model_path:
        return "two_pass"
    return "exhaustive"


def serving_options(func):
    func = click.option("--index", "index_path", type=INPUT_FILE, default=None, help="Index file")(func)
    func = click.option("--joint", "joint_path", type=INPUT_FILE, default=None, help="Joint model")(func)
    func = click.option("--model", "model_path", type=INPUT_FILE, default=None, help="Dot-product model")(func)
    func = click.option("--vocab", "vocab_path", type=INPUT_FILE, required=True, help="Vocabulary file")(func)
    func = click.option("--responses", "rs_path", type=INPUT_FILE, required=True, help="Response set file")(func)
    return func


@cli.command()
@serving_options
@click.option("--mode", type=click.Choice(MODES), default=None, help="Serving architecture")
@click.option("--n", type=int, default=None, help="Suggestions per request")
@click.option("--m", type=int, default=None, help="Two-pass shortlist size")
@click.option("--alpha", type=float, default=None, help="Bias weight")
@click.option("--retrieve-m", type=int, default=None, help="Index candidates before rerank")
@click.option("--text", default=None, help="Answer this one message instead of reading stdin")
@click.option("--subject", default=None, help="Subject for --text")
@common_options
@handle_errors
def suggest(rs_path, vocab_path, model_path, joint_path, index_path, mode, n, m, alpha, retrieve_m,
            text, subject, config_file, preset, seed, manifest):
    """
    Suggest replies.

    Reads one JSON request per line from stdin ({"body": ..., "subject": ...,
    "mode": ..., "n": ...}) and writes one JSON result per line, or answers
    a single --text message.
    """
    cfg = _config(config_file, preset, seed, alpha=alpha, retrieve_m=retrieve_m)
    runs = _manifest(manifest, rs_path)
    service = _service(rs_path, vocab_path, model_path, joint_path, index_path, runs, cfg)
    defaults = {"mode": mode or _default_mode(model_path, joint_path, index_path)}
    if n is not None:
        defaults["n"] = n
    if m is not None:
        defaults["m"] = m
    if text is not None:
        result = service.suggest(SuggestRequest(body=text, subject=subject, **defaults))
        click.echo(json.dumps(result.to_dict(), ensure_ascii=False))
        return
    failures = 0
    for line in sys.stdin:
        if not line.strip():
            continue
        try:
            click.echo(service.handle_line(line, defaults))
        except ReplySonorError as e:
            failures += 1
            click.echo(json.dumps({"error": {"kind": e.kind, "message": str(e)}}))
    if failures:
        _fail("request_failed", f"{failures} request(s) failed")


@cli.command()
@serving_options
@click.option("--corpus", type=INPUT_FILE, required=True, help="Corpus whose messages are the requests")
@click.option("--requests", "num_requests", type=int, default=200, show_default=True, help="Request count")
@click.option("--repeats", type=int, default=3, show_default=True, help="Passes over the requests")
@common_options
@click.option("--out", type=OUTPUT_FILE, default=None, help="Write the latencies as JSON")
@handle_errors
def latency(rs_path, vocab_path, model_path, joint_path, index_path, corpus, num_requests, repeats,
            config_file, preset, seed, manifest, out):
    """Median request latency of every serving architecture the artifacts allow."""
    cfg = _config(config_file, preset, seed)
    runs = _manifest(manifest, out or rs_path)
    runs.verify(corpus)
    service = _service(rs_path, vocab_path, model_path, joint_path, index_path, runs, cfg)
    modes = [mode for mode, ok in (
        ("exhaustive", joint_path is not None),
        ("two_pass", joint_path is not None and model_path is not None),
        ("single_pass", index_path is not None and model_path is not None),
    ) if ok]
    if not modes:
        raise InvariantViolation("no serving mode is possible with the given artifacts")
    records = read_jsonl(corpus)[:num_requests]
    requests = [SuggestRequest(body=str(r["body"]), subject=r.get("subject")) for r in records]
    results = architecture_latency_bench(service, requests, modes, repeats)
    if out is not None:
        ExportManager().export(results, out, "json")
    table = Table(title="Serving latency", show_header=True)
    table.add_column("Mode", style="cyan")
    table.add_column("median (us)", justify="right")
    table.add_column("vs. exhaustive", style="green", justify="right")
    for mode, row in results.items():
        ratio = row.get("relative_to_exhaustive")
        table.add_row(mode, f"{row['median_us']:,.1f}", "-" if ratio is None else f"{ratio:.3f}")
    console.print(table)


def _toy_batch(vocab_size: int, features: Sequence[str], k: int, rng: np.random.Generator) -> TrainingBatch:
    def bag(field_name: str) -> FeatureBag:
        ids = np.sort(rng.choice(vocab_size, size=int(rng.integers(1, 5)), replace=False))
        return FeatureBag(tuple((int(i), int(rng.integers(1, 3))) for i in ids), field_name)

    examples = [TrainingExample([bag(f) for f in features], bag("response")) for _ in range(k)]
    return TrainingBatch.from_examples(examples)


@cli.command()
@click.option("--model-kind", type=click.Choice(["dot", "joint"]), default="dot", show_default=True)
@click.option("--loss", type=click.Choice(LOSSES), default="multiple_negatives", show_default=True)
@click.option("--k", type=int, default=4, show_default=True, help="Batch size")
@click.option("--seed", type=int, default=0, show_default=True)
@handle_errors
def gradcheck(model_kind, loss, k, seed):
    """Check analytic gradients of a toy model against finite differences."""
    features = ("body", "subject")
    model = build_model(ModelConfig(model_kind, 8, (8, 8), None, seed), 30, features)
    batch = _toy_batch(30, features, k, np.random.default_rng(seed))
    report = gradient_check(model, batch, loss)

    table = Table(title=f"Gradient check ({model_kind}, {loss})", show_header=True)
    table.add_column("Parameter", style="cyan")
    table.add_column("max rel. error", justify="right")
    for name, err in sorted(report.max_rel_error.items()):
        table.add_row(name, f"{err:.2e}", style=None if err < report.tolerance else "red")
    console.print(table)
    click.echo(f"max_rel_error={report.worst:.3e}")
    if not report.passed:
        raise InvariantViolation(f"gradient check failed: worst relative error {report.worst:.3e}")


@cli.command()
@click.argument("corpus", type=INPUT_FILE)
@click.option("--vocab", "vocab_path", type=INPUT_FILE, required=True, help="Vocabulary file")
@click.option("--models", default="dot", show_default=True, help="Comma-separated model kinds")
@click.option("--losses", default="multiple_negatives,sigmoid", show_default=True, help="Comma-separated losses")
@click.option("--ks", default="32", show_default=True, help="Comma-separated batch sizes")
@click.option("--seeds", default="0,1,2", show_default=True, help="Comma-separated seeds")
@common_options
@click.option("--epochs", type=int, default=None, help="Training epochs")
@click.option("--out", type=OUTPUT_FILE, required=True, help="Output CSV")
@handle_errors
def ablate(corpus, vocab_path, models, losses, ks, seeds, config_file, preset, seed, manifest, epochs, out):
    """Train every (model, loss, K, seed) combination and report held-out P@1."""
    cfg = _config(config_file, preset, seed, epochs=epochs)
    runs = _manifest(manifest, out)
    runs.verify(corpus)
    vocab = _load_vocab(vocab_path, runs)
    train_records, test_records = _split(read_jsonl(corpus), cfg)
    configs = [AblationConfig(kind, loss, k) for kind in _str_list(models)
               for loss in _str_list(losses) for k in _int_list(ks)]
    for config in configs:
        if config.loss not in LOSSES:
            raise InvariantViolation(f"unknown loss {config.loss!r}")
    table = ablation_report(
        train_records, test_records, vocab, configs, _int_list(seeds),
        cfg.section(ModelConfig), cfg.section(TrainConfig), cfg.section(EvalConfig),
        cfg.section(FeaturizerConfig).features,
    )
    ExportManager().export_ablation(table, out)
    runs.record("ablation", out, cfg.snapshot())

    summary = Table(title="Ablation (P@1)", show_header=True)
    summary.add_column("Model", style="cyan")
    summary.add_column("Loss", style="cyan")
    summary.add_column("K", justify="right")
    summary.add_column("Mean", style="green", justify="right")
    summary.add_column("95% CI", justify="right")
    summary.add_column("Seeds", justify="right")
    for row in table.summary():
        summary.add_row(row.config.model, row.config.loss, str(row.config.k), f"{row.mean:.4f}",
                        f"[{row.ci_low:.4f}, {row.ci_high:.4f}]", str(row.seeds))
    console.print(summary)


if __name__ == "__main__":
    cli()
