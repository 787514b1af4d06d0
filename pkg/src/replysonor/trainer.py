"""
Training for the scoring models.

The default objective treats the other responses of a batch as negatives
(a K-way softmax per input); a sigmoid classifier loss over the same K x K
pairings is kept as the baseline. Multi-loss models add one loss per
message feature to the loss of the final score.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .config import TrainConfig
from .encoder import Gradient, ScoringModel, SparseRowGrad
from .errors import InvariantViolation, TrainingDivergedError
from .featurizer import FeatureBag

logger = logging.getLogger(__name__)

LOSSES = ("multiple_negatives", "sigmoid")


class TrainingExample(NamedTuple):
    """One (input, response) pair: a bag per input feature plus the response bag."""

    x_bags: List[FeatureBag]
    y_bag: FeatureBag


@dataclass
class TrainingBatch:
    """K aligned pairs; y_j is a negative for x_i whenever i != j."""

    x_bags: List[List[FeatureBag]]
    y_bags: List[FeatureBag]

    @classmethod
    def from_examples(cls, examples: Sequence[TrainingExample]) -> "TrainingBatch":
        return cls([list(e.x_bags) for e in examples], [e.y_bag for e in examples])

    def __len__(self) -> int:
        return len(self.y_bags)


@dataclass
class OptimizerState:
    """Step-decay learning-rate schedule and step counter."""

    initial_rate: float = 0.01
    decay_step: int = 10_000
    decayed_rate: float = 0.001
    step: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.initial_rate <= 0 or self.decayed_rate <= 0:
            raise InvariantViolation("learning rates must be strictly positive")

    @property
    def rate(self) -> float:
        return self.initial_rate if self.step < self.decay_step else self.decayed_rate

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "OptimizerState":
        return cls(cfg.lr, cfg.lr_decay_step, cfg.lr_decayed, 0, cfg.seed)


@dataclass
class LossReport:
    """Loss of one step: the final-score loss plus one loss per feature."""

    step: int
    loss: float
    per_feature: List[float]
    grad_norm: float
    lr: float = 0.0

    @property
    def total(self) -> float:
        return total_multiloss(self.loss, self.per_feature)


@dataclass
class TrainResult:
    model: ScoringModel
    curve: List[LossReport] = field(default_factory=list)
    epochs: int = 0
    steps: int = 0


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def _check_square(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise InvariantViolation(f"score matrix must be square, got shape {scores.shape}")
    return scores


def _row_logsumexp(scores: np.ndarray) -> np.ndarray:
    row_max = scores.max(axis=1, keepdims=True)
    return (row_max + np.log(np.exp(scores - row_max).sum(axis=1, keepdims=True)))[:, 0]


def multiple_negatives_loss(scores: np.ndarray) -> float:
    """
    Mean negative log-probability of the diagonal under a row-wise softmax.

    ``J = -(1/K) sum_i [S_ii - log sum_j exp(S_ij)]``
    """
    scores = _check_square(scores)
    return float(np.mean(_row_logsumexp(scores) - np.diag(scores)))


def multiple_negatives_grad(scores: np.ndarray) -> Tuple[float, np.ndarray]:
    """Loss and its derivative w.r.t. the score matrix: ``(softmax(S) - I) / K``."""
    scores = _check_square(scores)
    k = scores.shape[0]
    lse = _row_logsumexp(scores)
    probs = np.exp(scores - lse[:, None])
    loss = float(np.mean(lse - np.diag(scores)))
    return loss, (probs - np.eye(k)) / k


def _sigmoid(s: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * s))


def sigmoid_classifier_loss(scores: Sequence[Tuple[float, int]]) -> float:
    """Mean binary cross-entropy of sigmoid(score) against 0/1 labels."""
    if not len(scores):
        raise InvariantViolation("sigmoid loss needs at least one (score, label) pair")
    s = np.array([float(v) for v, _ in scores])
    y = np.array([float(l) for _, l in scores])
    return float(np.mean(y * np.logaddexp(0.0, -s) + (1.0 - y) * np.logaddexp(0.0, s)))


def sigmoid_matrix_grad(scores: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Sigmoid loss over a batch score matrix: K positives on the diagonal and
    K(K-1) negatives off it, all weighted equally.
    """
    scores = _check_square(scores)
    labels = np.eye(scores.shape[0])
    loss = float(np.mean(labels * np.logaddexp(0.0, -scores)
                         + (1.0 - labels) * np.logaddexp(0.0, scores)))
    return loss, (_sigmoid(scores) - labels) / scores.size


def total_multiloss(final: float, per_feature: Sequence[float]) -> float:
    """Sum of the final-score loss and the per-feature losses."""
    return float(final) + float(sum(per_feature))


LOSS_GRADS: Dict[str, Callable[[np.ndarray], Tuple[float, np.ndarray]]] = {
    "multiple_negatives": multiple_negatives_grad,
    "sigmoid": sigmoid_matrix_grad,
}


# --------------------------------------------------------------------------
# Gradients
# --------------------------------------------------------------------------


def batch_loss(model: ScoringModel, batch: TrainingBatch, loss: str = "multiple_negatives"):
    """Forward only: (final loss, [per-feature losses])."""
    loss_grad = LOSS_GRADS[loss]
    scores, feature_scores, _ = model.forward_batch(batch.x_bags, batch.y_bags)
    return loss_grad(scores)[0], [loss_grad(s)[0] for s in feature_scores]


def _grad_norm(grads: Dict[str, Gradient]) -> float:
    total = 0.0
    for grad in grads.values():
        if isinstance(grad, SparseRowGrad):
            total += grad.sq_norm()
        else:
            total += float(np.sum(np.asarray(grad, dtype=np.float64) ** 2))
    return math.sqrt(total)


def compute_gradients(
    model: ScoringModel, batch: TrainingBatch, loss: str = "multiple_negatives", step: int = 0
) -> Tuple[LossReport, Dict[str, Gradient]]:
    """
    Exact reverse-mode gradients of the total multi-loss.

    Args:
        model: Dot-product or joint scorer
        batch: Batch of K aligned pairs
        loss: "multiple_negatives" or "sigmoid"
        step: Step index recorded in the report

    Returns:
        (LossReport, parameter name -> gradient); embedding gradients only hold
        the rows the batch touched

    Raises:
        TrainingDivergedError: if the loss or any gradient is non-finite
    """
    if loss not in LOSS_GRADS:
        raise InvariantViolation(f"unknown loss {loss!r}; choose from {LOSSES}")
    loss_grad = LOSS_GRADS[loss]
    scores, feature_scores, cache = model.forward_batch(batch.x_bags, batch.y_bags)
    final_loss, d_scores = loss_grad(scores)
    feature_losses, d_features = [], []
    for s in feature_scores:
        value, grad = loss_grad(s)
        feature_losses.append(value)
        d_features.append(grad)

    values = [final_loss] + feature_losses
    if not all(math.isfinite(v) for v in values):
        raise TrainingDivergedError(
            "non-finite loss", step,
            {"loss": final_loss, "max_abs_score": float(np.nanmax(np.abs(scores)))},
        )

    dtype = model.dtype
    grads = model.backward(cache, d_scores.astype(dtype), [g.astype(dtype) for g in d_features])
    for name, grad in grads.items():
        values = grad.values if isinstance(grad, SparseRowGrad) else grad
        if not np.all(np.isfinite(values)):
            raise TrainingDivergedError("non-finite gradient", step, {"parameter": name})
    report = LossReport(step, final_loss, feature_losses, _grad_norm(grads))
    return report, grads


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


def iter_batches(
    examples: Sequence[TrainingExample], k: int, rng: np.random.Generator
) -> Iterator[TrainingBatch]:
    """Shuffle once and yield full batches of K; the last partial batch is dropped."""
    order = rng.permutation(len(examples))
    for start in range(0, len(order) - k + 1, k):
        yield TrainingBatch.from_examples([examples[i] for i in order[start:start + k]])


def train(
    model: ScoringModel,
    dataset: Sequence[TrainingExample],
    config: TrainConfig,
    on_report: Optional[Callable[[LossReport], None]] = None,
) -> TrainResult:
    """
    Train a copy of ``model`` with plain SGD.

    Args:
        model: Initial scorer (left untouched)
        dataset: Featurized training pairs
        config: Batch size, epochs, learning-rate schedule, seed and loss
        on_report: Optional callback receiving every LossReport

    Returns:
        TrainResult with the trained model and the per-step loss curve
    """
    if not len(dataset):
        raise InvariantViolation("training dataset is empty")
    if config.k < 1:
        raise InvariantViolation(f"batch size must be >= 1, got {config.k}")
    if config.k == 1 and config.loss == "multiple_negatives":
        logger.warning("batch size 1 gives an identically zero multiple-negatives loss")
    if len(dataset) < config.k:
        logger.warning("dataset has %d pairs, fewer than one batch of %d", len(dataset), config.k)

    trained = model.copy()
    state = OptimizerState.from_config(config)
    rng = np.random.default_rng(config.seed)
    result = TrainResult(trained)

    for epoch in range(config.epochs):
        epoch_losses = []
        for batch in iter_batches(dataset, config.k, rng):
            report, grads = compute_gradients(trained, batch, config.loss, state.step)
            report.lr = state.rate
            trained.apply_gradients(grads, state.rate)
            result.curve.append(report)
            epoch_losses.append(report.loss)
            if on_report is not None:
                on_report(report)
            if config.log_every and state.step % config.log_every == 0:
                logger.info(
                    "step %d loss %.4f total %.4f lr %g |grad| %.3g",
                    state.step, report.loss, report.total, report.lr, report.grad_norm,
                )
            state.step += 1
        result.epochs = epoch + 1
        if epoch_losses:
            logger.info("epoch %d: mean loss %.4f over %d batches",
                        epoch + 1, float(np.mean(epoch_losses)), len(epoch_losses))
    result.steps = state.step
    return result


def mean_training_loss(
    model: ScoringModel, dataset: Sequence[TrainingExample], k: int,
    loss: str = "multiple_negatives", seed: int = 0,
) -> float:
    """Mean final-score loss over one shuffled pass of full batches."""
    rng = np.random.default_rng(seed)
    losses = [batch_loss(model, b, loss)[0] for b in iter_batches(dataset, k, rng)]
    if not losses:
        raise InvariantViolation("dataset smaller than one batch")
    return float(np.mean(losses))
