"""Finite-difference check of the analytic gradients."""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .encoder import ScoringModel, SparseRowGrad
from .trainer import TrainingBatch, batch_loss, compute_gradients, total_multiloss

logger = logging.getLogger(__name__)


@dataclass
class GradCheckReport:
    """Worst relative error per parameter."""

    max_rel_error: Dict[str, float] = field(default_factory=dict)
    checked: int = 0
    tolerance: float = 1e-3

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def gradient_check(
    model: ScoringModel,
    batch: TrainingBatch,
    loss: str = "multiple_negatives",
    eps: float = 1e-3,
    tolerance: float = 1e-3,
    floor: float = 1e-8,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compare analytic gradients with central differences of the total loss.

    The check runs on a float64 copy of ``model``. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.

    Args:
        model: Scorer to check (not modified)
        batch: Batch to differentiate on
        loss: Objective name
        eps: Finite-difference step
        tolerance: Pass threshold on the relative error
        floor: Denominator floor for near-zero gradients
        max_entries: If set, sample at most this many entries per parameter
        seed: Sampling seed

    Returns:
        GradCheckReport
    """
    twin = model.copy(np.float64)
    _, grads = compute_gradients(twin, batch, loss)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)

    def total() -> float:
        final, feats = batch_loss(twin, batch, loss)
        return total_multiloss(final, feats)

    for name, param in twin.named_parameters():
        grad = grads[name]
        analytic = grad.to_dense(param.shape) if isinstance(grad, SparseRowGrad) else grad
        flat_param = param.reshape(-1)
        flat_grad = np.asarray(analytic).reshape(-1)
        indices = np.arange(flat_param.size)
        if max_entries is not None and flat_param.size > max_entries:
            indices = np.sort(rng.choice(flat_param.size, max_entries, replace=False))
        worst = 0.0
        for idx in indices:
            original = flat_param[idx]
            flat_param[idx] = original + eps
            plus = total()
            flat_param[idx] = original - eps
            minus = total()
            flat_param[idx] = original
            numeric = (plus - minus) / (2 * eps)
            a = float(flat_grad[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, rel)
        report.max_rel_error[name] = worst
        report.checked += len(indices)
    logger.info("gradient check: %d entries, worst relative error %.2e", report.checked, report.worst)
    return report
