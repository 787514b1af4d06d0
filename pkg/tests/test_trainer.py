"""Tests for the losses, gradients and the training loop."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from tests.conftest import FEATURES, random_batch
from replysonor.config import ModelConfig, TrainConfig
from replysonor.corpus import featurize_dataset, iter_texts, synthetic_corpus
from replysonor.encoder import DotProductEncoder, JointScorer, SparseRowGrad, build_model
from replysonor.errors import InvariantViolation, TrainingDivergedError
from replysonor.featurizer import FeatureBag, build_vocabulary
from replysonor.gradcheck import gradient_check
from replysonor.trainer import (
    OptimizerState,
    TrainingExample,
    batch_loss,
    compute_gradients,
    iter_batches,
    mean_training_loss,
    multiple_negatives_grad,
    multiple_negatives_loss,
    sigmoid_classifier_loss,
    sigmoid_matrix_grad,
    total_multiloss,
    train,
)



class TestMultipleNegativesLoss:
    """Tests for the in-batch softmax loss"""

    def test_single_example(self):
        """Test K=1 gives zero loss"""
        assert multiple_negatives_loss(np.array([[3.7]])) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("k", [2, 5, 32])
    def test_constant_matrix(self, k):
        """Test equal scores give log K"""
        assert multiple_negatives_loss(np.full((k, k), 1.5)) == pytest.approx(math.log(k), abs=1e-9)

    def test_two_by_two(self):
        """Test a hand-evaluated 2 x 2 case"""
        expected = math.log(1 + math.exp(-2))
        assert multiple_negatives_loss(np.array([[2.0, 0.0], [0.0, 2.0]])) == pytest.approx(expected, abs=1e-9)
        assert expected == pytest.approx(0.126928, abs=1e-6)

    def test_row_shift_invariance(self, rng):
        """Test adding any per-row constant leaves the loss unchanged"""
        for _ in range(100):
            k = int(rng.integers(1, 65))
            scores = rng.normal(scale=5.0, size=(k, k))
            shift = rng.normal(scale=50.0, size=(k, 1))
            assert multiple_negatives_loss(scores + shift) == pytest.approx(
                multiple_negatives_loss(scores), abs=1e-6
            )

    def test_non_negative(self, rng):
        """Test the loss is never negative"""
        for _ in range(50):
            k = int(rng.integers(1, 20))
            assert multiple_negatives_loss(rng.normal(scale=10.0, size=(k, k))) >= 0.0

    def test_large_scores_stable(self):
        """Test huge scores do not overflow"""
        scores = np.array([[1000.0, 0.0], [0.0, 1000.0]])
        assert multiple_negatives_loss(scores) == pytest.approx(0.0, abs=1e-12)

    def test_non_square(self):
        """Test a non-square matrix is rejected"""
        with pytest.raises(InvariantViolation):
            multiple_negatives_loss(np.zeros((2, 3)))

    def test_gradient_matches_finite_differences(self, rng):
        """Test (softmax - I) / K against central differences"""
        scores = rng.normal(size=(4, 4))
        _, grad = multiple_negatives_grad(scores)
        eps = 1e-6
        for i in range(4):
            for j in range(4):
                bumped = scores.copy()
                bumped[i, j] += eps
                plus = multiple_negatives_loss(bumped)
                bumped[i, j] -= 2 * eps
                minus = multiple_negatives_loss(bumped)
                assert grad[i, j] == pytest.approx((plus - minus) / (2 * eps), abs=1e-7)


class TestSigmoidLoss:
    """Tests for the sigmoid classifier baseline"""

    def test_zero_score(self):
        """Test sigma(0) gives log 2"""
        assert sigmoid_classifier_loss([(0.0, 1)]) == pytest.approx(math.log(2), abs=1e-12)

    def test_symmetry(self):
        """Test (s, 1) and (-s, 0) give equal loss"""
        for s in (-3.0, 0.4, 7.5):
            assert sigmoid_classifier_loss([(s, 1)]) == pytest.approx(sigmoid_classifier_loss([(-s, 0)]))

    def test_two_pairs(self):
        """Test a hand-evaluated mean"""
        expected = (math.log(1 + math.exp(-2)) + math.log(1 + math.exp(-1))) / 2
        assert sigmoid_classifier_loss([(2.0, 1), (-1.0, 0)]) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.220186, abs=1e-6)

    def test_empty(self):
        """Test an empty list is rejected"""
        with pytest.raises(InvariantViolation):
            sigmoid_classifier_loss([])

    def test_matrix_layout(self, rng):
        """Test the matrix loss labels the diagonal positive and the rest negative"""
        scores = rng.normal(size=(3, 3))
        pairs = [(scores[i, j], int(i == j)) for i in range(3) for j in range(3)]
        loss, grad = sigmoid_matrix_grad(scores)
        assert loss == pytest.approx(sigmoid_classifier_loss(pairs), abs=1e-12)
        sigma = 1 / (1 + np.exp(-scores))
        assert_allclose(grad, (sigma - np.eye(3)) / 9, rtol=1e-10)


class TestTotalMultiloss:
    """Tests for the summed multi-loss"""

    def test_no_features(self):
        assert total_multiloss(1.0, []) == 1.0

    def test_sum(self):
        assert total_multiloss(1.0, [0.5, 0.25]) == 1.75

    def test_single_feature_matches_terms(self, rng):
        """Test total = J(x, y) + J(x^1, y) recomputed independently"""
        model = DotProductEncoder.build(30, 8, [8], [8], ("body",), seed=3)
        batch = random_batch(rng, 30, 4, ("body",))
        final, feats = batch_loss(model, batch)
        scores, feature_scores, _ = model.forward_batch(batch.x_bags, batch.y_bags)
        expected = multiple_negatives_loss(scores) + multiple_negatives_loss(feature_scores[0])
        assert total_multiloss(final, feats) == pytest.approx(expected, abs=1e-9)


class TestGradients:
    """Tests for reverse-mode gradients"""

    @pytest.mark.parametrize("kind", ["dot", "joint"])
    @pytest.mark.parametrize("loss", ["multiple_negatives", "sigmoid"])
    def test_gradient_check(self, rng, kind, loss):
        """Test every parameter against central finite differences (d=8, towers 8-8, M=2, K=4)"""
        model = build_model(ModelConfig(kind, 8, (8, 8), None, 5), 30, FEATURES)
        batch = random_batch(rng, 30, 4)
        report = gradient_check(model, batch, loss, eps=1e-3, tolerance=1e-3)
        assert report.passed, report.max_rel_error
        assert set(report.max_rel_error) == {name for name, _ in model.named_parameters()}

    def test_gradient_check_catches_small_errors(self, rng, monkeypatch):
        """Test a 5e-7 shift on every entry fails the check, zero gradients included"""
        import replysonor.gradcheck as gradcheck

        def shifted(model, batch, loss):
            report, grads = compute_gradients(model, batch, loss)
            shapes = dict(model.named_parameters())
            return report, {
                name: (g.to_dense(shapes[name].shape) if isinstance(g, SparseRowGrad) else g) + 5e-7
                for name, g in grads.items()
            }

        model = build_model(ModelConfig("dot", 8, (8, 8), None, 5), 30, FEATURES)
        batch = random_batch(rng, 30, 4)
        monkeypatch.setattr(gradcheck, "compute_gradients", shifted)
        assert not gradient_check(model, batch, "multiple_negatives").passed

    def test_single_example_gradients_vanish(self, rng):
        """Test K=1 gives identically zero gradients"""
        model = DotProductEncoder.build(30, 8, [8], [8], FEATURES, seed=1)
        report, grads = compute_gradients(model, random_batch(rng, 30, 1))
        assert report.loss == pytest.approx(0.0, abs=1e-7)
        for name, grad in grads.items():
            values = grad.values if isinstance(grad, SparseRowGrad) else grad
            assert_array_equal(values, np.zeros_like(values), err_msg=name)

    def test_embedding_gradients_are_sparse(self, rng):
        """Test ids absent from the batch get no gradient rows"""
        model = JointScorer.build(50, 8, [8], [8], FEATURES, zero=True)
        batch = random_batch(rng, 50, 3)
        _, grads = compute_gradients(model, batch)
        x_ids = {i for bags in batch.x_bags for bag in bags for i in bag.ids}
        y_ids = {i for bag in batch.y_bags for i in bag.ids}
        assert set(grads["input_embeddings"].rows.tolist()) <= x_ids
        assert set(grads["response_embeddings"].rows.tolist()) <= y_ids
        dense = grads["input_embeddings"].to_dense((50, 8))
        untouched = sorted(set(range(50)) - x_ids)
        assert_array_equal(dense[untouched], 0.0)

    def test_divergence_detected(self, rng):
        """Test a non-finite loss aborts with diagnostics"""
        model = DotProductEncoder.build(30, 8, [8], [8], FEATURES, seed=1)
        model.input_embeddings.matrix[:] = np.nan
        with pytest.raises(TrainingDivergedError) as info:
            compute_gradients(model, random_batch(rng, 30, 4), step=17)
        assert info.value.step == 17

    def test_unknown_loss(self, rng):
        model = DotProductEncoder.build(30, 8, [8], [8], FEATURES)
        with pytest.raises(InvariantViolation):
            compute_gradients(model, random_batch(rng, 30, 2), "hinge")


class TestOptimizerState:
    """Tests for the step-decay schedule"""

    def test_decay(self):
        state = OptimizerState(0.01, 3, 0.001)
        rates = []
        for _ in range(5):
            rates.append(state.rate)
            state.step += 1
        assert rates == [0.01, 0.01, 0.01, 0.001, 0.001]

    def test_positive_rates(self):
        with pytest.raises(InvariantViolation):
            OptimizerState(0.0, 10, 0.001)

    def test_from_config(self):
        state = OptimizerState.from_config(TrainConfig(lr=0.2, lr_decay_step=7, lr_decayed=0.02, seed=4))
        assert (state.initial_rate, state.decay_step, state.decayed_rate, state.seed) == (0.2, 7, 0.02, 4)


def _echo_dataset(n: int):
    """Pairs whose response bag is the input id itself."""
    return [
        TrainingExample([FeatureBag(((i, 1),), "body"), FeatureBag(((i, 1),), "subject")],
                        FeatureBag(((i, 1),), "response"))
        for i in range(n)
    ]


class TestTrain:
    """Tests for the SGD loop"""

    def test_batches_drop_partial(self, rng):
        """Test only full batches are produced"""
        batches = list(iter_batches(_echo_dataset(10), 4, rng))
        assert [len(b) for b in batches] == [4, 4]

    def test_zero_epochs(self):
        """Test no epochs leaves the model unchanged"""
        model = DotProductEncoder.build(20, 8, [8], [8], FEATURES, seed=2)
        result = train(model, _echo_dataset(20), TrainConfig(k=4, epochs=0))
        assert result.model.content_hash() == model.content_hash()
        assert result.curve == []

    def test_input_model_untouched(self):
        """Test training works on a copy"""
        model = DotProductEncoder.build(20, 8, [8], [8], FEATURES, seed=2)
        before = model.content_hash()
        train(model, _echo_dataset(20), TrainConfig(k=4, epochs=2, lr=0.1, log_every=0))
        assert model.content_hash() == before

    def test_duplicated_pair_stays_at_log_two(self):
        """Test identical pairs in a K=2 batch keep every row constant"""
        pair = TrainingExample([FeatureBag(((1, 1),), "body"), FeatureBag(((2, 1),), "subject")],
                               FeatureBag(((3, 1),), "response"))
        model = DotProductEncoder.build(10, 8, [8], [8], FEATURES, seed=0)
        result = train(model, [pair, pair], TrainConfig(k=2, epochs=5, lr=0.5, log_every=0))
        assert len(result.curve) == 5
        for report in result.curve:
            assert report.loss == pytest.approx(math.log(2), abs=1e-5)
            assert report.per_feature == pytest.approx([math.log(2)] * 2, abs=1e-5)

    def test_deterministic(self):
        """Test identical seeds give identical curves and parameters"""
        model = DotProductEncoder.build(40, 8, [8], [8], FEATURES, seed=3)
        cfg = TrainConfig(k=8, epochs=2, lr=0.1, seed=9, log_every=0)
        a = train(model, _echo_dataset(40), cfg)
        b = train(model, _echo_dataset(40), cfg)
        assert [r.loss for r in a.curve] == [r.loss for r in b.curve]
        assert a.model.content_hash() == b.model.content_hash()

    def test_learning_rate_recorded(self):
        """Test each report carries the scheduled rate"""
        model = DotProductEncoder.build(40, 8, [8], [8], FEATURES, seed=3)
        result = train(model, _echo_dataset(40), TrainConfig(k=8, epochs=2, lr=0.1, lr_decay_step=3,
                                                              lr_decayed=0.01, log_every=0))
        assert [r.lr for r in result.curve] == [0.1, 0.1, 0.1, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01]
        assert [r.step for r in result.curve] == list(range(10))

    def test_loss_decreases(self, small_synthetic, small_vocab):
        """Test training lowers the loss on the synthetic topic corpus"""
        examples = featurize_dataset(small_synthetic, small_vocab, FEATURES)
        model = build_model(ModelConfig("dot", 16, (16, 16), None, 0), len(small_vocab), FEATURES)
        before = mean_training_loss(model, examples, 16)
        trained = train(model, examples, TrainConfig(k=16, epochs=3, lr=0.1, log_every=0)).model
        assert mean_training_loss(trained, examples, 16) < before

    def test_empty_dataset(self):
        model = DotProductEncoder.build(10, 8, [8], [8], FEATURES)
        with pytest.raises(InvariantViolation):
            train(model, [], TrainConfig())

    @pytest.mark.slow
    def test_synthetic_corpus_learnable(self):
        """Test K=32 training on 20k topic pairs gets below a quarter of log K"""
        records = synthetic_corpus(20_000, 50, seed=0)
        vocab = build_vocabulary(iter_texts(records, FEATURES), 2, 5000, 2)
        examples = featurize_dataset(records, vocab, FEATURES)
        model = build_model(ModelConfig("dot", 64, (64, 64, 64), None, 0), len(vocab), FEATURES)
        result = train(model, examples, TrainConfig(k=32, epochs=10, lr=0.1, log_every=0))
        assert mean_training_loss(result.model, examples, 32) < 0.25 * math.log(32)
