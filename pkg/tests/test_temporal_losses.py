"""
Tests for the dream terms, temporal consistency terms, flow-trail term and the
weighted objective
"""

import numpy as np
import pytest

from conftest import make_micro_net, max_relative_error, smooth_indices
from errors import ContractError, IndexRangeError, ShapeError, ValidationError
from flowlab import ConsistencyMask
from temporal_losses import (
    FrameContext,
    LossWeights,
    controlled_loss,
    flow_trail_loss,
    layer_dream_loss,
    long_term_weights,
    loss_terms,
    temporal_loss,
    total_loss,
)
from tensor_core import Tensor, finite_difference_gradient, float64_precision


def row(values) -> np.ndarray:
    """1xNx1 image from a list of pixel values"""
    return np.asarray(values, dtype=np.float64).reshape(1, -1, 1)


# =============================================================================
# Dream terms
# =============================================================================


class TestDreamTerms:
    def test_layer_loss_of_zero_map(self):
        assert layer_dream_loss(np.zeros((3, 3))).item() == 0.0

    def test_layer_loss_is_negative_energy(self):
        assert layer_dream_loss(np.array([[1.0, 2.0], [3.0, 4.0]])).item() == -30.0

    def test_controlled_loss_value(self):
        assert controlled_loss(np.array([0.0, 3.0, 1.0]), 1).item() == -9.0

    def test_controlled_loss_gradient(self):
        logits = Tensor(np.array([0.0, 3.0, 1.0]), requires_grad=True)
        controlled_loss(logits, 1).backward()
        np.testing.assert_allclose(logits.grad, [0.0, -6.0, 0.0])

    def test_zero_logit_has_zero_gradient(self):
        logits = Tensor(np.array([0.0, 2.0]), requires_grad=True)
        loss = controlled_loss(logits, 0)
        loss.backward()
        assert loss.item() == 0.0
        assert not logits.grad.any()

    @pytest.mark.parametrize("index", [-1, 3])
    def test_class_out_of_range(self, index):
        with pytest.raises(IndexRangeError):
            controlled_loss(np.zeros(3), index)


# =============================================================================
# Long-term weights
# =============================================================================


class TestLongTermWeights:
    def test_nearest_offset_keeps_mask(self):
        weights = long_term_weights([np.array([1, 0, 1]), np.array([1, 1, 1])])
        np.testing.assert_array_equal(weights[0], [1, 0, 1])
        np.testing.assert_array_equal(weights[1], [0, 1, 0])

    def test_zero_masks(self):
        weights = long_term_weights([np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2))])
        assert all(not w.any() for w in weights)

    def test_accepts_consistency_masks(self):
        weights = long_term_weights([ConsistencyMask(np.eye(2)), ConsistencyMask(np.ones((2, 2)))])
        np.testing.assert_array_equal(weights[1], 1 - np.eye(2))

    def test_random_stacks_sum_to_at_most_one(self, rng):
        for _ in range(1000):
            depth = int(rng.integers(1, 7))
            masks = [rng.random((3, 4)) < 0.5 for _ in range(depth)]
            weights = long_term_weights(masks)
            assert np.all(np.sum(weights, axis=0) <= 1.0)
            np.testing.assert_array_equal(weights[0], masks[0])

    def test_misaligned_masks(self):
        with pytest.raises(ShapeError):
            long_term_weights([np.ones((2, 2)), np.ones((3, 2))])


# =============================================================================
# Temporal and trail terms
# =============================================================================


class TestTemporalLoss:
    def test_matching_priors_give_zero(self, rng):
        x = rng.uniform(size=(4, 4, 3))
        context = FrameContext(offsets=(1, 2), warped={1: x, 2: x}, masks={1: np.ones((4, 4)), 2: np.ones((4, 4))})
        assert temporal_loss(x, context).item() == 0.0

    def test_hand_evaluated_short_term(self):
        context = FrameContext(offsets=(1,), warped={1: row([0, 0, 0, 0])}, masks={1: np.array([[1, 1, 0, 0]])})
        assert temporal_loss(row([1, 2, 3, 4]), context).item() == pytest.approx(1.25)

    def test_zero_masks_give_zero(self, rng):
        x = rng.uniform(size=(3, 3, 3))
        context = FrameContext(offsets=(1,), warped={1: np.zeros((3, 3, 3))}, masks={1: np.zeros((3, 3))})
        assert temporal_loss(x, context).item() == 0.0

    def test_far_offset_only_counts_where_nearer_fail(self):
        context = FrameContext(
            offsets=(1, 2),
            warped={1: row([0, 0, 0]), 2: row([1, 1, 1])},
            masks={1: np.array([[1, 0, 1]]), 2: np.array([[1, 1, 1]])},
        )
        # pixel 1 falls back to offset 2: (0-1)^2; pixels 0 and 2 use offset 1: 0
        assert temporal_loss(row([0, 0, 0]), context).item() == pytest.approx(1.0 / 3.0)

    def test_missing_prior(self):
        context = FrameContext(offsets=(1, 2), warped={1: row([0])}, masks={1: np.ones((1, 1)), 2: np.ones((1, 1))})
        with pytest.raises(ContractError):
            temporal_loss(row([0]), context)

    def test_offsets_must_increase(self):
        with pytest.raises(ValidationError):
            FrameContext(offsets=(2, 1))


class TestFlowTrailLoss:
    def test_matching_prior_gives_zero(self):
        assert flow_trail_loss(row([1, 2]), row([1, 2]), np.ones((1, 2))).item() == 0.0

    def test_hand_evaluated(self):
        assert flow_trail_loss(row([1, 1]), row([0, 0]), np.ones((1, 2))).item() == pytest.approx(0.5)

    def test_doubling_consistent_pixels_halves_loss(self):
        one = flow_trail_loss(row([1, 1]), row([0, 0]), np.array([[1, 0]])).item()
        two = flow_trail_loss(row([1, 1]), row([0, 0]), np.array([[1, 1]])).item()
        assert one == pytest.approx(2 * two)

    def test_no_consistent_pixels(self):
        assert flow_trail_loss(row([1, 1]), row([0, 0]), np.zeros((1, 2))).item() == 0.0

    def test_masked_variant_ignores_inconsistent_residual(self):
        plain = flow_trail_loss(row([1, 5]), row([0, 0]), np.array([[1, 0]])).item()
        masked = flow_trail_loss(row([1, 5]), row([0, 0]), np.array([[1, 0]]), masked=True).item()
        assert plain == pytest.approx(26 / 2)
        assert masked == pytest.approx(1 / 2)


# =============================================================================
# Combined objective
# =============================================================================


class TestTotalLoss:
    def test_known_components(self):
        context = FrameContext(offsets=(1,), warped={1: row([0.0])}, masks={1: np.ones((1, 1))})
        x = row([np.sqrt(2e-3)])
        with float64_precision():
            loss = total_loss(x, LossWeights(alpha=10000, beta=300), context, lambda _: Tensor(1e-4))
        assert loss.item() == pytest.approx(1.6, rel=1e-6)

    def test_dream_only(self):
        dream = lambda _: Tensor(-0.25)
        assert total_loss(row([0.5]), LossWeights(alpha=8.0), None, dream).item() == pytest.approx(-2.0)

    def test_all_weights_zero(self, rng):
        x = rng.uniform(size=(2, 2, 3))
        context = FrameContext(offsets=(1,), warped={1: np.zeros((2, 2, 3))}, masks={1: np.ones((2, 2))})
        assert total_loss(x, LossWeights(0, 0, 0, 0), context, lambda _: Tensor(5.0)).item() == 0.0

    def test_inactive_terms_are_not_evaluated(self):
        context = FrameContext(offsets=(1,), warped={1: row([0])}, masks={1: np.ones((1, 1))})
        terms = loss_terms(row([1]), LossWeights(alpha=1.0, beta=2.0), context, lambda _: Tensor(0.0))
        assert sorted(terms) == ["dream", "short_term"]

    def test_weights_scale_linearly(self, rng):
        x = rng.uniform(size=(3, 3, 3))
        context = FrameContext(offsets=(1, 2), warped={1: np.zeros((3, 3, 3)), 2: np.ones((3, 3, 3))}, masks={1: np.eye(3), 2: np.ones((3, 3))})
        weights = LossWeights(alpha=2.0, beta=3.0, gamma=5.0, delta=7.0)
        dream = lambda t: t.square().sum()
        base = total_loss(x, weights, context, dream).item()
        assert total_loss(x, weights.scaled(2.0), context, dream).item() == pytest.approx(2 * base)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValidationError):
            LossWeights(beta=-1.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        net = make_micro_net(seed=seed)
        x = rng.uniform(size=(32, 32, 3))
        context = FrameContext(
            offsets=(1, 2),
            warped={1: rng.uniform(size=x.shape), 2: rng.uniform(size=x.shape)},
            masks={1: rng.random((32, 32)) < 0.7, 2: rng.random((32, 32)) < 0.7},
        )
        weights = LossWeights(alpha=1.0, beta=300.0, gamma=1000.0, delta=500.0)
        dream = lambda t: controlled_loss(net.forward_logits(t), 3)

        with float64_precision():
            param = Tensor(x, requires_grad=True)
            total_loss(param, weights, context, dream).backward()
            analytic = param.grad
        indices = smooth_indices(net, x, 8, rng)
        numeric = finite_difference_gradient(lambda a: total_loss(a, weights, context, dream).item(), x, indices)
        assert len(indices) >= 4
        assert max_relative_error(analytic, numeric, indices) <= 1e-3
