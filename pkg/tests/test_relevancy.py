"""
Relevancy Service Tests
Propagation, relative image relevancy, concentration and decay analyses
"""

import numpy as np
import pytest

from app.core.exceptions import DomainError
from app.models.world_models import TokenLabel
from app.schemas.config_schemas import Aggregation
from app.services.evaluation_service import EvaluationService
from app.services.generation_service import Cell
from app.services.relevancy_service import RelevancyMap, RelevancyService
from tests.conftest import make_step, make_trace, make_world


def causal_uniform(n: int) -> np.ndarray:
    attn = np.tril(np.ones((n, n)))
    return attn / attn.sum(axis=-1, keepdims=True)


def brute_force_rollout(attention: np.ndarray) -> np.ndarray:
    n = attention.shape[-1]
    product = np.eye(n)
    for layer in attention:
        product = (np.eye(n) + layer.mean(axis=0)) @ product
    return product / product.sum(axis=-1, keepdims=True)


def relevancy_traces(world):
    gcfg = EvaluationService.generation_config(world, None, Cell.BASELINE, relevancy=True)
    results = EvaluationService.run_suite(world, gcfg, world.config.seeds, Cell.BASELINE.value)
    return [r.trace for r in results]


class TestComputeRelevancy:
    """Test suite for compute_relevancy."""

    def test_identity_attention(self):
        attention = np.eye(3)[None, None]
        rmap = RelevancyService.compute_relevancy(attention)
        np.testing.assert_allclose(rmap.R, np.eye(3))

    def test_one_uniform_layer(self):
        rmap = RelevancyService.compute_relevancy(causal_uniform(2)[None, None])
        np.testing.assert_allclose(rmap.rollout[1], [0.25, 0.75])
        np.testing.assert_allclose(rmap.R[:, 1], [0.25, 0.75])

    def test_matches_matrix_product(self):
        rng = np.random.default_rng(4)
        n = 6
        raw = rng.random((2, 3, n, n)) * np.tril(np.ones((n, n)))
        attention = raw / raw.sum(axis=-1, keepdims=True)
        rmap = RelevancyService.compute_relevancy(attention)
        np.testing.assert_allclose(rmap.rollout, brute_force_rollout(attention))

    def test_shape_mismatch(self):
        with pytest.raises(DomainError):
            RelevancyService.compute_relevancy(np.ones((2, 3)))

    def test_gradient_weighted_needs_gradients(self):
        with pytest.raises(DomainError):
            RelevancyService.compute_relevancy(
                causal_uniform(2)[None, None], aggregation=Aggregation.GRADIENT_WEIGHTED
            )

    def test_gradient_shape_checked(self):
        with pytest.raises(DomainError):
            RelevancyService.compute_relevancy(
                causal_uniform(2)[None, None], gradients=np.ones((1, 1, 3, 3))
            )

    def test_unit_gradients_match_rollout(self):
        attention = causal_uniform(4)[None, None]
        weighted = RelevancyService.compute_relevancy(attention, np.ones_like(attention))
        plain = RelevancyService.compute_relevancy(attention)
        assert weighted.aggregation is Aggregation.GRADIENT_WEIGHTED
        np.testing.assert_allclose(weighted.R, plain.R)

    def test_negative_gradients_keep_self_influence(self):
        attention = causal_uniform(3)[None, None]
        rmap = RelevancyService.compute_relevancy(attention, -np.ones_like(attention))
        np.testing.assert_allclose(rmap.R, np.eye(3))


class TestRelativeImageRelevancy:
    """Test suite for relative_image_relevancy."""

    @staticmethod
    def column_map(column):
        n = len(column)
        R = np.eye(n)
        R[:, n - 1] = column
        return RelevancyMap(R=R, aggregation=Aggregation.UNIFORM_ROLLOUT)

    def test_hand_evaluated(self):
        rmap = self.column_map([0.2, 0.3, 0.25, 0.25])
        assert RelevancyService.relative_image_relevancy(rmap, 2, 3) == pytest.approx(0.5)

    def test_all_image(self):
        rmap = self.column_map([0.5, 0.5, 0.0])
        assert RelevancyService.relative_image_relevancy(rmap, 2, 2) == 1.0

    def test_no_image(self):
        rmap = self.column_map([0.0, 0.0, 1.0])
        assert RelevancyService.relative_image_relevancy(rmap, 2, 2) == 0.0

    def test_zero_column(self):
        rmap = self.column_map([0.0, 0.0, 0.0])
        with pytest.raises(DomainError):
            RelevancyService.relative_image_relevancy(rmap, 2, 2)

    def test_out_of_range(self):
        rmap = self.column_map([0.5, 0.5, 0.0])
        with pytest.raises(DomainError):
            RelevancyService.relative_image_relevancy(rmap, 2, 5)


class TestConcentration:
    """Test suite for concentration profiles."""

    def test_uniform(self):
        profile = RelevancyService.concentration_profile(np.full(10, 0.1))
        assert profile.top_k == 1
        assert profile.top_decile_share == pytest.approx(0.1)
        assert profile.cumulative_share[-1] == pytest.approx(1.0)

    def test_one_hot(self):
        values = np.zeros(10)
        values[3] = 0.7
        assert RelevancyService.concentration_profile(values).top_decile_share == 1.0

    def test_curve_is_monotone(self):
        profile = RelevancyService.concentration_profile(np.array([0.1, 0.5, 0.2, 0.2]))
        assert profile.cumulative_share == sorted(profile.cumulative_share)
        assert profile.cumulative_share[0] == pytest.approx(0.5)

    @pytest.mark.parametrize("bad", [[], [0.0, 0.0], [0.5, -0.1]])
    def test_rejects_degenerate(self, bad):
        with pytest.raises(DomainError):
            RelevancyService.concentration_profile(np.array(bad))

    def test_trace_concentration_needs_snapshots(self):
        trace = make_trace([make_step(0)])
        with pytest.raises(DomainError):
            RelevancyService.trace_concentration([trace], (0, 1))

    def test_trace_concentration_averages_layers(self):
        snapshot = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
        trace = make_trace([make_step(0, image_attention=snapshot)])
        profile = RelevancyService.trace_concentration([trace], (0, 2))
        assert profile.cumulative_share == pytest.approx([0.5, 1.0, 1.0])


class TestDecayTrace:
    """Test suite for decay_trace and rank_correlation."""

    def test_constant_series(self):
        traces = [make_trace([make_step(t, r_rel=0.4) for t in range(5)])]
        assert RelevancyService.decay_trace(traces).correlation == 0.0

    def test_decreasing_series(self):
        traces = [make_trace([make_step(t, r_rel=0.5 - 0.05 * t) for t in range(5)])]
        assert RelevancyService.decay_trace(traces).correlation == pytest.approx(-1.0)

    def test_common_positions_only(self):
        long = make_trace([make_step(t, r_rel=0.5) for t in range(6)])
        short = make_trace([make_step(t, r_rel=0.3) for t in range(3)], seed=1)
        series = RelevancyService.decay_trace([long, short])
        assert series.positions == [0, 1, 2]
        assert series.mean_r_rel == pytest.approx([0.4, 0.4, 0.4])

    def test_too_few_positions(self):
        traces = [make_trace([make_step(t, r_rel=0.4) for t in range(2)])]
        with pytest.raises(DomainError):
            RelevancyService.decay_trace(traces)

    def test_needs_relevancy(self):
        with pytest.raises(DomainError):
            RelevancyService.decay_trace([make_trace([make_step(t) for t in range(4)])])

    def test_rank_correlation(self):
        assert RelevancyService.rank_correlation([0, 1, 2], [3, 2, 1]) == pytest.approx(-1.0)
        assert RelevancyService.rank_correlation([0, 1, 2], [1, 1, 1]) == 0.0


class TestTokenAnalysis:
    """Test suite for token_analysis."""

    def test_split_by_label(self):
        steps = [
            make_step(0, r_rel=0.6, label=TokenLabel.TRUTHFUL),
            make_step(1, r_rel=0.5, label=TokenLabel.FUNCTION),
            make_step(2, r_rel=0.4, label=TokenLabel.HALLUCINATORY),
            make_step(3, r_rel=0.7, label=TokenLabel.TRUTHFUL),
            make_step(4, r_rel=0.3, label=TokenLabel.HALLUCINATORY),
        ]
        analysis = RelevancyService.token_analysis([make_trace(steps)])
        assert analysis.truthful_count == 2
        assert analysis.hallucinatory_count == 2
        assert analysis.truthful_mean_r_rel == pytest.approx(0.65)
        assert analysis.hallucinatory_mean_r_rel == pytest.approx(0.35)
        assert analysis.truthful_mean_position == pytest.approx(1.5)
        assert analysis.hallucinatory_mean_position == pytest.approx(3.0)
        assert 0.0 <= analysis.mannwhitney_p <= 1.0

    def test_single_group_has_no_test(self):
        steps = [make_step(0, r_rel=0.6, label=TokenLabel.TRUTHFUL)]
        analysis = RelevancyService.token_analysis([make_trace(steps)])
        assert analysis.mannwhitney_p is None
        assert analysis.hallucinatory_mean_r_rel is None


@pytest.mark.integration
class TestPlantedWorldRelevancy:
    """Relevancy trends guaranteed by the planted score construction."""

    def test_decay_lowers_image_relevancy(self, world):
        series = RelevancyService.decay_trace(relevancy_traces(world))
        assert series.correlation < -0.5
        assert series.mean_r_rel == sorted(series.mean_r_rel, reverse=True)

    def test_no_decay_no_trend(self):
        world = make_world(bias={"decay": 0.0})
        series = RelevancyService.decay_trace(relevancy_traces(world))
        assert series.correlation == 0.0

    def test_sinks_concentrate_attention(self):
        world = make_world(bias={"decay": 0.0})
        profile = RelevancyService.trace_concentration(relevancy_traces(world), (0, 1))
        assert profile.top_decile_share > 0.5

    def test_no_sinks_spread_attention(self):
        world = make_world(bias={"decay": 0.0, "sink_strength": 0.0})
        profile = RelevancyService.trace_concentration(relevancy_traces(world), (0, 1))
        assert profile.top_decile_share < 0.2

    def test_gradient_weighted_step(self, world):
        prompt = world.prompt(world.scene(0))
        result = world.decoder.forward_full(prompt)
        token = int(np.argmax(result.logits))
        grads = RelevancyService.attention_gradients(world.decoder, prompt, None, token)
        assert grads.shape == result.attention.shape
        n = grads.shape[-1]
        assert np.all(grads[..., np.triu_indices(n, k=1)[0], np.triu_indices(n, k=1)[1]] == 0)
        r_rel = RelevancyService.step_relevancy(result, Aggregation.GRADIENT_WEIGHTED, grads)
        assert 0.0 <= r_rel <= 1.0
