"""
Acceptance Tests
Ablation, telemetry and bias-control behavior on the default 50-seed world
"""

from typing import Any

import pytest

from app.schemas.config_schemas import RunConfig
from app.services.evaluation_service import EvaluationService
from app.services.generation_service import Cell
from app.services.world_service import WorldService

pytestmark = [pytest.mark.integration, pytest.mark.slow]

P_THR_GRID = [0.0, 0.25, 0.5, 0.75, 1.0]
DECAY_GRID = [0.0, 0.05, 0.1, 0.2]


def default_world(**sections: Any):
    return WorldService.build_world(RunConfig.from_dict(dict(sections)))


@pytest.fixture(scope="module")
def world():
    return default_world()


@pytest.fixture(scope="module")
def cal_set(world):
    cal_set, _ = EvaluationService.calibrate(world)
    return cal_set


@pytest.fixture(scope="module")
def ablation(world, cal_set):
    _, report = EvaluationService.ablate(world, cal_set)
    return report.cells


class TestAblation:
    """The four-cell grid under the default configuration."""

    def test_each_component_lowers_chair(self, ablation):
        baseline = ablation[Cell.BASELINE.value].chair_i
        assert ablation[Cell.VTC_ONLY.value].chair_i < baseline
        assert ablation[Cell.AAR_ONLY.value].chair_i < baseline

    def test_combination_is_no_worse_than_either(self, ablation):
        best_single = min(
            ablation[Cell.VTC_ONLY.value].chair_i, ablation[Cell.AAR_ONLY.value].chair_i
        )
        assert ablation[Cell.BOTH.value].chair_i <= best_single + 1e-12

    def test_cover_is_retained(self, ablation):
        baseline = ablation[Cell.BASELINE.value]
        assert baseline.cover > 0.0
        assert ablation[Cell.BOTH.value].cover >= 0.9 * baseline.cover

    def test_truthful_steps_are_more_confident(self, ablation):
        split = ablation[Cell.BASELINE.value].confidence_split
        assert split.truthful_mean is not None
        assert split.hallucinatory_mean is not None
        assert split.truthful_mean > split.hallucinatory_mean

    def test_baseline_hallucinates(self, ablation):
        assert ablation[Cell.BASELINE.value].chair_i > 0.0


class TestConcentration:
    """Top-decile image attention share before and after calibration."""

    def test_baseline_is_concentrated(self, ablation):
        assert ablation[Cell.BASELINE.value].concentration_top_decile > 0.5

    def test_full_calibration_flattens(self):
        world = default_world(vtc={"beta": 1.0})
        cal_set, _ = EvaluationService.calibrate(world)
        _, report = EvaluationService.evaluate(world, cal_set, Cell.VTC_ONLY)
        assert report.concentration_top_decile < 0.2


class TestThresholdSweep:
    """Trigger rate across p_thr in the combined cell."""

    @pytest.fixture(scope="class")
    def frame(self, world, cal_set):
        return EvaluationService.sweep(world, cal_set, "p_thr", P_THR_GRID)

    def test_trigger_rate_nondecreasing(self, frame):
        rates = frame["trigger_rate"].tolist()
        assert rates[0] == 0.0
        assert all(b >= a for a, b in zip(rates, rates[1:]))

    def test_zero_threshold_matches_vtc_only(self, frame, ablation):
        vtc_only = ablation[Cell.VTC_ONLY.value]
        row = frame[frame["value"] == 0.0].iloc[0]
        assert row["chair_i"] == pytest.approx(vtc_only.chair_i)
        assert row["cover"] == pytest.approx(vtc_only.cover)
        assert row["mean_tokens"] == pytest.approx(vtc_only.mean_tokens)


class TestBiasControls:
    """Planted bias terms switched off or swept."""

    @pytest.mark.parametrize("cell", [Cell.BASELINE, Cell.AAR_ONLY])
    def test_unbiased_world_is_faithful(self, cell):
        world = default_world(bias={"sink_strength": 0.0, "decay": 0.0, "prior_weight": 0.0})
        _, report = EvaluationService.evaluate(world, None, cell)
        assert report.chair_i == 0.0
        assert report.cover > 0.0

    def test_chair_grows_with_decay(self):
        chairs = []
        for decay in DECAY_GRID:
            world = default_world(bias={"decay": decay})
            _, report = EvaluationService.evaluate(world, None, Cell.BASELINE)
            chairs.append(report.chair_i)
        assert all(b >= a for a, b in zip(chairs, chairs[1:]))
