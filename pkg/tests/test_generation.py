"""
Generation Service Tests
Dual-pass decoding, the ablation grid, replay and failure handling
"""

import dataclasses

import numpy as np
import pytest

from app.core.exceptions import DomainError, GenerationAborted
from app.models.decoder import HookSet, ToyDecoder, TokenSequence
from app.models.world_models import EOS, SEP
from app.schemas.config_schemas import AarConfig, Normalization
from app.schemas.trace_schemas import StopReason
from app.services.aar_service import AARService, ScaleDecision
from app.services.evaluation_service import EvaluationService
from app.services.generation_service import Cell, GenerationConfig, GenerationService
from app.services.vtc_service import VTCService


def plain_greedy(decoder, prompt, max_new_tokens):
    seq, tokens = prompt, []
    for _ in range(max_new_tokens):
        token = int(np.argmax(decoder.forward_full(seq).logits))
        tokens.append(token)
        seq = seq.append(token)
        if token == EOS:
            break
    return tokens


@pytest.fixture
def cal_set(world):
    cal_set, _ = EvaluationService.calibrate(world)
    return cal_set


@pytest.fixture
def prompt(world):
    return world.prompt(world.scene(1))


class NanAfter(ToyDecoder):
    """Produces non-finite logits from the given step on."""

    def __init__(self, cfg, fail_at):
        super().__init__(cfg)
        self.fail_at = fail_at

    def readout(self, seq, hidden, attention):
        logits = super().readout(seq, hidden, attention)
        if seq.num_generated >= self.fail_at:
            logits = logits * np.nan
        return logits


class TestGenerate:
    """Test suite for GenerationService.generate."""

    def test_no_components_is_plain_greedy(self, world, prompt):
        trace = GenerationService.generate(world.decoder, prompt, GenerationConfig(8))
        assert trace.token_ids == plain_greedy(world.decoder, prompt, 8)
        assert trace.triggered_steps == 0

    def test_deterministic(self, world, prompt, cal_set):
        gcfg = EvaluationService.generation_config(world, cal_set, Cell.BOTH)
        first = GenerationService.generate(world.decoder, prompt, gcfg, seed=1)
        second = GenerationService.generate(world.decoder, prompt, gcfg, seed=1)
        assert first == second

    def test_zero_threshold_equals_vtc_only(self, world, prompt, cal_set):
        base = EvaluationService.generation_config(world, cal_set, Cell.BOTH)
        gcfg = dataclasses.replace(base, aar=AarConfig(p_thr=0.0))
        both = GenerationService.generate(world.decoder, prompt, gcfg)
        vtc_only = GenerationService.generate(world.decoder, prompt, gcfg.for_cell(Cell.VTC_ONLY))
        assert both.triggered_steps == 0
        assert both.token_ids == vtc_only.token_ids

    def test_degenerate_caac_equals_baseline(self, world, prompt, cal_set):
        gcfg = GenerationConfig(
            max_new_tokens=8,
            vtc=cal_set.with_beta(0.0),
            aar=AarConfig(p_thr=0.0),
        )
        traces = GenerationService.ablate(world.decoder, prompt, gcfg)
        assert traces[Cell.BOTH].token_ids == traces[Cell.BASELINE].token_ids
        assert [s.p_t for s in traces[Cell.BOTH].steps] == [
            s.p_t for s in traces[Cell.BASELINE].steps
        ]

    def test_full_threshold_triggers_unsure_steps(self, world, prompt):
        gcfg = GenerationConfig(8, aar=AarConfig(p_thr=1.0, lambda_max=2.0))
        trace = GenerationService.generate(world.decoder, prompt, gcfg)
        for step in trace.steps:
            assert step.triggered == (step.p_t < 1.0)
            assert step.pass2_executed == step.triggered
            if step.triggered:
                assert step.lambda_t == pytest.approx(step.p_t + 2.0 * (1.0 - step.p_t))
            else:
                assert step.lambda_t == 1.0
                assert step.image_mass_final == step.image_mass_pass1

    def test_aar_raises_final_image_mass(self, world, prompt):
        """Planted image scores are positive, so scaling them adds image mass."""
        baseline = world.decoder.forward_full(prompt)
        hook = AARService.make_hook(ScaleDecision(0.2, True, 1.4), AarConfig())
        scaled = world.decoder.forward_full(prompt, HookSet().with_hook(hook))
        assert scaled.final_image_mass() > baseline.final_image_mass()

    @pytest.mark.parametrize("lambda_t", [1.2, 1.5])
    def test_aar_never_favours_stopping(self, world, prompt, lambda_t):
        hook = AARService.make_hook(ScaleDecision(0.2, True, lambda_t), AarConfig())
        hooks = HookSet().with_hook(hook)
        seq = prompt
        for _ in range(world.config.generation.max_new_tokens):
            baseline = world.decoder.forward_full(seq)
            scaled = world.decoder.forward_full(seq, hooks)
            assert scaled.final_image_mass() >= baseline.final_image_mass()
            assert scaled.logits[EOS] <= baseline.logits[EOS]
            seq = seq.append(SEP)

    def test_min_new_tokens_suppresses_eos(self, world, prompt):
        trace = GenerationService.generate(
            world.decoder, prompt, GenerationConfig(8, min_new_tokens=8)
        )
        assert len(trace.steps) == 8
        assert EOS not in trace.token_ids
        assert trace.stop_reason is StopReason.MAX_NEW_TOKENS

    def test_eos_ends_stream(self, world, prompt):
        trace = GenerationService.generate(world.decoder, prompt, GenerationConfig(8))
        if trace.stop_reason is StopReason.EOS:
            assert trace.token_ids[-1] == EOS
        else:
            assert len(trace.steps) == 8

    def test_attention_capture(self, world, prompt):
        trace = GenerationService.generate(
            world.decoder, prompt, GenerationConfig(4, capture_attention=True)
        )
        cfg = world.model_config
        assert trace.has_attention
        snapshot = trace.steps[0].image_attention
        assert len(snapshot) == cfg.num_layers
        assert len(snapshot[0]) == cfg.image_slots

    def test_prompt_with_generated_tokens(self, world, prompt):
        with pytest.raises(DomainError):
            GenerationService.generate(world.decoder, prompt.append(EOS), GenerationConfig(4))

    def test_numeric_failure_keeps_completed_steps(self, tiny_config):
        decoder = NanAfter(tiny_config, fail_at=2)
        prompt = TokenSequence.build([5, 6, 7], [0, 8])
        with pytest.raises(GenerationAborted) as excinfo:
            GenerationService.generate(
                decoder, prompt, GenerationConfig(6, eos_token=11, min_new_tokens=6)
            )
        assert len(excinfo.value.partial_trace.steps) == 2
        assert excinfo.value.exit_code == 3


class TestGenerationConfig:
    """Test suite for GenerationConfig."""

    def test_limits_validated(self):
        with pytest.raises(DomainError):
            GenerationConfig(0)
        with pytest.raises(DomainError):
            GenerationConfig(4, min_new_tokens=5)

    def test_for_cell_drops_components(self, cal_set):
        gcfg = GenerationConfig(4, vtc=cal_set, aar=AarConfig())
        assert gcfg.for_cell(Cell.BASELINE).vtc is None
        assert gcfg.for_cell(Cell.BASELINE).aar is None
        assert gcfg.for_cell(Cell.AAR_ONLY).vtc is None
        assert gcfg.for_cell(Cell.VTC_ONLY).aar is None
        assert gcfg.for_cell(Cell.BOTH) == gcfg


class TestReplay:
    """Test suite for replay_step."""

    def test_replay_reproduces_every_token(self, world, prompt, cal_set):
        gcfg = EvaluationService.generation_config(world, cal_set, Cell.BOTH)
        gcfg = dataclasses.replace(gcfg, aar=AarConfig(p_thr=0.9, lambda_max=1.5))
        trace = GenerationService.generate(world.decoder, prompt, gcfg)
        for step in range(len(trace.steps)):
            assert GenerationService.replay_step(world.decoder, prompt, trace, step, gcfg) == (
                trace.token_ids[step]
            )

    def test_step_out_of_range(self, world, prompt):
        gcfg = GenerationConfig(4)
        trace = GenerationService.generate(world.decoder, prompt, gcfg)
        with pytest.raises(DomainError):
            GenerationService.replay_step(world.decoder, prompt, trace, 99, gcfg)


class TestAblationGrid:
    """Test suite for GenerationService.ablate."""

    def test_four_cells(self, world, prompt, cal_set):
        gcfg = GenerationConfig(6, vtc=cal_set, aar=AarConfig(p_thr=0.5))
        traces = GenerationService.ablate(world.decoder, prompt, gcfg, seed=1)
        assert set(traces) == set(Cell)
        assert traces[Cell.BASELINE].triggered_steps == 0
        assert traces[Cell.VTC_ONLY].triggered_steps == 0
        assert all(trace.cell == cell.value for cell, trace in traces.items())

    def test_sum_preserving_calibration_runs(self, world, prompt):
        cal_set, _ = VTCService.build_calibration_set(
            world.decoder,
            world.config.reference,
            world.vocab,
            beta=0.5,
            layer_range=(0, 2),
            mode=Normalization.SUM_PRESERVING,
            model_fingerprint=world.fingerprint,
        )
        trace = GenerationService.generate(world.decoder, prompt, GenerationConfig(6, vtc=cal_set))
        assert trace.steps
