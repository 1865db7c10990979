"""
Generation Service
Greedy dual-pass decoding: VTC-calibrated pass 1, AAR pass 2 on low confidence
"""

import dataclasses
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional

import numpy as np

from app.core.exceptions import DomainError, GenerationAborted, NumericError
from app.core.logging import get_logger
from app.models.decoder import ForwardResult, HookSet, ToyDecoder, TokenSequence
from app.models.world_models import EOS
from app.schemas.config_schemas import AarConfig, Aggregation
from app.schemas.trace_schemas import GenerationTrace, StepRecord, StopReason
from app.services.aar_service import AARService, ScaleDecision
from app.services.relevancy_service import RelevancyService
from app.services.vtc_service import CalibrationSet, VTCService

logger = get_logger(__name__)

# Logit given to EOS while min_new_tokens has not been reached
SUPPRESSED_LOGIT = -1e9


class Decoding(str, Enum):
    """Token selection strategy."""

    GREEDY = "greedy"


class Cell(str, Enum):
    """Ablation grid cells."""

    BASELINE = "baseline"
    VTC_ONLY = "vtc_only"
    AAR_ONLY = "aar_only"
    BOTH = "both"


@dataclass(frozen=True)
class GenerationConfig:
    """Decoding limits plus the optional CAAC components."""

    max_new_tokens: int
    eos_token: int = EOS
    min_new_tokens: int = 0
    decoding: Decoding = Decoding.GREEDY
    vtc: Optional[CalibrationSet] = None
    aar: Optional[AarConfig] = None
    row_renorm: bool = True
    capture_attention: bool = False
    relevancy: Optional[Aggregation] = None
    fd_step: float = 1e-5

    def __post_init__(self) -> None:
        if self.max_new_tokens < 1:
            raise DomainError("max_new_tokens must be >= 1", max_new_tokens=self.max_new_tokens)
        if not 0 <= self.min_new_tokens <= self.max_new_tokens:
            raise DomainError(
                "min_new_tokens must lie in [0, max_new_tokens]",
                min_new_tokens=self.min_new_tokens,
            )

    def for_cell(self, cell: Cell) -> "GenerationConfig":
        """Drop the components a grid cell does not use."""
        keep_vtc = cell in (Cell.VTC_ONLY, Cell.BOTH)
        keep_aar = cell in (Cell.AAR_ONLY, Cell.BOTH)
        return dataclasses.replace(
            self,
            vtc=self.vtc if keep_vtc else None,
            aar=self.aar if keep_aar else None,
        )


class GenerationService:
    """Service for confidence-gated dual-pass generation."""

    @staticmethod
    def pass1_hooks(gcfg: GenerationConfig) -> HookSet:
        """Hooks of the first pass: VTC only."""
        hooks = HookSet(row_renorm=gcfg.row_renorm)
        if gcfg.vtc is not None:
            hooks = hooks.with_hook(VTCService.make_hook(gcfg.vtc))
        return hooks

    @staticmethod
    def process_logits(logits: np.ndarray, generated: int, gcfg: GenerationConfig) -> np.ndarray:
        """Apply decoding constraints (EOS suppression before min_new_tokens)."""
        if generated >= gcfg.min_new_tokens:
            return logits
        processed = logits.copy()
        processed[gcfg.eos_token] = SUPPRESSED_LOGIT
        return processed

    @staticmethod
    def select_token(logits: np.ndarray) -> int:
        return int(np.argmax(logits))

    @staticmethod
    def _step_record(
        step: int,
        token: int,
        decision: ScaleDecision,
        pass1: ForwardResult,
        final: ForwardResult,
        gcfg: GenerationConfig,
        r_rel: Optional[float],
    ) -> StepRecord:
        mass1 = pass1.final_image_mass()
        image_attention = None
        if gcfg.capture_attention:
            n_img = final.image_slots
            image_attention = final.attention[:, :, -1, :n_img].mean(axis=1).tolist()
        return StepRecord(
            step=step,
            token_id=token,
            p_t=decision.p_t,
            triggered=decision.triggered,
            lambda_t=decision.lambda_t,
            image_mass_pass1=mass1,
            image_mass_final=final.final_image_mass() if decision.triggered else mass1,
            pass2_executed=decision.triggered,
            r_rel=r_rel,
            image_attention=image_attention,
        )

    @staticmethod
    def generate(
        decoder: ToyDecoder,
        prompt: TokenSequence,
        gcfg: GenerationConfig,
        seed: Optional[int] = None,
        cell: str = "run",
        fingerprint: Optional[str] = None,
    ) -> GenerationTrace:
        """
        Generate until EOS or max_new_tokens.

        Each step runs pass 1 with VTC hooks only and reads p_t from its logits.
        When AAR is configured and p_t < p_thr, pass 2 reruns the step with VTC
        and AAR hooks (lambda_t from pass 1) and its argmax is emitted.

        Args:
            decoder: Decoder to run
            prompt: Image + query sequence
            gcfg: Generation configuration
            seed: Scene seed recorded on the trace
            cell: Configuration cell name recorded on the trace
            fingerprint: Model/world fingerprint recorded on the trace

        Returns:
            GenerationTrace with one record per emitted token

        Raises:
            GenerationAborted: numeric failure; carries every completed step
        """
        if prompt.num_generated:
            raise DomainError("prompt must not contain generated tokens")

        hooks1 = GenerationService.pass1_hooks(gcfg)
        steps: List[StepRecord] = []
        seq = prompt
        stop_reason = StopReason.MAX_NEW_TOKENS
        log = logger.bind(seed=seed, cell=cell)

        try:
            for t in range(gcfg.max_new_tokens):
                pass1 = decoder.forward_full(seq, hooks1)
                logits1 = GenerationService.process_logits(pass1.logits, t, gcfg)

                if gcfg.aar is not None:
                    decision = AARService.decide(logits1, gcfg.aar)
                else:
                    p_t = AARService.read_confidence(logits1)
                    decision = ScaleDecision(p_t=p_t, triggered=False, lambda_t=1.0)

                final, logits = pass1, logits1
                if decision.triggered and gcfg.aar is not None:
                    hook = AARService.make_hook(decision, gcfg.aar)
                    final = decoder.forward_full(seq, hooks1.with_hooks(hook) if hook else hooks1)
                    logits = GenerationService.process_logits(final.logits, t, gcfg)

                token = GenerationService.select_token(logits)

                r_rel = None
                if gcfg.relevancy is not None:
                    grads = None
                    if gcfg.relevancy is Aggregation.GRADIENT_WEIGHTED:
                        step_hooks = hooks1
                        if decision.triggered and gcfg.aar is not None:
                            aar_hook = AARService.make_hook(decision, gcfg.aar)
                            step_hooks = hooks1.with_hooks(aar_hook) if aar_hook else hooks1
                        grads = RelevancyService.attention_gradients(
                            decoder, seq, step_hooks, token, gcfg.fd_step
                        )
                    r_rel = RelevancyService.step_relevancy(final, gcfg.relevancy, grads)

                steps.append(
                    GenerationService._step_record(t, token, decision, pass1, final, gcfg, r_rel)
                )
                if decision.triggered:
                    log.debug("aar_triggered", step=t, p_t=decision.p_t, lambda_t=decision.lambda_t)

                seq = seq.append(token)
                if token == gcfg.eos_token:
                    stop_reason = StopReason.EOS
                    break
        except NumericError as e:
            partial = GenerationTrace(
                seed=seed,
                cell=cell,
                prompt_ids=list(prompt.ids),
                steps=steps,
                fingerprint=fingerprint,
            )
            log.error("generation_aborted", completed_steps=len(steps), error=str(e))
            raise GenerationAborted(e, partial) from e

        trace = GenerationTrace(
            seed=seed,
            cell=cell,
            prompt_ids=list(prompt.ids),
            steps=steps,
            stop_reason=stop_reason,
            fingerprint=fingerprint,
        )
        log.debug(
            "generation_finished",
            tokens=len(steps),
            triggered=trace.triggered_steps,
            stop_reason=stop_reason.value,
        )
        return trace

    @staticmethod
    def replay_step(
        decoder: ToyDecoder,
        prompt: TokenSequence,
        trace: GenerationTrace,
        step: int,
        gcfg: GenerationConfig,
    ) -> int:
        """
        Recompute the emitted token of one step from the logged prefix and lambda_t.

        Raises:
            DomainError: step outside the trace
        """
        if not 0 <= step < len(trace.steps):
            raise DomainError("step outside the trace", step=step, steps=len(trace.steps))
        record = trace.steps[step]
        seq = prompt
        for token in trace.token_ids[:step]:
            seq = seq.append(token)

        hooks = GenerationService.pass1_hooks(gcfg)
        if record.triggered and gcfg.aar is not None:
            decision = ScaleDecision(p_t=record.p_t, triggered=True, lambda_t=record.lambda_t)
            hook = AARService.make_hook(decision, gcfg.aar)
            if hook is not None:
                hooks = hooks.with_hook(hook)
        result = decoder.forward_full(seq, hooks)
        logits = GenerationService.process_logits(result.logits, step, gcfg)
        return GenerationService.select_token(logits)

    @staticmethod
    def ablate(
        decoder: ToyDecoder,
        prompt: TokenSequence,
        gcfg: GenerationConfig,
        seed: Optional[int] = None,
        fingerprint: Optional[str] = None,
    ) -> Dict[Cell, GenerationTrace]:
        """
        Run the four-cell grid on one prompt.

        gcfg supplies the calibration set and AAR config used by the cells
        that include them; the baseline cell runs with no hooks at all.
        """
        return {
            cell: GenerationService.generate(
                decoder,
                prompt,
                gcfg.for_cell(cell),
                seed=seed,
                cell=cell.value,
                fingerprint=fingerprint,
            )
            for cell in Cell
        }
