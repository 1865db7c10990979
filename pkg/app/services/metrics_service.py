"""
Metrics Service
CHAIR and AMBER-style object hallucination metrics plus CAAC telemetry

All object metrics count distinct mentions: a repeated object counts once.
"""

from dataclasses import dataclass
from typing import AbstractSet, List, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import DomainError
from app.core.logging import get_logger
from app.models.world_models import SEP, ObjectVocabulary, Scene, TokenLabel
from app.schemas.config_schemas import LayerRange
from app.schemas.report_schemas import ConfidenceSplit, MetricReport, SeedMetrics, Telemetry
from app.schemas.trace_schemas import GenerationTrace
from app.services.relevancy_service import MIN_DECAY_POSITIONS, RelevancyService

logger = get_logger(__name__)


@dataclass(frozen=True)
class SceneResult:
    """One labeled generation stream and the scene it describes."""

    seed: int
    scene: Scene
    trace: GenerationTrace


def _distinct(tokens: Sequence[int]) -> List[int]:
    return list(dict.fromkeys(tokens))


class MetricsService:
    """Service for hallucination metrics and telemetry."""

    @staticmethod
    def mentions(tokens: Sequence[int], vocab: ObjectVocabulary) -> List[int]:
        """Distinct object tokens in order of first mention."""
        return _distinct([t for t in tokens if vocab.is_object(t)])

    @staticmethod
    def sentences(tokens: Sequence[int], vocab: ObjectVocabulary) -> List[List[int]]:
        """SEP-delimited spans as distinct mention lists; spans without objects are dropped."""
        spans: List[List[int]] = []
        current: List[int] = []
        for token in tokens:
            if token == SEP:
                spans.append(current)
                current = []
            elif vocab.is_object(token):
                current.append(token)
        spans.append(current)
        return [_distinct(span) for span in spans if span]

    @staticmethod
    def chair_i(mentioned: Sequence[int], present: AbstractSet[int]) -> float:
        """Fraction of distinct mentioned objects absent from the scene (0 when none)."""
        distinct = set(mentioned)
        if not distinct:
            return 0.0
        return len(distinct - set(present)) / len(distinct)

    @staticmethod
    def chair_s(sentences: Sequence[Sequence[int]], present: AbstractSet[int]) -> float:
        """Fraction of sentences mentioning at least one absent object (0 when none)."""
        if not sentences:
            return 0.0
        hallucinated = sum(1 for s in sentences if any(m not in present for m in s))
        return hallucinated / len(sentences)

    @staticmethod
    def amber_triplet(
        responses: Sequence[Sequence[int]], presents: Sequence[AbstractSet[int]]
    ) -> Tuple[float, float, float]:
        """
        (CHAIR, HAL, COVER) over one response per scene.

        CHAIR is the per-response hallucinated-object frequency averaged over
        responses; HAL the fraction of responses with a hallucination; COVER the
        mean fraction of present objects mentioned.

        Raises:
            DomainError: empty suite or response/scene count mismatch
        """
        if not responses:
            raise DomainError("amber metrics need at least one response")
        if len(responses) != len(presents):
            raise DomainError("one present set per response required")

        chair, hal, cover = [], [], []
        for mentioned, present in zip(responses, presents):
            distinct = set(mentioned)
            chair.append(MetricsService.chair_i(mentioned, present))
            hal.append(1.0 if distinct - set(present) else 0.0)
            cover.append(len(distinct & set(present)) / len(present) if present else 0.0)
        return float(np.mean(chair)), float(np.mean(hal)), float(np.mean(cover))

    @staticmethod
    def confidence_split(traces: Sequence[GenerationTrace]) -> ConfidenceSplit:
        """Mean p_t of truthful vs hallucinatory tokens."""
        truthful = [s.p_t for t in traces for s in t.steps if s.label is TokenLabel.TRUTHFUL]
        halluc = [s.p_t for t in traces for s in t.steps if s.label is TokenLabel.HALLUCINATORY]
        truthful_mean = float(np.mean(truthful)) if truthful else None
        halluc_mean = float(np.mean(halluc)) if halluc else None
        difference = (
            truthful_mean - halluc_mean
            if truthful_mean is not None and halluc_mean is not None
            else None
        )
        return ConfidenceSplit(
            truthful_mean=truthful_mean,
            hallucinatory_mean=halluc_mean,
            difference=difference,
            truthful_count=len(truthful),
            hallucinatory_count=len(halluc),
        )

    @staticmethod
    def telemetry(
        traces: Sequence[GenerationTrace], analysis_layers: Optional[LayerRange] = None
    ) -> Telemetry:
        """
        Trigger rate, decay correlation, concentration and confidence split.

        Decay and concentration are reported only when every trace carries the
        per-step relevancy values and attention snapshots they need.

        Raises:
            DomainError: no traces
        """
        if not traces:
            raise DomainError("telemetry needs at least one trace")

        total_steps = sum(len(t.steps) for t in traces)
        triggered = sum(t.triggered_steps for t in traces)
        trigger_rate = triggered / total_steps if total_steps else 0.0

        decay = None
        if all(t.has_relevancy for t in traces):
            if min(len(t.steps) for t in traces) >= MIN_DECAY_POSITIONS:
                decay = RelevancyService.decay_trace(traces).correlation

        concentration = None
        if analysis_layers is not None and all(t.has_attention for t in traces):
            profile = RelevancyService.trace_concentration(traces, analysis_layers)
            concentration = profile.top_decile_share

        return Telemetry(
            trigger_rate=trigger_rate,
            decay_correlation=decay,
            concentration_top_decile=concentration,
            confidence_split=MetricsService.confidence_split(traces),
        )

    @staticmethod
    def seed_metrics(result: SceneResult, vocab: ObjectVocabulary) -> SeedMetrics:
        tokens = result.trace.token_ids
        present = set(result.scene.present)
        mentioned = MetricsService.mentions(tokens, vocab)
        chair, hal, cover = MetricsService.amber_triplet([mentioned], [present])
        return SeedMetrics(
            seed=result.seed,
            chair_i=MetricsService.chair_i(mentioned, present),
            chair_s=MetricsService.chair_s(MetricsService.sentences(tokens, vocab), present),
            amber_chair=chair,
            hallucinated=hal > 0.0,
            cover=cover,
            num_tokens=len(tokens),
            triggered_steps=result.trace.triggered_steps,
            mentioned=mentioned,
            present=sorted(present),
        )

    @staticmethod
    def report(
        results: Sequence[SceneResult],
        vocab: ObjectVocabulary,
        cell: str,
        analysis_layers: Optional[LayerRange] = None,
        fingerprint: Optional[str] = None,
    ) -> MetricReport:
        """
        Metric report of one configuration cell over a seed suite.

        chair_i is the mean per-scene CHAIR_i; chair_s pools every sentence of
        the suite.

        Raises:
            DomainError: empty suite
        """
        if not results:
            raise DomainError("report needs at least one scene")

        per_seed = [MetricsService.seed_metrics(r, vocab) for r in results]
        responses = [s.mentioned for s in per_seed]
        presents = [set(r.scene.present) for r in results]
        amber_chair, hal, cover = MetricsService.amber_triplet(responses, presents)

        all_sentences = 0
        bad_sentences = 0
        for r in results:
            spans = MetricsService.sentences(r.trace.token_ids, vocab)
            all_sentences += len(spans)
            bad_sentences += sum(1 for s in spans if any(not r.scene.is_present(m) for m in s))

        traces = [r.trace for r in results]
        telemetry = MetricsService.telemetry(traces, analysis_layers)

        report = MetricReport(
            cell=cell,
            chair_i=float(np.mean([s.chair_i for s in per_seed])),
            chair_s=bad_sentences / all_sentences if all_sentences else 0.0,
            amber_chair=amber_chair,
            hal=hal,
            cover=cover,
            recall=cover,
            trigger_rate=telemetry.trigger_rate,
            pass2_rate=telemetry.trigger_rate,
            decay_correlation=telemetry.decay_correlation,
            concentration_top_decile=telemetry.concentration_top_decile,
            confidence_split=telemetry.confidence_split,
            mean_tokens=float(np.mean([s.num_tokens for s in per_seed])),
            per_seed=per_seed,
            fingerprint=fingerprint,
        )
        logger.info(
            "report_built",
            cell=cell,
            scenes=len(results),
            chair_i=report.chair_i,
            cover=report.cover,
            trigger_rate=report.trigger_rate,
        )
        return report
