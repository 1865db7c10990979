"""
Relevancy Service
Layer-wise relevancy propagation, relative image relevancy and its analyses

Propagation starts from the identity and adds, layer by layer, the
head-aggregated attention applied to the running map:

    M <- M + A_l @ M        (A_l row-normalized, nonnegative)

The final map is row-normalized. M[j, i] is the share of output position j
attributed to input i; RelevancyMap.R is its transpose, R[i, j].
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import mannwhitneyu, spearmanr

from app.core.exceptions import DomainError
from app.core.logging import get_logger
from app.models.decoder import ForwardResult, HookSet, ToyDecoder, TokenSequence
from app.models.world_models import TokenLabel
from app.schemas.config_schemas import Aggregation, LayerRange
from app.schemas.report_schemas import ConcentrationProfile, DecaySeries, TokenAnalysis
from app.schemas.trace_schemas import GenerationTrace

logger = get_logger(__name__)

MIN_DECAY_POSITIONS = 3
SERIES_DECIMALS = 10


@dataclass(frozen=True)
class RelevancyMap:
    """Token-to-token influence: R[i, j] is the influence of input i on output j."""

    R: np.ndarray
    aggregation: Aggregation

    @property
    def rollout(self) -> np.ndarray:
        """Row-per-output view, rollout[j, i] = R[i, j]."""
        return self.R.T

    @property
    def size(self) -> int:
        return int(self.R.shape[0])


class RelevancyService:
    """Service for relevancy maps and the analyses built on them."""

    @staticmethod
    def aggregate_heads(
        attention: np.ndarray, gradients: Optional[np.ndarray] = None
    ) -> np.ndarray:
        """
        Head-aggregated, nonnegative, row-normalized attention of one layer.

        Args:
            attention: (H, N, N) post-softmax attention
            gradients: optional (H, N, N) gradients; products are clamped at 0

        Returns:
            (N, N) row-stochastic matrix
        """
        if gradients is None:
            cam = attention
        else:
            cam = np.clip(gradients * attention, 0.0, None)
        mean = cam.mean(axis=0)
        sums = mean.sum(axis=-1, keepdims=True)
        # rows whose weighted mass vanished keep only their self-influence
        safe = np.where(sums > 0.0, sums, 1.0)
        normalized = mean / safe
        empty = (sums[:, 0] <= 0.0).nonzero()[0]
        normalized[empty, empty] = 1.0
        return normalized

    @staticmethod
    def compute_relevancy(
        attention: np.ndarray,
        gradients: Optional[np.ndarray] = None,
        aggregation: Optional[Aggregation] = None,
    ) -> RelevancyMap:
        """
        Propagate relevancy through every layer.

        Args:
            attention: (L, H, N, N) row-stochastic attention
            gradients: (L, H, N, N) attention gradients, required for GradientWeighted
            aggregation: defaults to GradientWeighted when gradients are given

        Raises:
            DomainError: shape mismatch, or gradients missing/unexpected
        """
        attention = np.asarray(attention, dtype=np.float64)
        if attention.ndim != 4 or attention.shape[-1] != attention.shape[-2]:
            raise DomainError("attention must have shape (L, H, N, N)", shape=attention.shape)

        if aggregation is None:
            aggregation = (
                Aggregation.UNIFORM_ROLLOUT if gradients is None else Aggregation.GRADIENT_WEIGHTED
            )
        if aggregation is Aggregation.GRADIENT_WEIGHTED:
            if gradients is None:
                raise DomainError("gradient-weighted relevancy needs attention gradients")
            gradients = np.asarray(gradients, dtype=np.float64)
            if gradients.shape != attention.shape:
                raise DomainError(
                    "gradient shape must match attention",
                    gradients=gradients.shape,
                    attention=attention.shape,
                )
        elif gradients is not None:
            raise DomainError("uniform rollout takes no gradients")

        n = attention.shape[-1]
        rollout = np.eye(n)
        for layer in range(attention.shape[0]):
            grad = gradients[layer] if gradients is not None else None
            rollout = rollout + RelevancyService.aggregate_heads(attention[layer], grad) @ rollout
        rollout = rollout / rollout.sum(axis=-1, keepdims=True)
        return RelevancyMap(R=rollout.T.copy(), aggregation=aggregation)

    @staticmethod
    def relative_image_relevancy(rmap: RelevancyMap, image_slots: int, out_pos: int) -> float:
        """
        Image-row share of one output column of R.

        Raises:
            DomainError: position or image_slots out of range, or a zero column
        """
        if not 0 <= out_pos < rmap.size:
            raise DomainError("output position out of range", out_pos=out_pos, size=rmap.size)
        if image_slots > rmap.size:
            raise DomainError("image_slots exceeds map size", image_slots=image_slots)
        column = rmap.R[:, out_pos]
        total = column.sum()
        if total <= 0.0:
            raise DomainError("relevancy column sums to zero", out_pos=out_pos)
        return float(min(1.0, column[:image_slots].sum() / total))

    @staticmethod
    def concentration_profile(values: np.ndarray) -> ConcentrationProfile:
        """
        Descending cumulative share curve and the share of the top ceil(10%) entries.

        Raises:
            DomainError: empty, negative or all-zero input
        """
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise DomainError("concentration needs a non-empty vector")
        if np.any(values < 0.0):
            raise DomainError("concentration input must be nonnegative")
        total = values.sum()
        if total <= 0.0:
            raise DomainError("concentration of an all-zero vector")

        cumulative = np.minimum(np.cumsum(np.sort(values)[::-1]) / total, 1.0)
        top_k = max(1, math.ceil(0.1 * values.size))
        return ConcentrationProfile(
            cumulative_share=[float(x) for x in cumulative],
            top_k=top_k,
            top_decile_share=float(cumulative[top_k - 1]),
        )

    @staticmethod
    def trace_concentration(
        traces: Sequence[GenerationTrace], layer_range: LayerRange
    ) -> ConcentrationProfile:
        """
        Mean concentration profile of the captured last-row image attention.

        Each step's snapshot is averaged over layer_range before profiling;
        curves are averaged over every step of every trace.

        Raises:
            DomainError: traces without attention snapshots
        """
        start, end = layer_range
        curves: List[np.ndarray] = []
        for trace in traces:
            if not trace.has_attention:
                raise DomainError("trace carries no attention snapshots", seed=trace.seed)
            for step in trace.steps:
                snapshot = np.asarray(step.image_attention)[start:end].mean(axis=0)
                profile = RelevancyService.concentration_profile(snapshot)
                curves.append(np.asarray(profile.cumulative_share))
        if not curves:
            raise DomainError("no steps to profile")

        mean_curve = np.minimum(np.mean(curves, axis=0), 1.0)
        top_k = max(1, math.ceil(0.1 * mean_curve.size))
        return ConcentrationProfile(
            cumulative_share=[float(x) for x in mean_curve],
            top_k=top_k,
            top_decile_share=float(mean_curve[top_k - 1]),
        )

    @staticmethod
    def decay_trace(traces: Sequence[GenerationTrace]) -> DecaySeries:
        """
        Mean relative image relevancy per generated position and its Spearman
        correlation with position.

        Only positions present in every trace are used. A constant series has
        correlation 0.

        Raises:
            DomainError: fewer than 3 common positions, or traces without r_rel
        """
        if not traces:
            raise DomainError("decay analysis needs at least one trace")
        for trace in traces:
            if not trace.has_relevancy:
                raise DomainError("trace carries no relevancy values", seed=trace.seed)

        length = min(len(trace.steps) for trace in traces)
        if length < MIN_DECAY_POSITIONS:
            raise DomainError("too few common positions for a decay trend", positions=length)

        matrix = np.array([[s.r_rel for s in trace.steps[:length]] for trace in traces])
        means = np.round(matrix.mean(axis=0), SERIES_DECIMALS)
        positions = list(range(length))
        correlation = RelevancyService.rank_correlation(positions, means)
        logger.debug("decay_trace", positions=length, traces=len(traces), correlation=correlation)
        return DecaySeries(
            positions=positions,
            mean_r_rel=[float(x) for x in means],
            correlation=correlation,
        )

    @staticmethod
    def rank_correlation(x: Sequence[float], y: Sequence[float]) -> float:
        """Spearman correlation; 0.0 when either series is constant."""
        xs = np.asarray(x, dtype=np.float64)
        ys = np.asarray(y, dtype=np.float64)
        if np.ptp(xs) == 0 or np.ptp(ys) == 0:
            return 0.0
        rho = float(spearmanr(xs, ys)[0])
        if math.isnan(rho):
            return 0.0
        return max(-1.0, min(1.0, rho))

    @staticmethod
    def step_relevancy(
        result: ForwardResult,
        aggregation: Aggregation = Aggregation.UNIFORM_ROLLOUT,
        gradients: Optional[np.ndarray] = None,
    ) -> float:
        """Relative image relevancy of the last position of a forward pass."""
        rmap = RelevancyService.compute_relevancy(result.attention, gradients, aggregation)
        return RelevancyService.relative_image_relevancy(
            rmap, result.image_slots, rmap.size - 1
        )

    @staticmethod
    def attention_gradients(
        decoder: ToyDecoder,
        seq: TokenSequence,
        hooks: Optional[HookSet],
        token: int,
        step: float = 1e-5,
    ) -> np.ndarray:
        """
        Central finite-difference gradient of logits[token] with respect to
        every causal attention entry.

        Returns:
            (L, H, N, N) gradients, zero above the diagonal
        """
        base = decoder.forward_full(seq, hooks)
        attention = base.attention
        grads = np.zeros_like(attention)
        n = attention.shape[-1]

        for layer in range(attention.shape[0]):
            for head in range(attention.shape[1]):
                for q in range(n):
                    for k in range(q + 1):
                        plus = attention[layer].copy()
                        minus = attention[layer].copy()
                        plus[head, q, k] += step
                        minus[head, q, k] -= step
                        up = decoder.forward_full(seq, hooks, {layer: plus}).logits[token]
                        down = decoder.forward_full(seq, hooks, {layer: minus}).logits[token]
                        grads[layer, head, q, k] = (up - down) / (2.0 * step)
        return grads

    @staticmethod
    def token_analysis(traces: Sequence[GenerationTrace]) -> TokenAnalysis:
        """
        Relevancy and position of truthful vs hallucinatory tokens, with a
        two-sided Mann-Whitney U test on their relative image relevancy.
        """
        r_rel: Dict[TokenLabel, List[float]] = {
            TokenLabel.TRUTHFUL: [],
            TokenLabel.HALLUCINATORY: [],
        }
        positions: Dict[TokenLabel, List[int]] = {
            TokenLabel.TRUTHFUL: [],
            TokenLabel.HALLUCINATORY: [],
        }
        for trace in traces:
            for step in trace.steps:
                if step.label in r_rel:
                    positions[step.label].append(step.step)
                    if step.r_rel is not None:
                        r_rel[step.label].append(step.r_rel)

        truthful = r_rel[TokenLabel.TRUTHFUL]
        hallucinatory = r_rel[TokenLabel.HALLUCINATORY]
        p_value: Optional[float] = None
        if truthful and hallucinatory:
            p_value = float(mannwhitneyu(truthful, hallucinatory, alternative="two-sided").pvalue)

        return TokenAnalysis(
            truthful_mean_r_rel=_mean(truthful),
            hallucinatory_mean_r_rel=_mean(hallucinatory),
            mannwhitney_p=p_value,
            truthful_mean_position=_mean(positions[TokenLabel.TRUTHFUL]),
            hallucinatory_mean_position=_mean(positions[TokenLabel.HALLUCINATORY]),
            truthful_count=len(positions[TokenLabel.TRUTHFUL]),
            hallucinatory_count=len(positions[TokenLabel.HALLUCINATORY]),
        )


def _mean(values: Sequence[float]) -> Optional[float]:
    return float(np.mean(values)) if len(values) else None
