"""
Adaptive Attention Re-Scaling Service
Confidence read, lambda interpolation and pre-softmax image-score scaling
"""

import sys
from dataclasses import dataclass
from typing import Optional

import numpy as np

from app.core.exceptions import DomainError, NumericError
from app.models.decoder import AttentionHook, HookStage, softmax_row
from app.schemas.config_schemas import AarConfig


@dataclass(frozen=True)
class ScaleDecision:
    """Confidence of pass 1 and the scale it implies."""

    p_t: float
    triggered: bool
    lambda_t: float


class AARService:
    """Service for adaptive attention re-scaling."""

    @staticmethod
    def read_confidence(logits: np.ndarray) -> float:
        """
        Maximum softmax probability of the next-token logits.

        Raises:
            NumericError: non-finite logits
            DomainError: empty logits
        """
        logits = np.asarray(logits, dtype=np.float64)
        if logits.size and not np.all(np.isfinite(logits)):
            raise NumericError("non-finite logits")
        return float(softmax_row(logits).max())

    @staticmethod
    def compute_lambda(p: float, cfg: AarConfig) -> float:
        """
        lambda = lambda_min * p + lambda_max * (1 - p).

        Raises:
            DomainError: p outside [0, 1]
        """
        if not 0.0 <= p <= 1.0:
            raise DomainError("confidence must lie in [0, 1]", p=p)
        return cfg.lambda_min * p + cfg.lambda_max * (1.0 - p)

    @staticmethod
    def apply_aar(scores: np.ndarray, image_slots: int, lambda_t: float) -> np.ndarray:
        """
        Multiply the first image_slots pre-softmax scores by lambda_t.

        Raises:
            DomainError: image_slots beyond the row, or lambda_t < 1
        """
        scores = np.asarray(scores, dtype=np.float64)
        if image_slots > scores.shape[-1]:
            raise DomainError(
                "image_slots exceeds row length", image_slots=image_slots, length=scores.shape[-1]
            )
        if lambda_t < 1.0:
            raise DomainError("lambda must be >= 1", lambda_t=lambda_t)
        scaled = scores.copy()
        scaled[:image_slots] = lambda_t * scaled[:image_slots]
        return scaled

    @staticmethod
    def decide(logits: np.ndarray, cfg: AarConfig) -> ScaleDecision:
        """Gate on pass-1 confidence: scale only when p_t < p_thr."""
        p_t = AARService.read_confidence(logits)
        if p_t < cfg.p_thr:
            lambda_t = AARService.compute_lambda(p_t, cfg)
            return ScaleDecision(p_t=p_t, triggered=True, lambda_t=lambda_t)
        return ScaleDecision(p_t=p_t, triggered=False, lambda_t=1.0)

    @staticmethod
    def make_hook(decision: ScaleDecision, cfg: AarConfig) -> Optional[AttentionHook]:
        """Pre-softmax hook for a triggered decision; None when nothing is scaled."""
        if not decision.triggered:
            return None
        lambda_t = decision.lambda_t

        def rescale(layer: int, head: int, segment: np.ndarray) -> np.ndarray:
            return AARService.apply_aar(segment, segment.size, lambda_t)

        return AttentionHook(
            name="aar",
            stage=HookStage.PRE_SOFTMAX,
            transform=rescale,
            # unset range gates every layer
            layer_range=cfg.layer_range or (0, sys.maxsize),
        )
