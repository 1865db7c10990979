"""
Report Schemas
Hallucination metrics, CAAC telemetry and relevancy analysis documents
"""

from typing import Annotated, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

Rate = Annotated[float, Field(ge=0.0, le=1.0)]


class _Report(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SeedMetrics(_Report):
    """Per-scene breakdown of one cell."""

    seed: int
    chair_i: Rate
    chair_s: Rate
    amber_chair: Rate
    hallucinated: bool
    cover: Rate
    num_tokens: int = Field(..., ge=0)
    triggered_steps: int = Field(..., ge=0)
    mentioned: List[int]
    present: List[int]


class ConfidenceSplit(_Report):
    """Mean confidence of truthful vs hallucinatory object tokens."""

    truthful_mean: Optional[float] = None
    hallucinatory_mean: Optional[float] = None
    difference: Optional[float] = None
    truthful_count: int = 0
    hallucinatory_count: int = 0


class Telemetry(_Report):
    """CAAC telemetry over a suite of traces."""

    trigger_rate: Rate
    decay_correlation: Optional[float] = Field(None, ge=-1.0, le=1.0)
    concentration_top_decile: Optional[float] = Field(None, ge=0.0, le=1.0)
    confidence_split: ConfidenceSplit


class MetricReport(_Report):
    """Hallucination and coverage metrics for one configuration cell."""

    cell: str
    chair_i: Rate
    chair_s: Rate
    amber_chair: Rate
    hal: Rate
    cover: Rate
    recall: Rate
    trigger_rate: Rate
    pass2_rate: Rate
    decay_correlation: Optional[float] = Field(None, ge=-1.0, le=1.0)
    concentration_top_decile: Optional[float] = Field(None, ge=0.0, le=1.0)
    confidence_split: ConfidenceSplit
    mean_tokens: float = Field(..., ge=0.0)
    per_seed: List[SeedMetrics]
    fingerprint: Optional[str] = None

    @model_validator(mode="after")
    def check_suite(self) -> "MetricReport":
        if not self.per_seed:
            raise ValueError("per_seed must cover at least one scene")
        return self

    def summary(self) -> Dict[str, Optional[float]]:
        """Scalar metrics only, for tables and CSV rows."""
        return self.model_dump(exclude={"per_seed", "confidence_split", "fingerprint"})


class AblationReport(_Report):
    """The four-cell baseline / vtc_only / aar_only / both grid."""

    cells: Dict[str, MetricReport]


class ConcentrationProfile(_Report):
    """Descending cumulative share over image positions."""

    cumulative_share: List[float]
    top_k: int = Field(..., ge=1)
    top_decile_share: Rate


class DecaySeries(_Report):
    """Mean relative image relevancy per generated position."""

    positions: List[int]
    mean_r_rel: List[float]
    correlation: float = Field(..., ge=-1.0, le=1.0)


class TokenAnalysis(_Report):
    """Relevancy and position statistics of truthful vs hallucinatory tokens."""

    truthful_mean_r_rel: Optional[float] = None
    hallucinatory_mean_r_rel: Optional[float] = None
    mannwhitney_p: Optional[float] = None
    truthful_mean_position: Optional[float] = None
    hallucinatory_mean_position: Optional[float] = None
    truthful_count: int = 0
    hallucinatory_count: int = 0


class RelevancyReport(_Report):
    """Output of the relevancy command."""

    cell: str
    decay: DecaySeries
    concentration: ConcentrationProfile
    tokens: TokenAnalysis
    confidence_split: ConfidenceSplit
    fingerprint: Optional[str] = None
