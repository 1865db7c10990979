"""
Generation Trace Schemas
Per-step records of dual-pass decoding and their JSONL layout
"""

from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.models.world_models import TokenLabel


class StopReason(str, Enum):
    """Why a generation stream ended."""

    EOS = "eos"
    MAX_NEW_TOKENS = "max_new_tokens"


class StepRecord(BaseModel):
    """One generated token and the CAAC decisions that produced it."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    step: int = Field(..., ge=0)
    token_id: int = Field(..., ge=0)
    p_t: float = Field(..., gt=0.0, le=1.0)
    triggered: bool
    lambda_t: float = Field(..., ge=1.0)
    image_mass_pass1: float = Field(..., ge=0.0, le=1.0 + 1e-9)
    image_mass_final: float = Field(..., ge=0.0, le=1.0 + 1e-9)
    pass2_executed: bool
    r_rel: Optional[float] = Field(None, ge=0.0, le=1.0 + 1e-9)
    image_attention: Optional[List[List[float]]] = None  # [layer][image slot], head mean
    label: Optional[TokenLabel] = None

    @model_validator(mode="after")
    def check_dual_pass(self) -> "StepRecord":
        if self.pass2_executed != self.triggered:
            raise ValueError("pass2_executed must equal triggered")
        if not self.triggered and self.image_mass_final != self.image_mass_pass1:
            raise ValueError("image_mass_final must equal image_mass_pass1 without a second pass")
        return self


class GenerationTrace(BaseModel):
    """A complete generation stream."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: Optional[int] = None
    cell: str = "run"
    prompt_ids: List[int]
    steps: List[StepRecord] = Field(default_factory=list)
    stop_reason: Optional[StopReason] = None
    fingerprint: Optional[str] = None

    @property
    def token_ids(self) -> List[int]:
        return [s.token_id for s in self.steps]

    @property
    def triggered_steps(self) -> int:
        return sum(1 for s in self.steps if s.triggered)

    @property
    def has_attention(self) -> bool:
        return bool(self.steps) and all(s.image_attention is not None for s in self.steps)

    @property
    def has_relevancy(self) -> bool:
        return bool(self.steps) and all(s.r_rel is not None for s in self.steps)

    def with_labels(self, labels: List[TokenLabel]) -> "GenerationTrace":
        if len(labels) != len(self.steps):
            raise ValueError("one label per step required")
        steps = [s.model_copy(update={"label": lab}) for s, lab in zip(self.steps, labels)]
        return self.model_copy(update={"steps": steps})


class TraceHeader(BaseModel):
    """First JSONL line of a stream; the step lines follow it."""

    model_config = ConfigDict(extra="forbid")

    kind: str = "trace"
    seed: Optional[int] = None
    cell: str
    prompt_ids: List[int]
    num_steps: int
    stop_reason: Optional[StopReason] = None
    fingerprint: Optional[str] = None
