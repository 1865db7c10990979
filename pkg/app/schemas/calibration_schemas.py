"""
Calibration Document Schemas
On-disk layout of a visual-token calibration set
"""

from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.schemas.config_schemas import LayerRange, Normalization, ReferenceSpec


class CalibrationVectorDocument(BaseModel):
    """One (layer, head) calibration vector."""

    model_config = ConfigDict(extra="forbid")

    layer: int = Field(..., ge=0)
    head: int = Field(..., ge=0)
    mode: Normalization
    entries: List[float] = Field(..., min_length=1)

    @field_validator("entries")
    @classmethod
    def strictly_positive(cls, v: List[float]) -> List[float]:
        if any(not x > 0.0 for x in v):
            raise ValueError("calibration entries must be strictly positive")
        return v


class CalibrationDocument(BaseModel):
    """A calibration set as written by the calibrate command."""

    model_config = ConfigDict(extra="forbid")

    model_fingerprint: str
    reference: ReferenceSpec
    beta: float = Field(..., ge=0.0, le=1.0)
    layer_range: LayerRange
    floor_hits: int = Field(default=0, ge=0)
    vectors: List[CalibrationVectorDocument]


class FlatteningDiagnostic(BaseModel):
    """Self-check of one vector against the reference row it was built from."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    layer: int
    head: int
    relative_spread: float = Field(..., ge=0.0)
    product_sum: float
    reference_sum: float
    passed: bool


class KindComparison(BaseModel):
    """Max relative difference between calibrations built from two reference kinds."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind_a: str
    kind_b: str
    max_relative_difference: float = Field(..., ge=0.0)
    worst_layer: Optional[int] = None
    worst_head: Optional[int] = None
