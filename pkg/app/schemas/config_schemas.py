"""
CAAC Lab Configuration Schemas
Validated run documents: model, world, planted bias, VTC, AAR, generation

Every section forbids unknown keys; RunConfig.load turns validation failures
into ConfigError with the dotted field path.
"""

import json
import math
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from app.core.exceptions import ConfigError, MissingArtifactError

LayerRange = Tuple[int, int]


class _Section(BaseModel):
    """Common settings for every configuration section."""

    model_config = ConfigDict(extra="forbid", frozen=True, protected_namespaces=())


class ImageKind(str, Enum):
    """Meaningless reference images used for calibration."""

    BLACK = "black"
    NOISE = "noise"
    UNIFORM = "uniform"


class Normalization(str, Enum):
    """Calibration vector scaling."""

    HARMONIC = "harmonic"
    SUM_PRESERVING = "sum_preserving"


class Aggregation(str, Enum):
    """Head aggregation used by relevancy propagation."""

    UNIFORM_ROLLOUT = "uniform_rollout"
    GRADIENT_WEIGHTED = "gradient_weighted"


def _check_range(layer_range: Optional[LayerRange], num_layers: int, field: str) -> None:
    if layer_range is None:
        return
    start, end = layer_range
    if not 0 <= start < end <= num_layers:
        raise ValueError(
            f"{field} must satisfy 0 <= start < end <= num_layers ({num_layers}), got {layer_range}"
        )


def default_vtc_layers(num_layers: int) -> LayerRange:
    """First ceil(10/32 * L) layers: the 10-of-32 setting scaled to the toy depth."""
    return (0, max(1, math.ceil(10 / 32 * num_layers)))


class ModelSection(_Section):
    """Decoder shape; vocab_size is derived from the world vocabulary."""

    num_layers: int = Field(default=2, ge=1)
    num_heads: int = Field(default=4, ge=1)
    model_dim: int = Field(default=64, ge=1)
    image_slots: int = Field(default=32, ge=1)
    max_seq_len: int = Field(default=128, ge=2)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def check_shape(self) -> "ModelSection":
        if self.model_dim % self.num_heads != 0:
            raise ValueError("model_dim must be divisible by num_heads")
        if self.image_slots >= self.max_seq_len:
            raise ValueError("image_slots must be smaller than max_seq_len")
        return self


class ModelConfig(ModelSection):
    """Complete decoder configuration."""

    vocab_size: int = Field(..., ge=1)

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


class ReferenceSpec(_Section):
    """Reference input for calibration capture: meaningless image + generic query."""

    image_kind: ImageKind = ImageKind.BLACK
    noise_seed: int = Field(default=0, ge=0)
    query_ids: Optional[List[int]] = None
    row_window: int = Field(default=1, ge=1)


class AarConfig(_Section):
    """Adaptive attention re-scaling parameters."""

    p_thr: float = Field(default=0.25, ge=0.0, le=1.0)
    lambda_min: float = Field(default=1.0, ge=1.0)
    lambda_max: float = Field(default=1.5, ge=1.0)
    layer_range: Optional[LayerRange] = None

    @model_validator(mode="after")
    def check_lambdas(self) -> "AarConfig":
        if self.lambda_min > self.lambda_max:
            raise ValueError("lambda_min must not exceed lambda_max")
        return self


class AarSection(AarConfig):
    """AAR block of a run document."""

    enabled: bool = True


class VtcConfig(_Section):
    """Visual-token calibration block of a run document."""

    enabled: bool = True
    beta: float = Field(default=0.5, ge=0.0, le=1.0)
    layer_range: Optional[LayerRange] = None
    normalization: Normalization = Normalization.SUM_PRESERVING
    row_renorm: bool = True


class PlantedBias(_Section):
    """Additive score terms instantiating spatial-perception and modality bias."""

    sink_strength: float = Field(default=4.0, ge=0.0)
    sink_fraction: float = Field(default=0.05, gt=0.0, le=1.0)
    sink_positions: Optional[List[int]] = None
    decay: float = Field(default=0.1, ge=0.0)
    prior_weight: float = Field(default=1.0, ge=0.0, le=1.0)
    position_bias: float = 0.0

    def sink_count(self, image_slots: int) -> int:
        return math.ceil(self.sink_fraction * image_slots)


class ReadoutConfig(_Section):
    """Constants of the planted decoder's scores and output head."""

    image_score: float = 4.0
    text_score: float = 6.4
    content_spread: float = Field(default=0.2, ge=0.0)
    visual_gain: float = Field(default=300.0, ge=0.0)
    prior_gain: float = Field(default=36.0, ge=0.0)
    eos_bias: float = Field(default=1.2, gt=0.0)
    eos_growth: float = Field(default=1.0, ge=0.0)
    sep_logit: float = 8.0
    repeat_penalty: float = Field(default=100.0, ge=0.0)
    mask_logit: float = -30.0


class WorldConfig(_Section):
    """Synthetic world: vocabulary, prior table and scene construction."""

    num_objects: int = Field(default=64, ge=2)
    objects_per_scene: int = Field(default=5, ge=1)
    max_slots_per_object: int = Field(default=3, ge=1)
    neighbor_weight: float = Field(default=0.4, ge=0.0, lt=1.0)
    neighbor_exclusion: float = Field(default=0.5, ge=0.0, le=1.0)
    prior_concentration: float = Field(default=0.3, gt=0.0)
    seed: int = Field(default=0, ge=0)
    readout: ReadoutConfig = ReadoutConfig()


class GenerationSettings(_Section):
    """Decoding limits."""

    max_new_tokens: int = Field(default=32, ge=1)
    min_new_tokens: int = Field(default=0, ge=0)


class RelevancySettings(_Section):
    """Relevancy analysis options."""

    aggregation: Aggregation = Aggregation.UNIFORM_ROLLOUT
    fd_step: float = Field(default=1e-5, gt=0.0)
    analysis_layers: Optional[LayerRange] = None


class RunConfig(_Section):
    """Complete, validated experiment configuration."""

    model: ModelSection = ModelSection()
    world: WorldConfig = WorldConfig()
    bias: PlantedBias = PlantedBias()
    reference: ReferenceSpec = ReferenceSpec()
    vtc: VtcConfig = VtcConfig()
    aar: AarSection = AarSection()
    generation: GenerationSettings = GenerationSettings()
    relevancy: RelevancySettings = RelevancySettings()
    seeds: List[int] = Field(default_factory=lambda: list(range(50)), min_length=1)
    output_dir: str = "runs/default"
    calibration_path: Optional[str] = None
    workers: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def check_consistency(self) -> "RunConfig":
        num_layers = self.model.num_layers
        _check_range(self.vtc.layer_range, num_layers, "vtc.layer_range")
        _check_range(self.aar.layer_range, num_layers, "aar.layer_range")
        _check_range(self.relevancy.analysis_layers, num_layers, "relevancy.analysis_layers")

        k = self.world.objects_per_scene
        if k > min(self.world.num_objects, self.model.image_slots):
            raise ValueError("world.objects_per_scene must be <= min(num_objects, image_slots)")

        if self.bias.sink_positions is not None:
            if any(not 0 <= p < self.model.image_slots for p in self.bias.sink_positions):
                raise ValueError("bias.sink_positions must index image slots")

        if self.generation.min_new_tokens > self.generation.max_new_tokens:
            raise ValueError("generation.min_new_tokens must not exceed max_new_tokens")

        # image slots + BOS + 3 query words + generated tokens
        needed = self.model.image_slots + 4 + self.generation.max_new_tokens
        if needed > self.model.max_seq_len:
            raise ValueError(
                f"model.max_seq_len ({self.model.max_seq_len}) too small for "
                f"{needed} tokens (image + query + max_new_tokens)"
            )
        return self

    # ------------------------------------------------------------------
    # Derived values
    # ------------------------------------------------------------------

    @property
    def vtc_layers(self) -> LayerRange:
        return self.vtc.layer_range or default_vtc_layers(self.model.num_layers)

    @property
    def aar_layers(self) -> LayerRange:
        return self.aar.layer_range or (0, self.model.num_layers)

    @property
    def analysis_layers(self) -> LayerRange:
        return self.relevancy.analysis_layers or self.vtc_layers

    def aar_config(self) -> AarConfig:
        """AarConfig with the layer range resolved."""
        return AarConfig(
            p_thr=self.aar.p_thr,
            lambda_min=self.aar.lambda_min,
            lambda_max=self.aar.lambda_max,
            layer_range=self.aar_layers,
        )

    def build_model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(**self.model.model_dump(), vocab_size=vocab_size)

    # ------------------------------------------------------------------
    # Loading and overrides
    # ------------------------------------------------------------------

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise _config_error(e) from e

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        """
        Load a run configuration from JSON (or YAML).

        Raises:
            MissingArtifactError: file does not exist
            ConfigError: unparsable document or schema violation
        """
        config_path = Path(path)
        if not config_path.exists():
            raise MissingArtifactError("config file not found", path=str(config_path))

        text = config_path.read_text()
        try:
            if config_path.suffix in {".yaml", ".yml"}:
                data = yaml.safe_load(text) or {}
            else:
                data = json.loads(text)
        except (json.JSONDecodeError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot parse config: {e}", path=str(config_path)) from e

        if not isinstance(data, dict):
            raise ConfigError("config root must be an object", path=str(config_path))
        return cls.from_dict(data)

    def with_overrides(self, overrides: Dict[str, Any]) -> "RunConfig":
        """
        Apply dotted-path overrides (e.g. {"vtc.beta": 0.0}) and re-validate.

        Flags always win over the file; None values are ignored.
        """
        data = self.model_dump(mode="json")
        for dotted, value in overrides.items():
            if value is None:
                continue
            node = data
            *parents, leaf = dotted.split(".")
            for key in parents:
                node = node[key]
            node[leaf] = value
        return RunConfig.from_dict(data)


def _config_error(error: ValidationError) -> ConfigError:
    first = error.errors()[0]
    field = ".".join(str(part) for part in first["loc"]) or "<root>"
    return ConfigError(f"invalid config at {field}: {first['msg']}", field=field)
