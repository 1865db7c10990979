"""Pytest configuration and fixtures for CAAC lab tests."""

import json
from pathlib import Path
from typing import Any, Dict, List, Optional

import pytest

from app.core.logging import configure_logging
from app.models.decoder import TokenSequence, ToyDecoder
from app.models.world_models import TokenLabel
from app.schemas.config_schemas import ModelConfig, RunConfig
from app.schemas.trace_schemas import GenerationTrace, StepRecord
from app.services.world_service import World, WorldService

# Small enough to run the whole suite in seconds
SMALL_RUN: Dict[str, Any] = {
    "model": {
        "num_layers": 2,
        "num_heads": 2,
        "model_dim": 16,
        "image_slots": 8,
        "max_seq_len": 32,
        "seed": 0,
    },
    "world": {"num_objects": 10, "objects_per_scene": 3, "seed": 0},
    "generation": {"max_new_tokens": 8},
    "seeds": [0, 1, 2, 3],
    "workers": 2,
}


def small_run_dict(**sections: Any) -> Dict[str, Any]:
    """SMALL_RUN with per-section keys merged in."""
    data = json.loads(json.dumps(SMALL_RUN))
    for section, values in sections.items():
        if isinstance(values, dict):
            data.setdefault(section, {}).update(values)
        else:
            data[section] = values
    return data


@pytest.fixture(autouse=True)
def _fresh_logging() -> None:
    """Bind log output to this test's stderr; main() rebinds it per call."""
    configure_logging(level="WARNING")


def make_world(**sections: Any) -> World:
    return WorldService.build_world(RunConfig.from_dict(small_run_dict(**sections)))


def make_step(
    step: int,
    token_id: int = 13,
    p_t: float = 0.5,
    r_rel: Optional[float] = None,
    label: Optional[TokenLabel] = None,
    image_attention: Optional[List[List[float]]] = None,
) -> StepRecord:
    return StepRecord(
        step=step,
        token_id=token_id,
        p_t=p_t,
        triggered=False,
        lambda_t=1.0,
        image_mass_pass1=0.5,
        image_mass_final=0.5,
        pass2_executed=False,
        r_rel=r_rel,
        image_attention=image_attention,
        label=label,
    )


def make_trace(steps: List[StepRecord], seed: int = 0) -> GenerationTrace:
    return GenerationTrace(seed=seed, prompt_ids=[3, 3, 0, 5], steps=steps)


@pytest.fixture
def tiny_config() -> ModelConfig:
    """Two layers, two heads, three image slots."""
    return ModelConfig(
        num_layers=2,
        num_heads=2,
        model_dim=8,
        image_slots=3,
        max_seq_len=16,
        vocab_size=12,
        seed=3,
    )


@pytest.fixture
def tiny_decoder(tiny_config: ModelConfig) -> ToyDecoder:
    return ToyDecoder(tiny_config)


@pytest.fixture
def tiny_seq() -> TokenSequence:
    return TokenSequence.build([5, 6, 7], [0, 8], [9])


@pytest.fixture
def run_config() -> RunConfig:
    return RunConfig.from_dict(small_run_dict())


@pytest.fixture
def world(run_config: RunConfig) -> World:
    return WorldService.build_world(run_config)


@pytest.fixture
def config_file(tmp_path: Path) -> Path:
    """Small run document on disk with its output directory under tmp_path."""
    path = tmp_path / "run.json"
    path.write_text(json.dumps(small_run_dict(output_dir=str(tmp_path / "out"))))
    return path
