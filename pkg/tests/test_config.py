"""
Configuration Tests
Run documents, overrides and process settings
"""

import json
from pathlib import Path

import pytest

from app.core.config import Settings
from app.core.exceptions import ConfigError, MissingArtifactError
from app.schemas.config_schemas import Normalization, RunConfig, default_vtc_layers
from tests.conftest import small_run_dict


class TestRunConfig:
    """Test suite for RunConfig."""

    def test_defaults(self):
        config = RunConfig()
        assert config.vtc.beta == 0.5
        assert config.aar.p_thr == 0.25
        assert config.seeds == list(range(50))
        assert config.vtc.normalization is Normalization.SUM_PRESERVING

    def test_shipped_run_document_matches_defaults(self):
        shipped = RunConfig.load(Path(__file__).parent.parent / "config" / "default_run.json")
        assert shipped == RunConfig()

    def test_derived_layer_ranges(self, run_config):
        assert run_config.vtc_layers == (0, 1)
        assert run_config.aar_layers == (0, 2)
        assert run_config.analysis_layers == run_config.vtc_layers
        assert run_config.aar_config().layer_range == (0, 2)

    def test_default_vtc_layers_scale_with_depth(self):
        assert default_vtc_layers(32) == (0, 10)
        assert default_vtc_layers(2) == (0, 1)

    def test_beta_out_of_range(self):
        with pytest.raises(ConfigError) as excinfo:
            RunConfig.from_dict(small_run_dict(vtc={"beta": 1.5}))
        assert excinfo.value.field == "vtc.beta"
        assert "vtc.beta" in str(excinfo.value)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError) as excinfo:
            RunConfig.from_dict(small_run_dict(aar={"p_threshold": 0.3}))
        assert excinfo.value.field.startswith("aar")

    def test_layer_range_checked(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(small_run_dict(vtc={"layer_range": [0, 5]}))

    def test_sequence_budget_checked(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(small_run_dict(generation={"max_new_tokens": 30}))

    def test_lambda_order(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(small_run_dict(aar={"lambda_min": 2.0, "lambda_max": 1.5}))

    def test_with_overrides(self, run_config):
        config = run_config.with_overrides({"vtc.beta": 0.0, "aar.p_thr": None, "seeds": [7]})
        assert config.vtc.beta == 0.0
        assert config.aar.p_thr == run_config.aar.p_thr
        assert config.seeds == [7]

    def test_overrides_revalidate(self, run_config):
        with pytest.raises(ConfigError):
            run_config.with_overrides({"aar.p_thr": 2.0})

    def test_load_json(self, config_file):
        config = RunConfig.load(config_file)
        assert config.model.image_slots == 8

    def test_load_yaml(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("vtc:\n  beta: 0.2\nseeds: [1, 2]\n")
        config = RunConfig.load(path)
        assert config.vtc.beta == 0.2
        assert config.seeds == [1, 2]

    def test_load_missing(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            RunConfig.load(tmp_path / "absent.json")

    def test_load_unparsable(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            RunConfig.load(path)

    def test_root_must_be_object(self, tmp_path):
        path = tmp_path / "list.json"
        path.write_text(json.dumps([1, 2]))
        with pytest.raises(ConfigError):
            RunConfig.load(path)


class TestSettings:
    """Test suite for process settings."""

    def test_env_prefix(self, monkeypatch):
        monkeypatch.setenv("CAAC_WORKERS", "3")
        monkeypatch.setenv("CAAC_LOG_LEVEL", "debug")
        settings = Settings()
        assert settings.WORKERS == 3
        assert settings.LOG_LEVEL == "DEBUG"

    def test_invalid_workers(self, monkeypatch):
        monkeypatch.setenv("CAAC_WORKERS", "0")
        with pytest.raises(ValueError):
            Settings()
