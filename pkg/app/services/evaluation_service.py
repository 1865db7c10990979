"""
Evaluation Service
Seed-suite fan-out, ablation grid and hyperparameter sweeps

Scenes run in worker threads that share the immutable decoder and
calibration set; results are merged back in seed order.
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from app.core.config import settings
from app.core.exceptions import ConfigError
from app.core.logging import get_logger
from app.schemas.config_schemas import RunConfig
from app.schemas.report_schemas import AblationReport, MetricReport
from app.services.generation_service import Cell, GenerationConfig, GenerationService
from app.services.metrics_service import MetricsService, SceneResult
from app.services.vtc_service import CalibrationSet, ReferenceCapture, VTCService
from app.services.world_service import World, WorldService

logger = get_logger(__name__)

# Sweepable parameters and the run-config field each one overrides
SWEEP_FIELDS = {
    "p_thr": "aar.p_thr",
    "beta": "vtc.beta",
    "lambda_max": "aar.lambda_max",
}


class EvaluationService:
    """Service for suite-level runs over the planted world."""

    @staticmethod
    def configured_cell(config: RunConfig) -> Cell:
        """Grid cell matching the enabled components of a run config."""
        if config.vtc.enabled and config.aar.enabled:
            return Cell.BOTH
        if config.vtc.enabled:
            return Cell.VTC_ONLY
        if config.aar.enabled:
            return Cell.AAR_ONLY
        return Cell.BASELINE

    @staticmethod
    def calibrate(world: World) -> Tuple[CalibrationSet, ReferenceCapture]:
        """Build the calibration set a run config asks for."""
        config = world.config
        return VTCService.build_calibration_set(
            world.decoder,
            config.reference,
            world.vocab,
            beta=config.vtc.beta,
            layer_range=config.vtc_layers,
            mode=config.vtc.normalization,
            model_fingerprint=world.fingerprint,
        )

    @staticmethod
    def generation_config(
        world: World,
        cal_set: Optional[CalibrationSet],
        cell: Optional[Cell] = None,
        relevancy: bool = False,
    ) -> GenerationConfig:
        """
        GenerationConfig for a cell of the run config.

        Relevancy runs force min_new_tokens = max_new_tokens so every stream
        covers the same positions.
        """
        config = world.config
        cell = cell or EvaluationService.configured_cell(config)
        vtc = cal_set.with_beta(config.vtc.beta) if cal_set is not None else None
        if cell in (Cell.VTC_ONLY, Cell.BOTH) and vtc is None:
            raise ConfigError("cell needs a calibration set", cell=cell.value)

        max_new = config.generation.max_new_tokens
        gcfg = GenerationConfig(
            max_new_tokens=max_new,
            min_new_tokens=max_new if relevancy else config.generation.min_new_tokens,
            vtc=vtc,
            aar=config.aar_config(),
            row_renorm=config.vtc.row_renorm,
            capture_attention=True,
            relevancy=config.relevancy.aggregation if relevancy else None,
            fd_step=config.relevancy.fd_step,
        )
        return gcfg.for_cell(cell)

    @staticmethod
    def run_scene(world: World, gcfg: GenerationConfig, seed: int, cell: str) -> SceneResult:
        scene = world.scene(seed)
        trace = GenerationService.generate(
            world.decoder,
            world.prompt(scene),
            gcfg,
            seed=seed,
            cell=cell,
            fingerprint=world.fingerprint,
        )
        labels = WorldService.label_tokens(trace.token_ids, scene, world.vocab)
        return SceneResult(seed=seed, scene=scene, trace=trace.with_labels(labels))

    @staticmethod
    def run_suite(
        world: World,
        gcfg: GenerationConfig,
        seeds: Sequence[int],
        cell: str,
        workers: Optional[int] = None,
    ) -> List[SceneResult]:
        """
        Generate one stream per seed across worker threads.

        Returns:
            SceneResults in the order of seeds
        """
        width = workers or world.config.workers or settings.WORKERS
        logger.info("suite_started", cell=cell, scenes=len(seeds), workers=width)
        with ThreadPoolExecutor(max_workers=width) as pool:
            results = list(
                pool.map(lambda seed: EvaluationService.run_scene(world, gcfg, seed, cell), seeds)
            )
        logger.info(
            "suite_finished",
            cell=cell,
            tokens=sum(len(r.trace.steps) for r in results),
            triggered=sum(r.trace.triggered_steps for r in results),
        )
        return results

    @staticmethod
    def evaluate(
        world: World,
        cal_set: Optional[CalibrationSet],
        cell: Optional[Cell] = None,
        relevancy: bool = False,
        workers: Optional[int] = None,
    ) -> Tuple[List[SceneResult], MetricReport]:
        """Run one cell over the configured seed suite and report its metrics."""
        cell = cell or EvaluationService.configured_cell(world.config)
        gcfg = EvaluationService.generation_config(world, cal_set, cell, relevancy)
        results = EvaluationService.run_suite(
            world, gcfg, world.config.seeds, cell.value, workers
        )
        report = MetricsService.report(
            results,
            world.vocab,
            cell.value,
            analysis_layers=world.config.analysis_layers,
            fingerprint=world.fingerprint,
        )
        return results, report

    @staticmethod
    def ablate(
        world: World,
        cal_set: CalibrationSet,
        workers: Optional[int] = None,
    ) -> Tuple[Dict[Cell, List[SceneResult]], AblationReport]:
        """Run the four-cell grid over the seed suite under identical seeds."""
        results: Dict[Cell, List[SceneResult]] = {}
        reports: Dict[str, MetricReport] = {}
        for cell in Cell:
            results[cell], reports[cell.value] = EvaluationService.evaluate(
                world, cal_set, cell, workers=workers
            )
        return results, AblationReport(cells=reports)

    @staticmethod
    def sweep(
        world: World,
        cal_set: Optional[CalibrationSet],
        parameter: str,
        values: Sequence[float],
        workers: Optional[int] = None,
    ) -> pd.DataFrame:
        """
        Evaluate the configured cell once per parameter value.

        Raises:
            ConfigError: unknown parameter or a value the config rejects
        """
        if parameter not in SWEEP_FIELDS:
            raise ConfigError(
                f"cannot sweep {parameter!r}; choose one of {sorted(SWEEP_FIELDS)}",
                field="sweep",
            )

        rows = []
        for value in values:
            config = world.config.with_overrides({SWEEP_FIELDS[parameter]: value})
            swept = World(
                config=config,
                vocab=world.vocab,
                model_config=world.model_config,
                decoder=world.decoder,
                fingerprint=world.fingerprint,
            )
            _, report = EvaluationService.evaluate(swept, cal_set, workers=workers)
            rows.append({"parameter": parameter, "value": value, **report.summary()})
            logger.info("sweep_point", parameter=parameter, value=value, chair_i=report.chair_i)
        return pd.DataFrame(rows)
