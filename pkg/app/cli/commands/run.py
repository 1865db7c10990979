"""
Run Command
Generate one stream for a single scene with the configured components
"""

import argparse

from app.cli.common import add_common_args, emit, obtain_calibration, prepare
from app.core.logging import get_logger
from app.services.artifact_service import ArtifactService
from app.services.evaluation_service import EvaluationService
from app.services.generation_service import Cell
from app.services.metrics_service import MetricsService

logger = get_logger(__name__)


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("run", help="Generate a description of one scene")
    add_common_args(parser)
    parser.add_argument("--seed", type=int, default=None, help="Scene seed (default: first seed)")
    parser.add_argument("--cell", choices=[c.value for c in Cell], default=None)
    parser.set_defaults(handler=handle)


def handle(args: argparse.Namespace) -> int:
    ctx = prepare(args)
    cell = Cell(args.cell) if args.cell else EvaluationService.configured_cell(ctx.config)
    cal_set = obtain_calibration(ctx, required=cell in (Cell.VTC_ONLY, Cell.BOTH))
    seed = args.seed if args.seed is not None else ctx.config.seeds[0]

    gcfg = EvaluationService.generation_config(ctx.world, cal_set, cell)
    result = EvaluationService.run_scene(ctx.world, gcfg, seed, cell.value)
    report = MetricsService.report(
        [result],
        ctx.world.vocab,
        cell.value,
        analysis_layers=ctx.config.analysis_layers,
        fingerprint=ctx.world.fingerprint,
    )

    ArtifactService.write_traces(ctx.output_dir / "trace.jsonl", [result.trace])
    ArtifactService.write_json(ctx.output_dir / "report.json", report)

    vocab = ctx.world.vocab
    emit("present:   " + " ".join(vocab.name(t) for t in result.scene.present))
    emit("generated: " + " ".join(vocab.name(t) for t in result.trace.token_ids))
    emit(
        f"chair_i={report.chair_i:.3f} cover={report.cover:.3f} "
        f"triggered={result.trace.triggered_steps}/{len(result.trace.steps)}"
    )
    return 0
