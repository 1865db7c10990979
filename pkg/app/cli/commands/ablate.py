"""
Ablate Command
The baseline / vtc_only / aar_only / both grid under identical seeds
"""

import argparse

import pandas as pd

from app.cli.common import add_common_args, emit, obtain_calibration, prepare
from app.core.logging import get_logger
from app.services.artifact_service import ArtifactService
from app.services.evaluation_service import EvaluationService

logger = get_logger(__name__)


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("ablate", help="Run the four-cell component ablation")
    add_common_args(parser)
    parser.set_defaults(handler=handle)


def handle(args: argparse.Namespace) -> int:
    ctx = prepare(args)
    cal_set = obtain_calibration(ctx, required=True)
    results, ablation = EvaluationService.ablate(ctx.world, cal_set)

    for cell, cell_results in results.items():
        ArtifactService.write_traces(
            ctx.output_dir / f"traces_{cell.value}.jsonl", [r.trace for r in cell_results]
        )
    ArtifactService.write_json(ctx.output_dir / "ablation.json", ablation)

    frame = pd.DataFrame([report.summary() for report in ablation.cells.values()])
    ArtifactService.write_csv(ctx.output_dir / "ablation.csv", frame)
    ArtifactService.write_bar_plot(
        ctx.output_dir / "ablation.svg",
        {name: report.chair_i for name, report in ablation.cells.items()},
        title="CHAIR_i by configuration",
        ylabel="chair_i",
    )

    for name, report in ablation.cells.items():
        emit(
            f"{name:>9}: chair_i={report.chair_i:.4f} chair_s={report.chair_s:.4f} "
            f"cover={report.cover:.4f} trigger_rate={report.trigger_rate:.4f}"
        )
    logger.info("ablate_finished", cells=len(ablation.cells))
    return 0
