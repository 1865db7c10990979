"""
Relevancy Command
Relative image relevancy decay, attention concentration and token analysis

Every stream runs to max_new_tokens so all positions are covered by every
trace.
"""

import argparse

import pandas as pd

from app.cli.common import add_common_args, emit, obtain_calibration, prepare
from app.core.logging import get_logger
from app.models.world_models import TokenLabel
from app.schemas.report_schemas import RelevancyReport
from app.services.artifact_service import ArtifactService
from app.services.evaluation_service import EvaluationService
from app.services.generation_service import Cell
from app.services.metrics_service import MetricsService
from app.services.relevancy_service import RelevancyService

logger = get_logger(__name__)


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("relevancy", help="Analyse image relevancy over generation")
    add_common_args(parser)
    parser.add_argument(
        "--cell", choices=[c.value for c in Cell], default=Cell.BASELINE.value
    )
    parser.set_defaults(handler=handle)


def handle(args: argparse.Namespace) -> int:
    ctx = prepare(args)
    cell = Cell(args.cell)
    cal_set = obtain_calibration(ctx, required=cell in (Cell.VTC_ONLY, Cell.BOTH))

    gcfg = EvaluationService.generation_config(ctx.world, cal_set, cell, relevancy=True)
    results = EvaluationService.run_suite(ctx.world, gcfg, ctx.config.seeds, cell.value)
    traces = [r.trace for r in results]

    decay = RelevancyService.decay_trace(traces)
    concentration = RelevancyService.trace_concentration(traces, ctx.config.analysis_layers)
    report = RelevancyReport(
        cell=cell.value,
        decay=decay,
        concentration=concentration,
        tokens=RelevancyService.token_analysis(traces),
        confidence_split=MetricsService.confidence_split(traces),
        fingerprint=ctx.world.fingerprint,
    )

    out = ctx.output_dir
    ArtifactService.write_traces(out / "relevancy_traces.jsonl", traces)
    ArtifactService.write_json(out / "relevancy.json", report)

    steps = pd.DataFrame(
        [
            {
                "seed": trace.seed,
                "position": step.step,
                "r_rel": step.r_rel,
                "label": step.label.value if step.label else None,
            }
            for trace in traces
            for step in trace.steps
        ]
    )
    ArtifactService.write_csv(out / "decay.csv", steps)
    ArtifactService.write_csv(
        out / "concentration.csv",
        pd.DataFrame(
            {
                "rank": range(1, len(concentration.cumulative_share) + 1),
                "cumulative_share": concentration.cumulative_share,
            }
        ),
    )

    ArtifactService.write_line_plot(
        out / "decay.svg",
        decay.positions,
        {"mean r_rel": decay.mean_r_rel},
        title="Relative image relevancy by position",
        xlabel="generated position",
        ylabel="r_rel",
    )
    ArtifactService.write_line_plot(
        out / "concentration.svg",
        list(range(1, len(concentration.cumulative_share) + 1)),
        {"cumulative share": concentration.cumulative_share},
        title="Image attention concentration",
        xlabel="rank",
        ylabel="cumulative share",
    )
    ArtifactService.write_histogram(
        out / "relevancy_by_label.svg",
        {
            label.value: [s.r_rel for t in traces for s in t.steps if s.label is label]
            for label in (TokenLabel.TRUTHFUL, TokenLabel.HALLUCINATORY)
        },
        title="Relative image relevancy by token label",
        xlabel="r_rel",
    )

    emit(f"decay_correlation={decay.correlation:.4f} over {len(decay.positions)} positions")
    emit(
        f"top_decile_share={concentration.top_decile_share:.4f} "
        f"(top {concentration.top_k} image positions)"
    )
    if report.tokens.mannwhitney_p is not None:
        emit(
            f"r_rel truthful={report.tokens.truthful_mean_r_rel:.4f} "
            f"hallucinatory={report.tokens.hallucinatory_mean_r_rel:.4f} "
            f"p={report.tokens.mannwhitney_p:.3g}"
        )
    logger.info("relevancy_finished", cell=cell.value, correlation=decay.correlation)
    return 0
