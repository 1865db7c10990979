"""
Eval Command
Seed-suite evaluation of the configured cell, with optional hyperparameter sweeps
"""

import argparse
from typing import List, Sequence, Tuple

import pandas as pd

from app.cli.common import add_common_args, emit, obtain_calibration, prepare
from app.core.exceptions import ConfigError
from app.core.logging import get_logger
from app.models.world_models import TokenLabel
from app.schemas.report_schemas import SeedMetrics
from app.services.artifact_service import ArtifactService
from app.services.evaluation_service import SWEEP_FIELDS, EvaluationService
from app.services.generation_service import Cell

logger = get_logger(__name__)


def parse_sweep(value: str) -> Tuple[str, List[float]]:
    """
    Parse "name=v1,v2,..." into a parameter name and its values.

    Raises:
        argparse.ArgumentTypeError: malformed specification
    """
    name, sep, raw = value.partition("=")
    name = name.strip().replace("-", "_")
    if not sep or not name or not raw.strip():
        raise argparse.ArgumentTypeError(f"expected name=v1,v2,... got {value!r}")
    try:
        values = [float(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"sweep values must be numbers: {raw!r}") from None
    return name, values


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("eval", help="Evaluate hallucination metrics over a seed suite")
    add_common_args(parser)
    parser.add_argument("--cell", choices=[c.value for c in Cell], default=None)
    parser.add_argument(
        "--sweep",
        type=parse_sweep,
        default=None,
        help=f"Sweep one of {sorted(SWEEP_FIELDS)}, e.g. p_thr=0,0.1,0.25",
    )
    parser.set_defaults(handler=handle)


def per_seed_frame(per_seed: Sequence[SeedMetrics]) -> pd.DataFrame:
    """Per-scene metrics with the object lists joined into strings."""
    rows = []
    for metrics in per_seed:
        row = metrics.model_dump(mode="json")
        row["mentioned"] = " ".join(str(t) for t in metrics.mentioned)
        row["present"] = " ".join(str(t) for t in metrics.present)
        rows.append(row)
    return pd.DataFrame(rows)


def handle(args: argparse.Namespace) -> int:
    ctx = prepare(args)
    cell = Cell(args.cell) if args.cell else EvaluationService.configured_cell(ctx.config)
    if args.sweep is not None and cell is not EvaluationService.configured_cell(ctx.config):
        raise ConfigError("--sweep runs the configured cell; drop --cell", field="cell")
    cal_set = obtain_calibration(ctx, required=cell in (Cell.VTC_ONLY, Cell.BOTH))

    results, report = EvaluationService.evaluate(ctx.world, cal_set, cell)
    traces = [r.trace for r in results]

    ArtifactService.write_traces(ctx.output_dir / "traces.jsonl", traces)
    ArtifactService.write_json(ctx.output_dir / "report.json", report)
    ArtifactService.write_csv(ctx.output_dir / "per_seed.csv", per_seed_frame(report.per_seed))
    ArtifactService.write_histogram(
        ctx.output_dir / "confidence.svg",
        {
            label.value: [s.p_t for t in traces for s in t.steps if s.label is label]
            for label in (TokenLabel.TRUTHFUL, TokenLabel.HALLUCINATORY)
        },
        title=f"Pass-1 confidence ({cell.value})",
        xlabel="p_t",
    )

    emit(
        f"{cell.value}: chair_i={report.chair_i:.4f} chair_s={report.chair_s:.4f} "
        f"hal={report.hal:.4f} cover={report.cover:.4f} trigger_rate={report.trigger_rate:.4f}"
    )

    if args.sweep is not None:
        parameter, values = args.sweep
        frame = EvaluationService.sweep(ctx.world, cal_set, parameter, values)
        ArtifactService.write_csv(ctx.output_dir / "sweep.csv", frame)
        ArtifactService.write_line_plot(
            ctx.output_dir / "sweep.svg",
            frame["value"].tolist(),
            {"chair_i": frame["chair_i"].tolist(), "cover": frame["cover"].tolist()},
            title=f"Sweep over {parameter}",
            xlabel=parameter,
            ylabel="rate",
        )
        for row in frame.itertuples():
            emit(f"{parameter}={row.value:g}: chair_i={row.chair_i:.4f} cover={row.cover:.4f}")

    logger.info("eval_finished", cell=cell.value, scenes=len(results))
    return 0
