"""
Calibrate Command
Build a calibration set from the meaningless reference input and self-check it
"""

import argparse
from pathlib import Path
from typing import Dict, List

from app.cli.common import CALIBRATION_FILE, add_common_args, emit, prepare
from app.core.exceptions import NumericError
from app.core.logging import get_logger
from app.schemas.calibration_schemas import FlatteningDiagnostic
from app.services.artifact_service import ArtifactService
from app.services.evaluation_service import EvaluationService
from app.services.vtc_service import VTCService

logger = get_logger(__name__)

KIND_COMPARISON_FILE = "kind_comparison.json"


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("calibrate", help="Build a VTC calibration file")
    add_common_args(parser)
    parser.add_argument(
        "--output",
        type=Path,
        default=None,
        help="Calibration file (default <output_dir>/calibration.json)",
    )
    parser.add_argument(
        "--compare-kinds",
        action="store_true",
        help="Also compare calibrations built from black, uniform and noise references",
    )
    parser.set_defaults(handler=handle)


def _layer_summary(
    diagnostics: List[FlatteningDiagnostic],
) -> Dict[int, List[FlatteningDiagnostic]]:
    by_layer: Dict[int, List[FlatteningDiagnostic]] = {}
    for diag in diagnostics:
        by_layer.setdefault(diag.layer, []).append(diag)
    return by_layer


def handle(args: argparse.Namespace) -> int:
    """
    Write the calibration set and print per-layer flattening diagnostics.

    Raises:
        NumericError: a vector fails to flatten its own reference row
    """
    ctx = prepare(args)
    cal_set, capture = EvaluationService.calibrate(ctx.world)
    diagnostics = VTCService.flattening_diagnostics(cal_set, capture)

    for layer, diags in sorted(_layer_summary(diagnostics).items()):
        worst = max(d.relative_spread for d in diags)
        status = "ok" if all(d.passed for d in diags) else "FAILED"
        emit(f"layer {layer}: heads={len(diags)} max_relative_spread={worst:.3e} {status}")

    failed = [d for d in diagnostics if not d.passed]
    if failed:
        raise NumericError(
            "calibration vector does not flatten its reference row",
            layer=failed[0].layer,
            head=failed[0].head,
            relative_spread=failed[0].relative_spread,
        )

    target = args.output or ctx.config.calibration_path or ctx.output_dir / CALIBRATION_FILE
    ArtifactService.save_calibration(target, cal_set)
    emit(f"calibration written to {target} ({len(cal_set.vectors)} vectors)")

    if args.compare_kinds:
        comparisons = VTCService.compare_kinds(
            ctx.world.decoder,
            ctx.world.vocab,
            ctx.config.reference,
            ctx.config.vtc_layers,
            ctx.config.vtc.normalization,
        )
        ArtifactService.write_json(
            ctx.output_dir / KIND_COMPARISON_FILE,
            [c.model_dump(mode="json") for c in comparisons],
        )
        for c in comparisons:
            emit(
                f"{c.kind_a} vs {c.kind_b}: "
                f"max_relative_difference={c.max_relative_difference:.4f}"
            )

    logger.info("calibrate_finished", path=str(target), floor_hits=cal_set.floor_hits)
    return 0
