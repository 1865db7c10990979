"""
CAAC Lab - Command Entry Point
Confidence-aware attention calibration experiments

Commands:
- calibrate: build a VTC calibration file from a meaningless reference input
- run: describe one scene
- eval: hallucination metrics over a seed suite, optional sweeps
- ablate: baseline / vtc_only / aar_only / both grid
- relevancy: image relevancy decay and attention concentration
"""

import sys
from pathlib import Path
from typing import Optional, Sequence

from app.cli.parser import build_parser
from app.core.exceptions import CaacError, GenerationAborted
from app.core.logging import configure_logging, get_logger
from app.services.artifact_service import ArtifactService

ABORTED_TRACE_FILE = "aborted_trace.jsonl"


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse arguments, run the command and map lab errors to exit codes.

    Returns:
        0 on success, 2 config/domain error, 3 numeric error, 4 missing artifact
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(level=args.log_level)
    logger = get_logger(__name__)

    try:
        return args.handler(args)
    except GenerationAborted as e:
        output_dir: Optional[Path] = getattr(args, "resolved_output_dir", None)
        if output_dir is not None:
            ArtifactService.write_traces(output_dir / ABORTED_TRACE_FILE, [e.partial_trace])
        logger.error("command_failed", command=args.command, error=str(e), **e.context)
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except CaacError as e:
        logger.error(
            "command_failed",
            command=args.command,
            error_type=type(e).__name__,
            error=e.message,
            **e.context,
        )
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
