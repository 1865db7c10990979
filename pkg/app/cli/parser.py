"""
CAAC Lab Command Parser
One sub-parser per command module
"""

import argparse

from app import __version__
from app.cli.commands import ablate, calibrate, evaluate, relevancy, run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="caac",
        description="Confidence-aware attention calibration experiments on a planted-bias world",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)

    # Include all command parsers
    calibrate.register(subparsers)
    run.register(subparsers)
    evaluate.register(subparsers)
    ablate.register(subparsers)
    relevancy.register(subparsers)
    return parser
