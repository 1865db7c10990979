#!/usr/bin/env python
"""
Rewrite tests/golden/default_suite.json from the current code.

Usage: python scripts/update_golden.py [--if-missing]
"""

import argparse
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT))

from app.core.logging import configure_logging, get_logger  # noqa: E402
from tests.test_golden import GOLDEN_FILE, build_snapshot, write_snapshot  # noqa: E402


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    parser.add_argument(
        "--if-missing", action="store_true", help="only record a snapshot when none exists"
    )
    args = parser.parse_args()

    configure_logging(level="WARNING")
    if args.if_missing and GOLDEN_FILE.exists():
        return 0
    snapshot = build_snapshot()
    path = write_snapshot(snapshot)
    get_logger(__name__).warning(
        "golden_updated",
        path=str(path),
        cells=len(snapshot["cells"]),
        trace_steps=len(snapshot["trigger_trace"]),
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
