"""
Shared CLI plumbing
Common flags, flag-over-config resolution, world setup and calibration lookup

Precedence is total: a flag given on the command line always wins over the
config file, which wins over the schema defaults.
"""

import argparse
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

from app.core.exceptions import ConfigError
from app.core.logging import get_logger
from app.schemas.config_schemas import RunConfig
from app.services.artifact_service import ArtifactService
from app.services.evaluation_service import EvaluationService
from app.services.vtc_service import CalibrationSet
from app.services.world_service import World, WorldService

logger = get_logger(__name__)

# Flag destination -> dotted RunConfig field it overrides
OVERRIDE_FLAGS = {
    "beta": "vtc.beta",
    "p_thr": "aar.p_thr",
    "lambda_max": "aar.lambda_max",
    "max_new_tokens": "generation.max_new_tokens",
    "seeds": "seeds",
    "output_dir": "output_dir",
    "workers": "workers",
    "calibration": "calibration_path",
}

CALIBRATION_FILE = "calibration.json"


@dataclass(frozen=True)
class CommandContext:
    """Resolved configuration and world shared by every sub-command."""

    config: RunConfig
    world: World
    output_dir: Path


def parse_seeds(value: str) -> List[int]:
    """
    Parse a seed list: "0-49", "1,2,5" or a mix such as "0-4,10".

    Raises:
        argparse.ArgumentTypeError: malformed or empty list
    """
    seeds: List[int] = []
    try:
        for part in value.split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part:
                low, high = (int(x) for x in part.split("-", 1))
                if low > high:
                    raise ValueError(part)
                seeds.extend(range(low, high + 1))
            else:
                seeds.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed list {value!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("seed list must not be empty")
    return seeds


def add_common_args(parser: argparse.ArgumentParser) -> None:
    """Flags every sub-command accepts."""
    parser.add_argument("--config", type=Path, default=None, help="Run configuration (JSON/YAML)")
    parser.add_argument("--beta", type=float, default=None, help="VTC smoothing strength")
    parser.add_argument("--p-thr", type=float, default=None, help="AAR confidence threshold")
    parser.add_argument("--lambda-max", type=float, default=None, help="Largest AAR scale")
    parser.add_argument("--max-new-tokens", type=int, default=None)
    parser.add_argument("--seeds", type=parse_seeds, default=None, help='e.g. "0-49" or "1,3,5"')
    parser.add_argument("--output-dir", type=str, default=None)
    parser.add_argument("--workers", type=int, default=None, help="Seed-suite thread width")
    parser.add_argument("--calibration", type=str, default=None, help="Calibration JSON path")
    parser.add_argument("--log-level", type=str, default=None)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """
    Load the config file (or defaults) and apply every flag that was given.

    Raises:
        MissingArtifactError: --config names a file that does not exist
        ConfigError: invalid document or flag value
    """
    config = RunConfig.load(args.config) if args.config is not None else RunConfig()
    overrides: Dict[str, Any] = {
        field: getattr(args, dest, None) for dest, field in OVERRIDE_FLAGS.items()
    }
    return config.with_overrides(overrides)


def prepare(args: argparse.Namespace) -> CommandContext:
    """Resolve the config, build the world and echo the effective config."""
    config = resolve_config(args)
    output_dir = ArtifactService.ensure_dir(config.output_dir)
    # lets the entry point place a partial trace after an aborted generation
    args.resolved_output_dir = output_dir
    world = WorldService.build_world(config)
    ArtifactService.write_effective_config(output_dir, config)
    logger.info("command_prepared", command=args.command, output_dir=str(output_dir))
    return CommandContext(config=config, world=world, output_dir=output_dir)


def obtain_calibration(ctx: CommandContext, required: bool) -> Optional[CalibrationSet]:
    """
    Calibration set for a run.

    A configured calibration_path must exist and match the world fingerprint;
    without one the set is built in memory from the configured reference.

    Raises:
        MissingArtifactError: calibration_path set but absent
        FingerprintMismatchError: file built for another model or world
    """
    if not required:
        return None
    path = ctx.config.calibration_path
    if path is None:
        cal_set, _ = EvaluationService.calibrate(ctx.world)
        return cal_set
    cal_set = ArtifactService.load_calibration(path, expected_fingerprint=ctx.world.fingerprint)
    if cal_set.layer_range != ctx.config.vtc_layers:
        raise ConfigError(
            "calibration layer range differs from vtc.layer_range",
            field="vtc.layer_range",
            calibration=list(cal_set.layer_range),
            config=list(ctx.config.vtc_layers),
        )
    return cal_set


def emit(line: str) -> None:
    """Command summaries go to stdout; logs stay on stderr."""
    print(line, flush=True)
