"""
Artifact Service
Reading and writing run outputs: JSON, trace JSONL, CSV series and SVG plots

Every writer is deterministic: sorted JSON keys, fixed float formatting by
repr, and SVG output with a fixed hash salt and no date metadata.
"""

import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
from pydantic import BaseModel, ValidationError  # noqa: E402

from app.core.exceptions import ConfigError, MissingArtifactError  # noqa: E402
from app.core.logging import get_logger  # noqa: E402
from app.schemas.calibration_schemas import CalibrationDocument  # noqa: E402
from app.schemas.config_schemas import RunConfig  # noqa: E402
from app.schemas.trace_schemas import GenerationTrace, StepRecord, TraceHeader  # noqa: E402
from app.services.vtc_service import CalibrationSet  # noqa: E402

logger = get_logger(__name__)

PathLike = Union[str, Path]

plt.rcParams["svg.hashsalt"] = "caac-lab"
plt.rcParams["svg.fonttype"] = "none"

EFFECTIVE_CONFIG = "effective_config.json"


def _canonical(data: Any) -> str:
    if isinstance(data, BaseModel):
        data = data.model_dump(mode="json")
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


class ArtifactService:
    """Service for run artifacts on disk."""

    @staticmethod
    def ensure_dir(path: PathLike) -> Path:
        directory = Path(path)
        directory.mkdir(parents=True, exist_ok=True)
        return directory

    @staticmethod
    def write_json(path: PathLike, data: Any) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(_canonical(data))
        logger.debug("artifact_written", path=str(target))
        return target

    @staticmethod
    def read_json(path: PathLike) -> Dict[str, Any]:
        """
        Raises:
            MissingArtifactError: file does not exist
            ConfigError: file is not valid JSON
        """
        source = Path(path)
        if not source.exists():
            raise MissingArtifactError("artifact not found", path=str(source))
        try:
            return json.loads(source.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"cannot parse {source.name}: {e}", path=str(source)) from e

    @staticmethod
    def write_effective_config(output_dir: PathLike, config: RunConfig) -> Path:
        """Echo the fully resolved configuration next to the run outputs."""
        return ArtifactService.write_json(Path(output_dir) / EFFECTIVE_CONFIG, config)

    # ------------------------------------------------------------------
    # Calibration
    # ------------------------------------------------------------------

    @staticmethod
    def save_calibration(path: PathLike, cal_set: CalibrationSet) -> Path:
        return ArtifactService.write_json(path, cal_set.to_document())

    @staticmethod
    def load_calibration(
        path: PathLike, expected_fingerprint: Optional[str] = None
    ) -> CalibrationSet:
        """
        Raises:
            MissingArtifactError: calibration file absent
            ConfigError: malformed document
            FingerprintMismatchError: built for another model or world
        """
        data = ArtifactService.read_json(path)
        try:
            doc = CalibrationDocument.model_validate(data)
        except ValidationError as e:
            raise ConfigError(f"invalid calibration document: {e.errors()[0]['msg']}") from e
        return CalibrationSet.from_document(doc, expected_fingerprint)

    # ------------------------------------------------------------------
    # Traces
    # ------------------------------------------------------------------

    @staticmethod
    def write_traces(path: PathLike, traces: Iterable[GenerationTrace]) -> Path:
        """One header line per stream followed by one line per step."""
        lines: List[str] = []
        for trace in traces:
            header = TraceHeader(
                seed=trace.seed,
                cell=trace.cell,
                prompt_ids=trace.prompt_ids,
                num_steps=len(trace.steps),
                stop_reason=trace.stop_reason,
                fingerprint=trace.fingerprint,
            )
            lines.append(json.dumps(header.model_dump(mode="json"), sort_keys=True))
            for step in trace.steps:
                record = {"kind": "step", **step.model_dump(mode="json")}
                lines.append(json.dumps(record, sort_keys=True))

        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text("".join(line + "\n" for line in lines))
        logger.debug("traces_written", path=str(target), lines=len(lines))
        return target

    @staticmethod
    def read_traces(path: PathLike) -> List[GenerationTrace]:
        """
        Raises:
            MissingArtifactError: file does not exist
            ConfigError: malformed line
        """
        source = Path(path)
        if not source.exists():
            raise MissingArtifactError("trace file not found", path=str(source))

        traces: List[GenerationTrace] = []
        header: Optional[TraceHeader] = None
        steps: List[StepRecord] = []

        def flush() -> None:
            if header is not None:
                traces.append(
                    GenerationTrace(
                        seed=header.seed,
                        cell=header.cell,
                        prompt_ids=header.prompt_ids,
                        steps=list(steps),
                        stop_reason=header.stop_reason,
                        fingerprint=header.fingerprint,
                    )
                )

        try:
            for number, line in enumerate(source.read_text().splitlines(), start=1):
                if not line.strip():
                    continue
                record = json.loads(line)
                kind = record.pop("kind", None)
                if kind == "trace":
                    flush()
                    header = TraceHeader(**record)
                    steps = []
                elif kind == "step" and header is not None:
                    steps.append(StepRecord(**record))
                else:
                    raise ConfigError("unexpected trace line", path=str(source), line=number)
        except (json.JSONDecodeError, ValidationError) as e:
            raise ConfigError(f"malformed trace file: {e}", path=str(source)) from e
        flush()
        return traces

    # ------------------------------------------------------------------
    # Series and plots
    # ------------------------------------------------------------------

    @staticmethod
    def write_csv(path: PathLike, frame: pd.DataFrame) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(target, index=False, lineterminator="\n")
        return target

    @staticmethod
    def write_line_plot(
        path: PathLike,
        x: Sequence[float],
        series: Mapping[str, Sequence[float]],
        title: str,
        xlabel: str,
        ylabel: str,
    ) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, values in series.items():
            ax.plot(list(x), list(values), marker="o", markersize=3, label=label)
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if len(series) > 1:
            ax.legend()
        fig.tight_layout()
        fig.savefig(target, format="svg", metadata={"Date": None})
        plt.close(fig)
        return target

    @staticmethod
    def write_histogram(
        path: PathLike,
        groups: Mapping[str, Sequence[float]],
        title: str,
        xlabel: str,
        bins: int = 20,
        value_range: Optional[Sequence[float]] = (0.0, 1.0),
    ) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, values in groups.items():
            if len(values):
                ax.hist(list(values), bins=bins, range=value_range, alpha=0.6, label=label)
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("count")
        if groups:
            ax.legend()
        fig.tight_layout()
        fig.savefig(target, format="svg", metadata={"Date": None})
        plt.close(fig)
        return target

    @staticmethod
    def write_bar_plot(
        path: PathLike, values: Mapping[str, float], title: str, ylabel: str
    ) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.bar(list(values.keys()), list(values.values()))
        ax.set_title(title)
        ax.set_ylabel(ylabel)
        fig.tight_layout()
        fig.savefig(target, format="svg", metadata={"Date": None})
        plt.close(fig)
        return target
