"""
Visual-Token Calibration Service
Reference capture, inverse calibration vectors and beta-smoothed application

The calibration vector of a (layer, head) is the rescaled inverse of the
image-column attention the head gives a meaningless reference input, so that
multiplying the reference row by it yields a constant vector.
"""

import itertools
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from app.core.exceptions import DomainError, FingerprintMismatchError
from app.core.logging import get_logger
from app.models.decoder import AttentionHook, HookStage, ToyDecoder
from app.models.world_models import ObjectVocabulary
from app.schemas.calibration_schemas import (
    CalibrationDocument,
    CalibrationVectorDocument,
    FlatteningDiagnostic,
    KindComparison,
)
from app.schemas.config_schemas import ImageKind, LayerRange, Normalization, ReferenceSpec
from app.services.world_service import WorldService

logger = get_logger(__name__)

CAPTURE_FLOOR = 1e-12
FLATNESS_TOLERANCE = 1e-9
SUM_TOLERANCE = 1e-12

HeadKey = Tuple[int, int]


@dataclass(frozen=True)
class CalibrationVector:
    """Calibration entries over image positions; all finite and strictly positive."""

    entries: np.ndarray
    normalization: Normalization

    def __post_init__(self) -> None:
        entries = np.asarray(self.entries, dtype=np.float64)
        if entries.ndim != 1 or entries.size == 0:
            raise DomainError("calibration vector must be a non-empty 1-D array")
        if not np.all(np.isfinite(entries)) or np.any(entries <= 0.0):
            raise DomainError("calibration entries must be finite and strictly positive")
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return int(self.entries.size)


@dataclass(frozen=True)
class SmoothedRow:
    """Original, calibrated and smoothed image-column attention."""

    original: np.ndarray
    calibrated: np.ndarray
    smoothed: np.ndarray


@dataclass(frozen=True)
class ReferenceCapture:
    """Per-(layer, head) image-column attention of the reference input."""

    reference: ReferenceSpec
    rows: Mapping[HeadKey, np.ndarray]
    floor_hits: int = 0


@dataclass(frozen=True)
class CalibrationSet:
    """One calibration vector per (layer, head) in the gated layer range."""

    vectors: Mapping[HeadKey, CalibrationVector]
    layer_range: LayerRange
    beta: float
    reference: ReferenceSpec
    model_fingerprint: str
    num_heads: int
    floor_hits: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta <= 1.0:
            raise DomainError("beta must lie in [0, 1]", beta=self.beta)
        start, end = self.layer_range
        expected = set(itertools.product(range(start, end), range(self.num_heads)))
        if set(self.vectors) != expected:
            raise DomainError(
                "calibration set must hold one vector per (layer, head) in range",
                layer_range=self.layer_range,
            )

    def vector(self, layer: int, head: int) -> CalibrationVector:
        return self.vectors[(layer, head)]

    def with_beta(self, beta: float) -> "CalibrationSet":
        return CalibrationSet(
            vectors=self.vectors,
            layer_range=self.layer_range,
            beta=beta,
            reference=self.reference,
            model_fingerprint=self.model_fingerprint,
            num_heads=self.num_heads,
            floor_hits=self.floor_hits,
        )

    def to_document(self) -> CalibrationDocument:
        return CalibrationDocument(
            model_fingerprint=self.model_fingerprint,
            reference=self.reference,
            beta=self.beta,
            layer_range=self.layer_range,
            floor_hits=self.floor_hits,
            vectors=[
                CalibrationVectorDocument(
                    layer=layer,
                    head=head,
                    mode=vec.normalization,
                    entries=[float(x) for x in vec.entries],
                )
                for (layer, head), vec in sorted(self.vectors.items())
            ],
        )

    @classmethod
    def from_document(
        cls,
        doc: CalibrationDocument,
        expected_fingerprint: Optional[str] = None,
    ) -> "CalibrationSet":
        """
        Rebuild a calibration set from its document.

        Raises:
            FingerprintMismatchError: document built for another model or world
        """
        if expected_fingerprint is not None and doc.model_fingerprint != expected_fingerprint:
            logger.warning(
                "calibration_fingerprint_mismatch",
                found=doc.model_fingerprint[:12],
                expected=expected_fingerprint[:12],
            )
            raise FingerprintMismatchError(
                "calibration was built for a different model or world",
                found=doc.model_fingerprint,
                expected=expected_fingerprint,
            )
        vectors = {
            (v.layer, v.head): CalibrationVector(np.asarray(v.entries), v.mode) for v in doc.vectors
        }
        heads = {head for _, head in vectors}
        return cls(
            vectors=vectors,
            layer_range=tuple(doc.layer_range),  # type: ignore[arg-type]
            beta=doc.beta,
            reference=doc.reference,
            model_fingerprint=doc.model_fingerprint,
            num_heads=len(heads),
            floor_hits=doc.floor_hits,
        )


class VTCService:
    """Service for visual-token calibration."""

    @staticmethod
    def capture_reference(
        decoder: ToyDecoder, ref: ReferenceSpec, vocab: ObjectVocabulary
    ) -> ReferenceCapture:
        """
        Capture the image-column attention of the reference input.

        The captured row is the last query row, or the mean over the trailing
        row_window rows. Entries below 1e-12 are floored and counted.

        Args:
            decoder: Decoder to calibrate (run without hooks)
            ref: Reference image kind, query and row window
            vocab: World vocabulary

        Returns:
            ReferenceCapture with one row per (layer, head)
        """
        n_img = decoder.cfg.image_slots
        seq = WorldService.reference_sequence(ref, vocab, n_img)
        result = decoder.forward_full(seq)
        window = ref.row_window

        rows: Dict[HeadKey, np.ndarray] = {}
        floor_hits = 0
        for layer in range(decoder.cfg.num_layers):
            for head in range(decoder.cfg.num_heads):
                segment = result.attention[layer, head, -window:, :n_img].mean(axis=0)
                below = segment < CAPTURE_FLOOR
                if np.any(below):
                    hits = int(below.sum())
                    floor_hits += hits
                    logger.warning("capture_floor_clamped", layer=layer, head=head, entries=hits)
                    segment = np.maximum(segment, CAPTURE_FLOOR)
                rows[(layer, head)] = segment
                logger.debug(
                    "reference_captured",
                    layer=layer,
                    head=head,
                    image_mass=float(segment.sum()),
                )

        return ReferenceCapture(reference=ref, rows=rows, floor_hits=floor_hits)

    @staticmethod
    def build_calibration_vector(v_ref: np.ndarray, mode: Normalization) -> CalibrationVector:
        """
        Rescaled inverse of a captured reference row.

        Harmonic scales the inverse by sum(v) / sum(1/v); SumPreserving
        scales it by sum(v) / N_i so that sum(v * V_cal) = sum(v).

        Raises:
            DomainError: empty input or a nonpositive entry
        """
        v = np.asarray(v_ref, dtype=np.float64)
        if v.ndim != 1 or v.size == 0:
            raise DomainError("reference row must be a non-empty vector")
        if not np.all(np.isfinite(v)) or np.any(v <= 0.0):
            raise DomainError("reference row entries must be strictly positive")

        inverse = 1.0 / v
        if mode is Normalization.HARMONIC:
            scale = v.sum() / inverse.sum()
        else:
            scale = v.sum() / v.size
        return CalibrationVector(entries=scale * inverse, normalization=mode)

    @staticmethod
    def apply_vtc(v: np.ndarray, cal: CalibrationVector, beta: float) -> SmoothedRow:
        """
        Blend a row with its calibrated version: V_s = (1 - beta) V + beta (V * V_cal).

        Raises:
            DomainError: length mismatch or beta outside [0, 1]
        """
        v = np.asarray(v, dtype=np.float64)
        if v.shape != cal.entries.shape:
            raise DomainError("row length does not match calibration", row=v.size, cal=len(cal))
        if not 0.0 <= beta <= 1.0:
            raise DomainError("beta must lie in [0, 1]", beta=beta)

        calibrated = v * cal.entries
        if beta == 0.0:
            smoothed = v
        elif beta == 1.0:
            smoothed = calibrated
        else:
            smoothed = (1.0 - beta) * v + beta * calibrated
        return SmoothedRow(original=v, calibrated=calibrated, smoothed=smoothed)

    @staticmethod
    def build_calibration_set(
        decoder: ToyDecoder,
        ref: ReferenceSpec,
        vocab: ObjectVocabulary,
        beta: float,
        layer_range: LayerRange,
        mode: Normalization,
        model_fingerprint: str,
    ) -> Tuple[CalibrationSet, ReferenceCapture]:
        """
        Capture the reference and build one vector per (layer, head) in range.

        Returns:
            The calibration set and the capture it was built from
        """
        capture = VTCService.capture_reference(decoder, ref, vocab)
        start, end = layer_range
        vectors = {
            (layer, head): VTCService.build_calibration_vector(capture.rows[(layer, head)], mode)
            for layer in range(start, end)
            for head in range(decoder.cfg.num_heads)
        }
        cal_set = CalibrationSet(
            vectors=vectors,
            layer_range=layer_range,
            beta=beta,
            reference=ref,
            model_fingerprint=model_fingerprint,
            num_heads=decoder.cfg.num_heads,
            floor_hits=capture.floor_hits,
        )
        logger.info(
            "calibration_built",
            kind=ref.image_kind.value,
            layers=list(layer_range),
            mode=mode.value,
            beta=beta,
            floor_hits=capture.floor_hits,
        )
        return cal_set, capture

    @staticmethod
    def make_hook(cal_set: CalibrationSet) -> AttentionHook:
        """Post-softmax hook applying the calibration set to the last row."""

        def calibrate(layer: int, head: int, segment: np.ndarray) -> np.ndarray:
            if cal_set.beta == 0.0:
                return segment
            return VTCService.apply_vtc(segment, cal_set.vector(layer, head), cal_set.beta).smoothed

        return AttentionHook(
            name="vtc",
            stage=HookStage.POST_SOFTMAX,
            transform=calibrate,
            layer_range=cal_set.layer_range,
        )

    @staticmethod
    def flattening_diagnostics(
        cal_set: CalibrationSet, capture: ReferenceCapture
    ) -> List[FlatteningDiagnostic]:
        """Check that every vector flattens the reference row it was built from."""
        diagnostics = []
        for (layer, head), vec in sorted(cal_set.vectors.items()):
            v_ref = capture.rows[(layer, head)]
            product = v_ref * vec.entries
            spread = float((product.max() - product.min()) / product.mean())
            passed = spread < FLATNESS_TOLERANCE
            if vec.normalization is Normalization.SUM_PRESERVING:
                passed = passed and abs(product.sum() - v_ref.sum()) <= SUM_TOLERANCE
            diagnostics.append(
                FlatteningDiagnostic(
                    layer=layer,
                    head=head,
                    relative_spread=spread,
                    product_sum=float(product.sum()),
                    reference_sum=float(v_ref.sum()),
                    passed=passed,
                )
            )
        return diagnostics

    @staticmethod
    def compare_kinds(
        decoder: ToyDecoder,
        vocab: ObjectVocabulary,
        ref: ReferenceSpec,
        layer_range: LayerRange,
        mode: Normalization,
    ) -> List[KindComparison]:
        """
        Build calibrations from every reference image kind and compare them.

        Returns:
            One comparison per kind pair with the max symmetric relative difference
        """
        sets = {}
        for kind in ImageKind:
            kind_ref = ref.model_copy(update={"image_kind": kind})
            cal_set, _ = VTCService.build_calibration_set(
                decoder, kind_ref, vocab, 1.0, layer_range, mode, model_fingerprint=""
            )
            sets[kind] = cal_set

        comparisons = []
        for kind_a, kind_b in itertools.combinations(ImageKind, 2):
            worst, worst_key = 0.0, None
            for key, vec_a in sorted(sets[kind_a].vectors.items()):
                a = vec_a.entries
                b = sets[kind_b].vectors[key].entries
                diff = float(np.max(np.abs(a - b) / ((a + b) / 2.0)))
                if worst_key is None or diff > worst:
                    worst, worst_key = diff, key
            comparisons.append(
                KindComparison(
                    kind_a=kind_a.value,
                    kind_b=kind_b.value,
                    max_relative_difference=worst,
                    worst_layer=worst_key[0] if worst_key else None,
                    worst_head=worst_key[1] if worst_key else None,
                )
            )
        return comparisons
