import csv
import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from ._codec import dumps
from ._dataset import Attribute, SequenceAnnotation, read_boxes, write_boxes
from ._errors import ValidationFailure
from ._geometry import (
    BoundingBox,
    boxes_to_array,
    center_distance_array,
    iou_array,
    normalized_center_distance_array,
)

logger = logging.getLogger(__name__)

SUCCESS_THRESHOLDS = np.arange(21) / 20
"""IoU thresholds of the success curve: 0, 0.05, ..., 1."""

PRECISION_THRESHOLDS = np.arange(51, dtype=np.float64)
"""Center-error thresholds of the precision curve, in pixels: 0, 1, ..., 50."""

NORM_PRECISION_THRESHOLDS = np.arange(51) / 100
"""Normalized center-error thresholds: 0, 0.01, ..., 0.5."""

PRECISION_AT_PX = 20
"""The center-error threshold at which the precision score is reported."""


class EvaluationError(ValidationFailure):
    """Raised when tracker outputs do not line up with the annotations."""


class ReportFormat(StrEnum):
    TABULAR = "tabular"
    STRUCTURED = "structured"
    PLOTDATA = "plotdata"


@dataclass(frozen=True)
class TrackOutput:
    sequence_id: str
    boxes: list[BoundingBox]
    """One predicted box per frame."""


@dataclass(frozen=True)
class EmptySequence:
    """Marks a sequence without a single scorable frame; it is left out of aggregation."""

    sequence_id: str


@dataclass(frozen=True)
class SequenceMetrics:
    sequence_id: str
    valid_frames: int
    """Number of frames that are present and have a non-degenerate ground truth."""

    ao: float
    sr_050: float
    sr_075: float
    sr_auc: float
    pr: float
    npr: float
    success_curve: list[float]
    precision_curve: list[float]
    norm_precision_curve: list[float]


@dataclass(frozen=True)
class AttributeScores:
    pr: float
    npr: float
    sr_auc: float
    sequence_count: int


@dataclass(frozen=True)
class ReferenceRow:
    """A published result, in percent, shown next to the evaluated tracker."""

    name: str
    pr: float
    npr: float
    sr: float


@dataclass(frozen=True)
class EvalReport:
    pr: float
    npr: float
    sr_auc: float
    ao: float
    sr_050: float
    sr_075: float
    precision_curve: list[float]
    norm_precision_curve: list[float]
    success_curve: list[float]
    per_attribute: dict[Attribute, AttributeScores | None]
    """``None`` for attributes that no evaluated sequence carries."""

    sequence_count: int
    empty_sequences: list[str] = field(default_factory=list)
    references: list[ReferenceRow] = field(default_factory=list)


def _curve(
    values: NDArray[np.float64], thresholds: NDArray[np.float64], *, strict: bool
) -> list[float]:
    if strict:
        hits = values[np.newaxis, :] > thresholds[:, np.newaxis]
    else:
        hits = values[np.newaxis, :] <= thresholds[:, np.newaxis]
    return [float(value) for value in hits.mean(axis=1)]


def evaluate_sequence(
    gt: SequenceAnnotation, out: TrackOutput
) -> SequenceMetrics | EmptySequence:
    """
    Scores one sequence under one-pass evaluation.

    Frames flagged absent and frames whose ground truth has no area are skipped.
    Success counts frames with IoU strictly above each threshold;
    precision counts frames with a center error at or below each threshold.
    """
    if out.sequence_id != gt.sequence_id:
        raise EvaluationError(f"Output for {out.sequence_id!r} compared with {gt.sequence_id!r}")
    if len(out.boxes) != gt.frame_count:
        raise EvaluationError(
            f"{gt.sequence_id}: expected {gt.frame_count} boxes, got {len(out.boxes)}"
        )

    gt_array = boxes_to_array(gt.gt_boxes)
    present = ~np.asarray(gt.absent, dtype=bool)
    scorable = present & (gt_array[:, 2] > 0) & (gt_array[:, 3] > 0)
    degenerate = int(np.count_nonzero(present & ~scorable))
    if degenerate:
        logger.debug(
            "%s: skipping %d frames with a degenerate ground truth", gt.sequence_id, degenerate
        )

    if not scorable.any():
        logger.warning("%s: no scorable frames, excluded from aggregation", gt.sequence_id)
        return EmptySequence(gt.sequence_id)

    gt_valid = gt_array[scorable]
    pred_valid = boxes_to_array(out.boxes)[scorable]

    ious = iou_array(pred_valid, gt_valid)
    errors = center_distance_array(pred_valid, gt_valid)
    norm_errors = normalized_center_distance_array(pred_valid, gt_valid)

    success_curve = _curve(ious, SUCCESS_THRESHOLDS, strict=True)
    precision_curve = _curve(errors, PRECISION_THRESHOLDS, strict=False)
    norm_precision_curve = _curve(norm_errors, NORM_PRECISION_THRESHOLDS, strict=False)

    return SequenceMetrics(
        sequence_id=gt.sequence_id,
        valid_frames=int(np.count_nonzero(scorable)),
        ao=float(ious.mean()),
        sr_050=float(np.mean(ious > 0.5)),
        sr_075=float(np.mean(ious > 0.75)),
        sr_auc=float(np.mean(success_curve)),
        pr=precision_curve[PRECISION_AT_PX],
        npr=float(np.mean(norm_precision_curve)),
        success_curve=success_curve,
        precision_curve=precision_curve,
        norm_precision_curve=norm_precision_curve,
    )


def _mean(values: Iterable[float]) -> float:
    return float(np.mean(list(values)))


def _mean_curve(curves: Iterable[list[float]]) -> list[float]:
    return [float(value) for value in np.mean(np.array(list(curves)), axis=0)]


def aggregate(
    records: Sequence[SequenceMetrics | EmptySequence],
    annotations: Sequence[SequenceAnnotation],
    references: Sequence[ReferenceRow] = (),
) -> EvalReport:
    """
    Averages per-sequence metrics with equal weight per sequence.
    Per-attribute scores average only the sequences carrying that attribute.
    """
    by_id = {annotation.sequence_id: annotation for annotation in annotations}
    unknown = sorted(record.sequence_id for record in records if record.sequence_id not in by_id)
    if unknown:
        raise EvaluationError(f"No annotations for sequences: {', '.join(unknown)}")

    # Sorted by id, the sums do not depend on the input order
    scored = sorted(
        (record for record in records if isinstance(record, SequenceMetrics)),
        key=lambda record: record.sequence_id,
    )
    empty = sorted(record.sequence_id for record in records if isinstance(record, EmptySequence))
    if not scored:
        raise EvaluationError("None of the sequences has a scorable frame")

    per_attribute: dict[Attribute, AttributeScores | None] = {}
    for attribute in Attribute:
        members = [r for r in scored if by_id[r.sequence_id].has_attribute(attribute)]
        per_attribute[attribute] = (
            AttributeScores(
                pr=_mean(r.pr for r in members),
                npr=_mean(r.npr for r in members),
                sr_auc=_mean(r.sr_auc for r in members),
                sequence_count=len(members),
            )
            if members
            else None
        )

    return EvalReport(
        pr=_mean(r.pr for r in scored),
        npr=_mean(r.npr for r in scored),
        sr_auc=_mean(r.sr_auc for r in scored),
        ao=_mean(r.ao for r in scored),
        sr_050=_mean(r.sr_050 for r in scored),
        sr_075=_mean(r.sr_075 for r in scored),
        precision_curve=_mean_curve(r.precision_curve for r in scored),
        norm_precision_curve=_mean_curve(r.norm_precision_curve for r in scored),
        success_curve=_mean_curve(r.success_curve for r in scored),
        per_attribute=per_attribute,
        sequence_count=len(scored),
        empty_sequences=empty,
        references=list(references),
    )


def evaluate(
    annotations: Sequence[SequenceAnnotation],
    outputs: Mapping[str, TrackOutput],
    references: Sequence[ReferenceRow] = (),
) -> EvalReport:
    """Evaluates every annotated sequence; all of them must have an output."""
    missing = [a.sequence_id for a in annotations if a.sequence_id not in outputs]
    if missing:
        raise EvaluationError(f"Missing tracker outputs for: {', '.join(missing)}")

    records = []
    mismatched = []
    for annotation in annotations:
        try:
            records.append(evaluate_sequence(annotation, outputs[annotation.sequence_id]))
        except EvaluationError:
            mismatched.append(annotation.sequence_id)
    if mismatched:
        raise EvaluationError(f"Frame counts do not match for: {', '.join(mismatched)}")

    return aggregate(records, annotations, references)


def read_track_outputs(directory: Path, sequence_ids: Iterable[str]) -> dict[str, TrackOutput]:
    """
    Reads ``<sequence_id>.txt`` files with one ``x,y,w,h`` line per frame.
    Sequences without a file are reported together.
    """
    sequence_ids = list(sequence_ids)
    missing = [sid for sid in sequence_ids if not (directory / f"{sid}.txt").is_file()]
    if missing:
        raise EvaluationError(f"Missing tracker outputs for: {', '.join(missing)}")
    return {
        sid: TrackOutput(sid, read_boxes(directory / f"{sid}.txt")) for sid in sequence_ids
    }


def write_track_output(directory: Path, output: TrackOutput) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{output.sequence_id}.txt"
    write_boxes(path, output.boxes)
    return path


def parse_reference_rows(text: str) -> list[ReferenceRow]:
    """
    Parses published results given as ``name & PR & NPR & SR`` (table source) or
    ``name,PR,NPR,SR`` lines. Blank lines and lines starting with ``#`` are skipped.
    """
    rows = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip().removesuffix("\\\\").strip()
        if not stripped or stripped.startswith("#"):
            continue
        separator = "&" if "&" in stripped else ","
        cells = [cell.strip() for cell in stripped.split(separator)]
        if len(cells) != 4:
            raise ValidationFailure(f"Reference line {line_no}: expected 4 cells, got {len(cells)}")
        name, *numbers = cells
        try:
            pr, npr, sr = (float(number) for number in numbers)
        except ValueError as exc:
            raise ValidationFailure(f"Reference line {line_no}: {exc}") from exc
        rows.append(ReferenceRow(name, pr, npr, sr))
    return rows


def _percent(value: float) -> str:
    return f"{value * 100:.1f}"


def format_table(report: EvalReport, tracker_name: str = "evaluated") -> str:
    width = max([len(tracker_name), *(len(row.name) for row in report.references), 7])
    lines = [
        f"{'tracker':<{width}}  {'PR':>5}  {'NPR':>5}  {'SR':>5}  "
        f"{'AO':>5}  {'SR50':>5}  {'SR75':>5}",
        f"{tracker_name:<{width}}  {_percent(report.pr):>5}  {_percent(report.npr):>5}  "
        f"{_percent(report.sr_auc):>5}  {_percent(report.ao):>5}  "
        f"{_percent(report.sr_050):>5}  {_percent(report.sr_075):>5}",
    ]
    lines.extend(
        f"{row.name:<{width}}  {row.pr:>5.1f}  {row.npr:>5.1f}  {row.sr:>5.1f}"
        for row in report.references
    )

    lines += ["", f"{'attribute':<9}  {'PR':>5}  {'NPR':>5}  {'SR':>5}  {'count':>5}"]
    for attribute, scores in report.per_attribute.items():
        if scores is None:
            lines.append(f"{attribute.value:<9}  {'-':>5}  {'-':>5}  {'-':>5}  {0:>5}")
        else:
            lines.append(
                f"{attribute.value:<9}  {_percent(scores.pr):>5}  {_percent(scores.npr):>5}  "
                f"{_percent(scores.sr_auc):>5}  {scores.sequence_count:>5}"
            )

    lines += ["", f"sequences: {report.sequence_count}"]
    if report.empty_sequences:
        lines.append(f"without scorable frames: {', '.join(report.empty_sequences)}")
    return "\n".join(lines) + "\n"


def _write_curve(
    path: Path, header: str, thresholds: NDArray[np.float64], values: list[float]
) -> None:
    with path.open("w", encoding="utf-8", newline="") as stream:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow([header, "value"])
        writer.writerows(zip(thresholds.tolist(), values, strict=True))


def emit_report(report: EvalReport, report_format: ReportFormat, out_dir: Path) -> list[Path]:
    """Writes the report in the given format into ``out_dir`` and returns the written files."""
    out_dir.mkdir(parents=True, exist_ok=True)

    if report_format == ReportFormat.TABULAR:
        path = out_dir / "report.txt"
        path.write_text(format_table(report), encoding="utf-8")
        return [path]

    if report_format == ReportFormat.STRUCTURED:
        path = out_dir / "report.json"
        path.write_text(dumps(EvalReport, report), encoding="utf-8")
        return [path]

    curves = [
        ("success.csv", "iou_threshold", SUCCESS_THRESHOLDS, report.success_curve),
        ("precision.csv", "pixel_threshold", PRECISION_THRESHOLDS, report.precision_curve),
        (
            "norm_precision.csv",
            "normalized_threshold",
            NORM_PRECISION_THRESHOLDS,
            report.norm_precision_curve,
        ),
    ]
    paths = []
    for name, header, thresholds, values in curves:
        path = out_dir / name
        _write_curve(path, header, thresholds, values)
        paths.append(path)
    return paths
