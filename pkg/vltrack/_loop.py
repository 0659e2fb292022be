import logging
import math
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import StrEnum
from typing import Protocol

import numpy as np

from ._dataset import FrameRef, SequenceAnnotation
from ._errors import EndpointFailure, InvalidArgument
from ._geometry import BoundingBox, iou
from ._metrics import EvalReport, TrackOutput, evaluate
from ._response import CoTResponse, Decision, FormatLevel, format_rewards
from ._rewards import RewardWeights

logger = logging.getLogger(__name__)

DEFAULT_UPDATE_INTERVAL = 100

UPDATE_INTERVAL_GRID = (50, 100, 300, 500, 1000)
"""Update intervals compared in the interval ablation."""

LANGUAGE_SEPARATOR = "; "
"""Joins the dynamic and the static description under :py:attr:`Strategy.DYNAMIC_STATIC`."""


class TrackerFailure(EndpointFailure):
    """Raised by a tracker that cannot produce a box for a frame."""


class Strategy(StrEnum):
    STATIC = "static"
    """The initial description is used throughout; the refiner is never called."""

    DYNAMIC1 = "dynamic1"
    """The refiner always sees the initial description."""

    DYNAMIC2 = "dynamic2"
    """The refiner sees the current dynamic description, so updates cascade."""

    DYNAMIC_STATIC = "dynamic_static"
    """As ``dynamic1``, but the tracker gets the dynamic and the initial description joined."""


class TemplatePolicy(StrEnum):
    INITIAL_ONLY = "initial_only"
    INITIAL_PLUS_RECENT = "initial_plus_recent"


class AnchorPolicy(StrEnum):
    """When the anchor frame (the refiner's reference frame) moves forward."""

    ACCEPTED = "accepted"
    """Only when an update is accepted."""

    EVERY_CALL = "every_call"
    """After every successful refiner call, whatever the decision."""


@dataclass(frozen=True)
class LoopConfig:
    update_interval: int = DEFAULT_UPDATE_INTERVAL
    strategy: Strategy = Strategy.DYNAMIC1
    template_policy: TemplatePolicy = TemplatePolicy.INITIAL_PLUS_RECENT
    gate_threshold: float = 1.0
    """Tracker confidence below which the refiner may be called; 1 or more keeps the gate open."""

    anchor_policy: AnchorPolicy = AnchorPolicy.ACCEPTED
    weights: RewardWeights = field(default_factory=RewardWeights)
    """Used to score the format of every refiner reply in the event log."""

    def __post_init__(self) -> None:
        if self.update_interval < 1:
            raise InvalidArgument(
                f"`update_interval` must be at least 1, got {self.update_interval}"
            )
        if not (math.isfinite(self.gate_threshold) and self.gate_threshold >= 0):
            raise InvalidArgument(
                f"`gate_threshold` must be non-negative, got {self.gate_threshold}"
            )


@dataclass(frozen=True)
class TrackResult:
    box: BoundingBox
    confidence: float


@dataclass(frozen=True)
class UpdateEvent:
    frame_index: int
    """1-based index of the frame at which the refiner was called."""

    previous_anchor_frame: int
    decision: Decision
    old_language: str
    new_language: str
    think: str
    level: FormatLevel = FormatLevel.MALFORMED
    format_score: float = 0.0
    accepted: bool = False
    error: str | None = None
    """Set when the refiner call failed."""


class TrackerPort(Protocol):
    def initialize(self, frame: FrameRef, box: BoundingBox, language: str) -> None: ...

    def track(
        self, templates: Sequence[FrameRef], search: FrameRef, language: str
    ) -> TrackResult: ...


class RefinerPort(Protocol):
    def refine(self, template: FrameRef, search: FrameRef, language: str) -> CoTResponse: ...


class OracleTracker:
    """
    A stand-in tracker that returns the ground truth, each coordinate moved by
    uniform noise in ``[-noise_px, noise_px]``. The confidence is the IoU with the ground truth.
    """

    def __init__(self, gt_boxes: Sequence[BoundingBox], noise_px: float = 0.0, seed: int = 0):
        if noise_px < 0:
            raise InvalidArgument(f"`noise_px` must be non-negative, got {noise_px}")
        self._gt_boxes = list(gt_boxes)
        self._noise_px = noise_px
        self._seed = seed
        self._rng = np.random.default_rng(seed)

    def initialize(self, frame: FrameRef, box: BoundingBox, language: str) -> None:  # noqa: ARG002
        self._rng = np.random.default_rng(self._seed)

    def track(
        self,
        templates: Sequence[FrameRef],  # noqa: ARG002
        search: FrameRef,
        language: str,  # noqa: ARG002
    ) -> TrackResult:
        if not 0 <= search.index < len(self._gt_boxes):
            raise TrackerFailure(f"No ground truth for frame {search.index}")
        gt = self._gt_boxes[search.index]
        dx, dy, dw, dh = self._rng.uniform(-self._noise_px, self._noise_px, size=4)
        box = BoundingBox(gt.x + dx, gt.y + dy, max(0.0, gt.w + dw), max(0.0, gt.h + dh))
        return TrackResult(box, iou(box, gt))


def preliminary_gate(confidence_history: Sequence[float], threshold: float) -> bool:
    """
    Decides whether a refiner call is worthwhile: ``True`` if the latest tracker confidence
    is below ``threshold``. A threshold of 1 or more always lets the call through.
    """
    if not confidence_history:
        raise InvalidArgument("The confidence history is empty")
    if threshold >= 1.0:
        return True
    return confidence_history[-1] < threshold


@dataclass(frozen=True)
class RunResult:
    output: TrackOutput
    """Boxes for the frames tracked; shorter than the sequence if the run was aborted."""

    events: list[UpdateEvent]
    completed: bool
    final_language: str
    """The description the tracker would receive for the next frame."""

    refiner_calls: int
    failure: str | None = None


def _templates(
    frames: Sequence[FrameRef], t: int, anchor: int, policy: TemplatePolicy
) -> list[FrameRef]:
    initial = frames[0]
    if policy == TemplatePolicy.INITIAL_ONLY:
        return [initial, initial, initial]
    return [initial, frames[anchor - 1], frames[max(t - 2, 0)]]


def _tracker_language(dynamic: str, static: str, strategy: Strategy) -> str:
    if strategy == Strategy.DYNAMIC_STATIC:
        return f"{dynamic}{LANGUAGE_SEPARATOR}{static}"
    return dynamic


def _format_score(response: CoTResponse, weights: RewardWeights) -> float:
    format1, format2 = format_rewards(response)
    return weights.w_format1 * format1 + weights.w_format2 * format2


def run(
    frames: Sequence[FrameRef],
    initial_box: BoundingBox,
    initial_language: str,
    tracker: TrackerPort,
    refiner: RefinerPort | None,
    config: LoopConfig,
) -> RunResult:
    """
    Tracks a sequence frame by frame, refreshing the description every
    ``config.update_interval`` frames.

    At frame ``t`` (1-based) the tracker is queried first; then, if ``t`` is a multiple of
    the interval and the confidence gate is open, the refiner compares the anchor frame with
    frame ``t``. Only a fully well-formed reply deciding ``yes`` replaces the description,
    which takes effect from frame ``t + 1``. A failed refiner call leaves the description
    unchanged; a failed tracker call ends the run with the boxes obtained so far.
    """
    if not frames:
        raise InvalidArgument("A run needs at least one frame")
    if refiner is None and config.strategy != Strategy.STATIC:
        raise InvalidArgument(f"Strategy {config.strategy.value!r} needs a refiner")

    sequence_id = frames[0].sequence_id
    dynamic = initial_language
    anchor = 1
    boxes: list[BoundingBox] = []
    confidences: list[float] = []
    events: list[UpdateEvent] = []
    refiner_calls = 0

    try:
        tracker.initialize(frames[0], initial_box, initial_language)
    except TrackerFailure as exc:
        logger.error("%s: tracker failed to initialize: %s", sequence_id, exc)  # noqa: TRY400
        return RunResult(
            output=TrackOutput(sequence_id, []),
            events=[],
            completed=False,
            final_language=_tracker_language(dynamic, initial_language, config.strategy),
            refiner_calls=0,
            failure=f"initialize: {exc}",
        )

    for t, frame in enumerate(frames, start=1):
        language = _tracker_language(dynamic, initial_language, config.strategy)
        templates = _templates(frames, t, anchor, config.template_policy)
        try:
            result = tracker.track(templates, frame, language)
        except TrackerFailure as exc:
            logger.error("%s: tracker failed at frame %d: %s", sequence_id, t, exc)  # noqa: TRY400
            return RunResult(
                output=TrackOutput(sequence_id, boxes),
                events=events,
                completed=False,
                final_language=language,
                refiner_calls=refiner_calls,
                failure=f"frame {t}: {exc}",
            )
        boxes.append(result.box)
        confidences.append(result.confidence)

        if (
            refiner is None
            or config.strategy == Strategy.STATIC
            or t % config.update_interval != 0
        ):
            continue
        if not preliminary_gate(confidences, config.gate_threshold):
            logger.debug("%s: gate closed at frame %d", sequence_id, t)
            continue

        query = dynamic if config.strategy == Strategy.DYNAMIC2 else initial_language
        refiner_calls += 1
        try:
            response = refiner.refine(frames[anchor - 1], frame, query)
        except EndpointFailure as exc:
            logger.warning("%s: refiner failed at frame %d: %s", sequence_id, t, exc)
            events.append(
                UpdateEvent(
                    frame_index=t,
                    previous_anchor_frame=anchor,
                    decision=Decision.INVALID,
                    old_language=dynamic,
                    new_language=dynamic,
                    think="",
                    error=str(exc),
                )
            )
            continue

        accepted = response.is_update() and bool(response.answer)
        new_language = dynamic
        if accepted:
            new_language = response.answer
            logger.info("%s: frame %d: description updated to %r", sequence_id, t, new_language)
        elif response.level == FormatLevel.IDENTIFIERS:
            logger.info("%s: frame %d: rejected a reply with disordered tags", sequence_id, t)

        event = UpdateEvent(
            frame_index=t,
            previous_anchor_frame=anchor,
            decision=response.decision,
            old_language=dynamic,
            new_language=new_language,
            think=response.think,
            level=response.level,
            format_score=_format_score(response, config.weights),
            accepted=accepted,
        )
        events.append(event)

        if config.anchor_policy == AnchorPolicy.EVERY_CALL or accepted:
            anchor = t
        dynamic = new_language

    return RunResult(
        output=TrackOutput(sequence_id, boxes),
        events=events,
        completed=True,
        final_language=_tracker_language(dynamic, initial_language, config.strategy),
        refiner_calls=refiner_calls,
    )


@dataclass(frozen=True)
class LoopJob:
    """Everything one run needs; jobs share nothing but the refiner."""

    frames: Sequence[FrameRef]
    initial_box: BoundingBox
    initial_language: str
    tracker: TrackerPort


def job_for(annotation: SequenceAnnotation, tracker: TrackerPort) -> LoopJob:
    return LoopJob(
        frames=annotation.frames(),
        initial_box=annotation.gt_boxes[0],
        initial_language=annotation.language,
        tracker=tracker,
    )


def run_many(
    jobs: Mapping[str, LoopJob],
    refiner: RefinerPort | None,
    config: LoopConfig,
    max_workers: int = 4,
) -> dict[str, RunResult]:
    """Runs several sequences concurrently; each run keeps its own state."""
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        futures = {
            key: executor.submit(
                run,
                job.frames,
                job.initial_box,
                job.initial_language,
                job.tracker,
                refiner,
                config,
            )
            for key, job in jobs.items()
        }
        return {key: future.result() for key, future in futures.items()}


@dataclass(frozen=True)
class SweepPoint:
    update_interval: int
    report: EvalReport
    refiner_calls: int


def sweep_intervals(
    annotations: Sequence[SequenceAnnotation],
    make_tracker: Callable[[SequenceAnnotation], TrackerPort],
    refiner: RefinerPort | None,
    config: LoopConfig,
    intervals: Sequence[int] = UPDATE_INTERVAL_GRID,
    max_workers: int = 4,
) -> list[SweepPoint]:
    """Tracks and evaluates the whole corpus once per update interval."""
    points = []
    for interval in intervals:
        interval_config = replace(config, update_interval=interval)
        jobs = {a.sequence_id: job_for(a, make_tracker(a)) for a in annotations}
        results = run_many(jobs, refiner, interval_config, max_workers=max_workers)

        aborted = sorted(key for key, result in results.items() if not result.completed)
        if aborted:
            raise TrackerFailure(f"u={interval}: runs aborted for {', '.join(aborted)}")

        report = evaluate(annotations, {key: result.output for key, result in results.items()})
        calls = sum(result.refiner_calls for result in results.values())
        logger.info("u=%d: sr_auc=%.4f, %d refiner calls", interval, report.sr_auc, calls)
        points.append(SweepPoint(interval, report, calls))
    return points
