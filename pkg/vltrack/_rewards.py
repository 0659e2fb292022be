import csv
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, replace
from enum import StrEnum
from pathlib import Path

import numpy as np

from ._errors import InvalidArgument
from ._geometry import BoundingBox, iou
from ._response import CoTResponse, Decision, format_rewards


DEFAULT_THETA = 0.61
"""The IoU threshold below which the IoU reward is zero."""


class RewardComponent(StrEnum):
    FORMAT1 = "format1"
    FORMAT2 = "format2"
    IOU = "iou"
    JUDGE = "judge"


@dataclass(frozen=True)
class RewardWeights:
    """
    Weights of the four reward components and the IoU reward threshold.

    The weights default to 1; they are a declared choice, not a measured one.
    """

    w_format1: float = 1.0
    w_format2: float = 1.0
    w_iou: float = 1.0
    w_judge: float = 1.0
    theta: float = DEFAULT_THETA

    def __post_init__(self) -> None:
        for name in ("w_format1", "w_format2", "w_iou", "w_judge"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise InvalidArgument(f"`{name}` must be finite and non-negative, got {value}")
        if not (0 <= self.theta <= 1):
            raise InvalidArgument(f"`theta` must lie in [0, 1], got {self.theta}")

    def scaled(self, factor: float) -> "RewardWeights":
        return replace(
            self,
            w_format1=self.w_format1 * factor,
            w_format2=self.w_format2 * factor,
            w_iou=self.w_iou * factor,
            w_judge=self.w_judge * factor,
        )

    def without(self, *components: RewardComponent) -> "RewardWeights":
        """Returns weights with the given components switched off (for reward ablations)."""
        return replace(self, **{f"w_{component.value}": 0.0 for component in components})


@dataclass(frozen=True)
class RewardBreakdown:
    format1: int
    format2: int
    iou_reward: float
    judge_reward: int
    overall: float


def _check_unit_interval(name: str, value: float) -> None:
    if not (math.isfinite(value) and 0 <= value <= 1):
        raise InvalidArgument(f"`{name}` must lie in [0, 1], got {value}")


def iou_reward(gt: BoundingBox, pred: BoundingBox, theta: float) -> float:
    """Returns the IoU of the two boxes if it is strictly above ``theta``, and 0 otherwise."""
    _check_unit_interval("theta", theta)
    overlap = iou(gt, pred)
    return overlap if overlap > theta else 0.0


def judge_reward(decision: Decision, iou1: float, iou2: float) -> int:
    """
    Rewards a correct update decision. ``iou1`` is the IoU obtained with the initial description,
    ``iou2`` the IoU obtained with the optimized one.
    """
    _check_unit_interval("iou1", iou1)
    _check_unit_interval("iou2", iou2)
    if decision == Decision.YES:
        return int(iou1 < iou2)
    if decision == Decision.NO:
        return int(iou1 >= iou2)
    return 0


def overall_reward(
    response: CoTResponse,
    gt: BoundingBox,
    pred_opt: BoundingBox,
    iou1: float,
    weights: RewardWeights,
) -> RewardBreakdown:
    """
    Scores one sampled reply.

    ``pred_opt`` is the tracker output obtained with the optimized description,
    ``iou1`` the IoU the tracker achieved with the initial one.
    """
    format1, format2 = format_rewards(response)
    iou_component = iou_reward(gt, pred_opt, weights.theta)
    judge_component = judge_reward(response.decision, iou1, iou(gt, pred_opt))
    overall = (
        weights.w_format1 * format1
        + weights.w_format2 * format2
        + weights.w_iou * iou_component
        + weights.w_judge * judge_component
    )
    return RewardBreakdown(
        format1=format1,
        format2=format2,
        iou_reward=iou_component,
        judge_reward=judge_component,
        overall=overall,
    )


@dataclass(frozen=True)
class RewardSummary:
    """Per-component means over a batch of scored replies."""

    count: int
    format1: float
    format2: float
    iou_reward: float
    judge_reward: float
    overall: float


def summarize(breakdowns: Sequence[RewardBreakdown]) -> RewardSummary:
    if not breakdowns:
        raise InvalidArgument("Cannot summarize an empty batch of rewards")
    table = np.array(
        [
            (b.format1, b.format2, b.iou_reward, b.judge_reward, b.overall)
            for b in breakdowns
        ],
        dtype=np.float64,
    )
    means = table.mean(axis=0)
    return RewardSummary(len(breakdowns), *(float(value) for value in means))


BREAKDOWN_COLUMNS = ("sample_id", "format1", "format2", "iou_reward", "judge_reward", "overall")


def write_breakdown_table(path: Path, rows: Iterable[tuple[str, RewardBreakdown]]) -> None:
    """Writes a tab-separated log with one scored sample per line."""
    with path.open("w", encoding="utf-8", newline="") as stream:
        writer = csv.writer(stream, delimiter="\t", lineterminator="\n")
        writer.writerow(BREAKDOWN_COLUMNS)
        for sample_id, b in rows:
            writer.writerow(
                (
                    sample_id,
                    b.format1,
                    b.format2,
                    repr(b.iou_reward),
                    b.judge_reward,
                    repr(b.overall),
                )
            )


def read_breakdown_table(path: Path) -> list[tuple[str, RewardBreakdown]]:
    with path.open(encoding="utf-8", newline="") as stream:
        reader = csv.DictReader(stream, delimiter="\t")
        if tuple(reader.fieldnames or ()) != BREAKDOWN_COLUMNS:
            raise InvalidArgument(f"{path}: unexpected columns {reader.fieldnames}")
        return [
            (
                row["sample_id"],
                RewardBreakdown(
                    format1=int(row["format1"]),
                    format2=int(row["format2"]),
                    iou_reward=float(row["iou_reward"]),
                    judge_reward=int(row["judge_reward"]),
                    overall=float(row["overall"]),
                ),
            )
            for row in reader
        ]
