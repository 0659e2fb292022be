import math
from collections.abc import Sequence
from dataclasses import dataclass, replace
from enum import StrEnum

import numpy as np
from numpy.typing import NDArray

from ._errors import InvalidArgument, ValidationFailure
from ._rewards import RewardBreakdown

DEFAULT_GROUP_SIZE = 5
"""Number of replies sampled per question."""

ZERO_SPREAD = 1e-12
"""Groups whose reward standard deviation is below this get all-zero advantages."""

_DISTRIBUTION_TOLERANCE = 1e-9


class GroupTooSmall(ValidationFailure):
    """Raised when a group has fewer than two rewards."""


class SupportMismatch(ValidationFailure):
    """Raised when the reference distribution has no mass where the policy has some."""


class MissingDistribution(ValidationFailure):
    """Raised when the exact KL term is requested for steps without full distributions."""


class KLMode(StrEnum):
    EXACT = "exact"
    SAMPLED = "sampled"


def group_advantages(rewards: Sequence[float]) -> list[float]:
    """
    Standardizes the rewards of one group: subtracts the mean and divides by the
    population (divide-by-n) standard deviation. A group with no spread yields zeros.
    """
    if len(rewards) < 2:
        raise GroupTooSmall(f"A group needs at least 2 rewards, got {len(rewards)}")

    values = np.asarray(rewards, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise InvalidArgument("Rewards must be finite")

    spread = values.std()
    if spread < ZERO_SPREAD:
        return [0.0] * len(values)
    return [float(value) for value in (values - values.mean()) / spread]


@dataclass(frozen=True)
class SampleGroup:
    """The rewards of the replies sampled for one question, and their advantages."""

    question_id: str
    rewards: list[float]
    advantages: list[float] | None = None

    @classmethod
    def from_rewards(cls, question_id: str, rewards: Sequence[float]) -> "SampleGroup":
        return cls(question_id, [float(reward) for reward in rewards]).normalized()

    def normalized(self) -> "SampleGroup":
        return replace(self, advantages=group_advantages(self.rewards))


def normalize_groups(groups: Sequence[SampleGroup]) -> list[SampleGroup]:
    """
    Fills in the advantages of every group. Groups are independent:
    one group's rewards never affect another group's advantages.
    """
    return [group.normalized() for group in groups]


def score_group(question_id: str, breakdowns: Sequence[RewardBreakdown]) -> SampleGroup:
    """Builds a normalized group from the scored replies to one question."""
    return SampleGroup(question_id, [b.overall for b in breakdowns]).normalized()


def _check_distribution(name: str, dist: Sequence[float]) -> NDArray[np.float64]:
    values = np.asarray(dist, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise InvalidArgument(f"`{name}` must be a non-empty list of probabilities")
    if not np.all(np.isfinite(values)) or np.any(values < 0):
        raise InvalidArgument(f"`{name}` must hold finite non-negative probabilities")
    if abs(values.sum() - 1) > _DISTRIBUTION_TOLERANCE:
        raise InvalidArgument(f"`{name}` must sum to 1, got {values.sum()}")
    return values


@dataclass(frozen=True)
class PolicyStep:
    """
    Recorded log-probabilities of one emitted token under the current, the sampling-time
    and the base policies, optionally with the full distributions over a vocabulary slice.
    """

    logprob_current: float
    logprob_old: float
    logprob_base: float
    dist_current: list[float] | None = None
    dist_base: list[float] | None = None

    def __post_init__(self) -> None:
        for name in ("logprob_current", "logprob_old", "logprob_base"):
            value = getattr(self, name)
            if not math.isfinite(value) or value > 0:
                raise InvalidArgument(f"`{name}` must be finite and non-positive, got {value}")
        if self.dist_current is not None:
            _check_distribution("dist_current", self.dist_current)
        if self.dist_base is not None:
            _check_distribution("dist_base", self.dist_base)

    def has_distributions(self) -> bool:
        return self.dist_current is not None and self.dist_base is not None


def kl_categorical(p: Sequence[float], q: Sequence[float]) -> float:
    """Returns ``KL(p || q) = sum p_i ln(p_i / q_i)``, with ``0 ln(0 / q) = 0``."""
    p_values = _check_distribution("p", p)
    q_values = _check_distribution("q", q)
    if p_values.shape != q_values.shape:
        raise InvalidArgument(
            f"Distributions differ in length: {p_values.size} and {q_values.size}"
        )

    support = p_values > 0
    if np.any(q_values[support] == 0):
        raise SupportMismatch("`q` has zero mass where `p` is positive")

    p_support, q_support = p_values[support], q_values[support]
    # Rounding can push a sum of tiny negative terms below zero.
    return max(0.0, float(np.sum(p_support * np.log(p_support / q_support))))


def kl_sampled_estimate(step: PolicyStep) -> float:
    """
    Returns the sampled KL surrogate ``exp(d) - d - 1`` with
    ``d = logprob_base - logprob_current``; it is non-negative and zero only for ``d = 0``.
    """
    delta = step.logprob_base - step.logprob_current
    if not math.isfinite(delta):
        raise InvalidArgument("Log-probabilities must be finite")
    return max(0.0, math.expm1(delta) - delta)


def objective_value(
    steps: Sequence[PolicyStep], advantage: float, beta: float, kl_mode: KLMode
) -> float:
    """
    Evaluates the policy objective: the mean over steps of the probability ratio
    times the advantage, minus ``beta`` times the KL term. No ratio clipping is applied.
    """
    if not steps:
        raise InvalidArgument("At least one step is required")
    if not math.isfinite(beta) or beta < 0:
        raise InvalidArgument(f"`beta` must be finite and non-negative, got {beta}")
    if not math.isfinite(advantage):
        raise InvalidArgument(f"`advantage` must be finite, got {advantage}")

    terms = []
    for index, step in enumerate(steps):
        if kl_mode == KLMode.EXACT:
            if step.dist_current is None or step.dist_base is None:
                raise MissingDistribution(f"Step {index} has no full distributions")
            kl = kl_categorical(step.dist_current, step.dist_base)
        else:
            kl = kl_sampled_estimate(step)
        ratio = math.exp(step.logprob_current - step.logprob_old)
        terms.append(ratio * advantage - beta * kl)

    return float(np.mean(terms))
