import re
from dataclasses import dataclass
from enum import IntEnum, StrEnum
from itertools import pairwise

TAGS = ("think", "d", "answer")
"""Tag names of a reply, in their required order."""

_MARKER = re.compile(r"<(/?)(think|d|answer)>")


class Decision(StrEnum):
    """The content of the ``<d>`` span: whether the description should be replaced."""

    YES = "yes"
    NO = "no"
    INVALID = "invalid"


class FormatLevel(IntEnum):
    """How well-formed a reply is; each level implies the previous one."""

    MALFORMED = 0
    """At least one of the opening identifiers is missing."""

    IDENTIFIERS = 1
    """All three opening identifiers ``<think>``, ``<d>``, ``<answer>`` occur."""

    ORDERED = 2
    """
    Three closed, disjoint spans in the order think, d, answer,
    with ``<d>`` holding only ``yes`` or ``no``.
    """


@dataclass(frozen=True)
class CoTResponse:
    raw: str
    """The reply exactly as received."""

    think: str
    decision: Decision
    answer: str
    level: FormatLevel

    def is_update(self) -> bool:
        """Returns ``True`` if the reply is fully well-formed and asks for an update."""
        return self.level == FormatLevel.ORDERED and self.decision == Decision.YES


@dataclass(frozen=True)
class _Span:
    start: int  # position of the opening marker
    content_start: int
    content_end: int
    end: int  # position right after the closing marker


def _first_spans(markers: list[re.Match[str]]) -> dict[str, _Span]:
    # The first opening marker of a tag paired with the first closing marker after it.
    # A later opening marker cannot pair if the first one does not.
    spans: dict[str, _Span] = {}
    openings: dict[str, re.Match[str]] = {}
    for marker in markers:
        closing, tag = marker.group(1), marker.group(2)
        if tag in spans:
            continue
        if not closing:
            openings.setdefault(tag, marker)
        elif tag in openings:
            opening = openings[tag]
            spans[tag] = _Span(opening.start(), opening.end(), marker.start(), marker.end())
    return spans


def _decode_raw(raw: str | bytes) -> str:
    if isinstance(raw, bytes):
        # `surrogateescape` keeps arbitrary bytes recoverable via `.encode(..., "surrogateescape")`
        return raw.decode("utf-8", errors="surrogateescape")
    return raw


def parse(raw: str | bytes) -> CoTResponse:
    """
    Parses a tagged reply of the form ``<think>…</think><d>…</d><answer>…</answer>``.

    Never raises: malformed input yields :py:attr:`FormatLevel.MALFORMED`
    with whatever could be extracted (empty fields for free text).
    The decision is :py:attr:`Decision.INVALID` unless the reply is fully well-formed.
    """
    text = _decode_raw(raw)
    markers = list(_MARKER.finditer(text))

    opened = {marker.group(2) for marker in markers if not marker.group(1)}
    spans = _first_spans(markers)

    def content(tag: str) -> str:
        span = spans.get(tag)
        return text[span.content_start : span.content_end].strip() if span else ""

    think, d_content, answer = content("think"), content("d"), content("answer")

    level = FormatLevel.MALFORMED
    if opened.issuperset(TAGS):
        level = FormatLevel.IDENTIFIERS
        if _is_ordered(text, spans) and d_content.lower() in (Decision.YES, Decision.NO):
            level = FormatLevel.ORDERED

    decision = Decision(d_content.lower()) if level == FormatLevel.ORDERED else Decision.INVALID

    return CoTResponse(raw=text, think=think, decision=decision, answer=answer, level=level)


def _is_ordered(text: str, spans: dict[str, _Span]) -> bool:
    if not all(tag in spans for tag in TAGS):
        return False

    ordered = [spans[tag] for tag in TAGS]
    for current, following in pairwise(ordered):
        if current.end > following.start:
            return False

    # Spans must not contain other markers (nested or interleaved tags).
    return not any(_MARKER.search(text, span.content_start, span.content_end) for span in ordered)


def render(response: CoTResponse) -> str:
    """Reassembles a reply in the canonical tag order."""
    return (
        f"<think>{response.think}</think>"
        f"<d>{response.decision.value}</d>"
        f"<answer>{response.answer}</answer>"
    )


def format_rewards(response: CoTResponse) -> tuple[int, int]:
    """
    Returns the two format rewards: the first for the presence of the three identifiers,
    the second for the full, ordered structure.
    """
    return (
        int(response.level >= FormatLevel.IDENTIFIERS),
        int(response.level == FormatLevel.ORDERED),
    )
