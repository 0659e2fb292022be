import logging
import math
import re
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from ._codec import dump_jsonl, load_jsonl
from ._errors import ValidationFailure
from ._geometry import BoundingBox, InvalidGeometry
from ._response import FormatLevel, parse

logger = logging.getLogger(__name__)

GROUNDTRUTH_FILE = "groundtruth.txt"
ABSENT_FILE = "absent.txt"
LANGUAGE_FILE = "language.txt"
ATTRIBUTES_FILE = "attributes.txt"

FRAMES_DIR = "img"
"""Subdirectory of a sequence holding its frames, named ``00000001.jpg`` onwards."""

SFT_REFERENCE_COUNTS = {"GOT-10k": 197, "LaSOT": 200, "OTB99": 200, "TNL2K": 200, "TNLLT": 200}
"""Template-search pairs drawn per dataset for the reasoning corpus at full scale."""

RL_REFERENCE_COUNTS = {"GOT-10k": 1100, "LaSOT": 588, "OTB99": 1072, "TNL2K": 1118, "TNLLT": 1050}
"""Samples drawn per dataset for the reinforcement corpus at full scale."""

LENGTH_BUCKETS = ("<=1200", "1201-2000", "2001-4000", "4001-6000", ">6000")

_BUCKET_UPPER_BOUNDS = (1200, 2000, 4000, 6000)

_SEPARATORS = re.compile(r"[,\s]+")


class Attribute(StrEnum):
    """Sequence-level challenge attributes, in their on-disk order."""

    CM = "CM"
    """Camera motion."""
    ROT = "ROT"
    """Rotation."""
    DEF = "DEF"
    """Deformation."""
    FOC = "FOC"
    """Full occlusion."""
    IV = "IV"
    """Illumination variation."""
    OV = "OV"
    """Out of view."""
    POC = "POC"
    """Partial occlusion."""
    VC = "VC"
    """Viewpoint change."""
    SV = "SV"
    """Scale variation."""
    BC = "BC"
    """Background clutter."""
    MB = "MB"
    """Motion blur."""
    ARC = "ARC"
    """Aspect ratio change."""
    LR = "LR"
    """Low resolution."""
    FM = "FM"
    """Fast motion."""
    AS = "AS"
    """Adversarial samples."""


ATTRIBUTE_COUNT = len(Attribute)


class AnnotationLoadError(ValidationFailure):
    """Raised when an annotation file is missing or malformed."""

    def __init__(self, path: Path, message: str, line: int | None = None):
        location = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{location}: {message}")
        self.path = path
        self.line = line


class NotEnoughSamples(ValidationFailure):
    """Raised when a corpus has fewer eligible frame pairs than requested."""

    def __init__(self, requested: int, available: int):
        super().__init__(
            f"Requested {requested} pairs, but only {available} are eligible "
            f"(short by {requested - available})"
        )
        self.requested = requested
        self.available = available
        self.shortfall = requested - available


class InvalidReasoning(ValidationFailure):
    """Raised when a reasoning reply does not contain the three identifiers."""


@dataclass(frozen=True)
class FrameRef:
    """An opaque reference to one frame of a sequence; ``index`` is 0-based."""

    sequence_id: str
    index: int
    path: Path


@dataclass(frozen=True)
class AnnotationSource:
    """The annotation files of a sequence, as read."""

    groundtruth: str
    absent: str
    language: str
    attributes: str


@dataclass(frozen=True)
class SequenceAnnotation:
    sequence_id: str
    frame_count: int
    gt_boxes: tuple[BoundingBox, ...]
    absent: tuple[bool, ...]
    language: str
    attributes: tuple[bool, ...]
    """One flag per :py:class:`Attribute`, in declaration order."""

    root: Path | None = field(default=None, compare=False)
    """The directory the sequence was loaded from, if any."""

    source: AnnotationSource | None = field(default=None, compare=False, repr=False)
    """The file contents the sequence was loaded from, if any."""

    def __post_init__(self) -> None:
        if self.frame_count < 1:
            raise ValidationFailure(f"A sequence needs at least one frame, got {self.frame_count}")
        if len(self.gt_boxes) != self.frame_count:
            raise ValidationFailure(
                f"Expected {self.frame_count} boxes, got {len(self.gt_boxes)}"
            )
        if len(self.absent) != self.frame_count:
            raise ValidationFailure(
                f"Expected {self.frame_count} absent flags, got {len(self.absent)}"
            )
        if len(self.attributes) != ATTRIBUTE_COUNT:
            raise ValidationFailure(
                f"Expected {ATTRIBUTE_COUNT} attribute flags, got {len(self.attributes)}"
            )

    def has_attribute(self, attribute: Attribute) -> bool:
        return self.attributes[list(Attribute).index(attribute)]

    def frame_path(self, index: int) -> Path:
        root = self.root if self.root is not None else Path(self.sequence_id)
        return root / FRAMES_DIR / f"{index + 1:08d}.jpg"

    def frame(self, index: int) -> FrameRef:
        if not 0 <= index < self.frame_count:
            raise IndexError(f"Frame {index} is outside of 0..{self.frame_count - 1}")
        return FrameRef(self.sequence_id, index, self.frame_path(index))

    def frames(self) -> list[FrameRef]:
        return [self.frame(index) for index in range(self.frame_count)]


def format_number(value: float) -> str:
    """Formats an annotation value: integral values without a fractional part."""
    if value.is_integer():
        return str(int(value))
    return repr(value)


def format_box_line(box: BoundingBox) -> str:
    return ",".join(format_number(value) for value in box.as_tuple())


def parse_box_line(path: Path, line_no: int, line: str) -> BoundingBox:
    values = [value for value in _SEPARATORS.split(line.strip()) if value]
    if len(values) != 4:
        raise AnnotationLoadError(path, f"expected 4 values, got {len(values)}", line_no)
    try:
        return BoundingBox(*(float(value) for value in values))
    except ValueError as exc:
        raise AnnotationLoadError(path, f"not a number in {line.strip()!r}", line_no) from exc
    except InvalidGeometry as exc:
        raise AnnotationLoadError(path, str(exc), line_no) from exc


def _read_text(path: Path) -> str:
    # No newline translation
    try:
        return path.read_bytes().decode("utf-8")
    except FileNotFoundError as exc:
        raise AnnotationLoadError(path, "file is missing") from exc
    except UnicodeDecodeError as exc:
        raise AnnotationLoadError(path, f"not valid UTF-8: {exc.reason}") from exc


def _parse_flag(path: Path, line_no: int, token: str) -> bool:
    token = token.strip()
    if token not in ("0", "1"):
        raise AnnotationLoadError(path, f"expected 0 or 1, got {token!r}", line_no)
    return token == "1"


def _parse_boxes(path: Path, text: str) -> tuple[BoundingBox, ...]:
    return tuple(
        parse_box_line(path, line_no, line)
        for line_no, line in enumerate(text.splitlines(), start=1)
    )


def _parse_absent(path: Path, text: str) -> tuple[bool, ...]:
    return tuple(
        _parse_flag(path, line_no, line) for line_no, line in enumerate(text.splitlines(), start=1)
    )


def _parse_language(path: Path, text: str) -> str:
    lines = text.splitlines()
    if len(lines) != 1 or not lines[0].strip():
        raise AnnotationLoadError(path, "expected a single non-empty line")
    return lines[0]


def _parse_attributes(path: Path, text: str) -> tuple[bool, ...]:
    lines = text.splitlines()
    if len(lines) != 1:
        raise AnnotationLoadError(path, f"expected a single line, got {len(lines)}")
    tokens = lines[0].split(",")
    if len(tokens) != ATTRIBUTE_COUNT:
        raise AnnotationLoadError(path, f"expected {ATTRIBUTE_COUNT} flags, got {len(tokens)}", 1)
    return tuple(_parse_flag(path, 1, token) for token in tokens)


def read_boxes(path: Path) -> list[BoundingBox]:
    """Reads a file of ``x,y,w,h`` lines (ground truth or tracker output)."""
    return list(_parse_boxes(path, _read_text(path)))


def write_boxes(path: Path, boxes: Sequence[BoundingBox]) -> None:
    path.write_text("".join(format_box_line(box) + "\n" for box in boxes), encoding="utf-8")


def load_sequence(directory: Path) -> SequenceAnnotation:
    """
    Loads the four annotation files of a sequence directory.
    The sequence id is the directory name; other files in the directory are ignored.
    The file contents are kept, so that :py:func:`save_sequence` reproduces them byte for byte.
    """
    gt_path = directory / GROUNDTRUTH_FILE
    source = AnnotationSource(
        groundtruth=_read_text(gt_path),
        absent=_read_text(directory / ABSENT_FILE),
        language=_read_text(directory / LANGUAGE_FILE),
        attributes=_read_text(directory / ATTRIBUTES_FILE),
    )

    boxes = _parse_boxes(gt_path, source.groundtruth)
    if not boxes:
        raise AnnotationLoadError(gt_path, "no frames")

    absent_path = directory / ABSENT_FILE
    absent_lines = source.absent.splitlines()
    if len(absent_lines) != len(boxes):
        raise AnnotationLoadError(
            absent_path, f"expected {len(boxes)} lines, got {len(absent_lines)}"
        )

    return SequenceAnnotation(
        sequence_id=directory.name,
        frame_count=len(boxes),
        gt_boxes=boxes,
        absent=_parse_absent(absent_path, source.absent),
        language=_parse_language(directory / LANGUAGE_FILE, source.language),
        attributes=_parse_attributes(directory / ATTRIBUTES_FILE, source.attributes),
        root=directory,
        source=source,
    )


def _canonical_files(annotation: SequenceAnnotation) -> dict[str, str]:
    return {
        GROUNDTRUTH_FILE: "".join(format_box_line(box) + "\n" for box in annotation.gt_boxes),
        ABSENT_FILE: "".join(f"{int(flag)}\n" for flag in annotation.absent),
        LANGUAGE_FILE: annotation.language + "\n",
        ATTRIBUTES_FILE: ",".join(str(int(flag)) for flag in annotation.attributes) + "\n",
    }


def _source_files(annotation: SequenceAnnotation, directory: Path) -> dict[str, str]:
    """The source texts that still describe ``annotation``; edited fields are left out."""
    source = annotation.source
    if source is None:
        return {}
    candidates: list[tuple[str, str, Callable[[Path, str], object], object]] = [
        (GROUNDTRUTH_FILE, source.groundtruth, _parse_boxes, annotation.gt_boxes),
        (ABSENT_FILE, source.absent, _parse_absent, annotation.absent),
        (LANGUAGE_FILE, source.language, _parse_language, annotation.language),
        (ATTRIBUTES_FILE, source.attributes, _parse_attributes, annotation.attributes),
    ]
    return {
        name: text
        for name, text, parse_text, value in candidates
        if parse_text(directory / name, text) == value
    }


def save_sequence(annotation: SequenceAnnotation, directory: Path) -> None:
    """
    Writes the four annotation files; loading them back gives an equal annotation.
    Files of a loaded annotation are written back exactly as they were read,
    unless the corresponding field has been changed since.
    """
    directory.mkdir(parents=True, exist_ok=True)
    files = _canonical_files(annotation) | _source_files(annotation, directory)
    for name, text in files.items():
        (directory / name).write_bytes(text.encode("utf-8"))


def load_corpus(root: Path) -> list[SequenceAnnotation]:
    """Loads every subdirectory of ``root`` holding a ground-truth file, ordered by name."""
    if not root.is_dir():
        raise AnnotationLoadError(root, "not a directory")
    directories = sorted(
        path for path in root.iterdir() if path.is_dir() and (path / GROUNDTRUTH_FILE).exists()
    )
    sequences = [load_sequence(directory) for directory in directories]
    logger.info("Loaded %d sequences from %s", len(sequences), root)
    return sequences


@dataclass(frozen=True)
class SftSample:
    """A sampled template-search pair awaiting its reasoning reply."""

    template: FrameRef
    search: FrameRef
    language: str


@dataclass(frozen=True)
class SftRecord:
    search_image: Path
    template_image: Path
    language: str
    reasoning: str
    """The full tagged reply."""

    def __post_init__(self) -> None:
        if parse(self.reasoning).level < FormatLevel.IDENTIFIERS:
            raise InvalidReasoning("The reasoning reply lacks the think/d/answer identifiers")


@dataclass(frozen=True)
class RlRecord:
    search_image: Path
    template_image: Path
    language: str
    box_template: BoundingBox
    box_search: BoundingBox

    def __post_init__(self) -> None:
        for name in ("box_template", "box_search"):
            if not getattr(self, name).has_area():
                raise ValidationFailure(f"`{name}` must have a positive area")


def _eligible_frames(sequence: SequenceAnnotation, *, require_area: bool) -> NDArray[np.int64]:
    mask = ~np.asarray(sequence.absent, dtype=bool)
    if require_area:
        mask &= np.array([box.has_area() for box in sequence.gt_boxes], dtype=bool)
    return np.flatnonzero(mask).astype(np.int64)


def _unrank_pair(rank: int) -> tuple[int, int]:
    # Enumerates pairs (i, j) with i <= j as (0,0), (0,1), (1,1), (0,2), ...
    j = (math.isqrt(8 * rank + 1) - 1) // 2
    return rank - j * (j + 1) // 2, j


def _sample_pairs(
    sequences: Sequence[SequenceAnnotation],
    count: int,
    seed: int | np.random.SeedSequence,
    *,
    require_area: bool,
) -> list[tuple[SequenceAnnotation, int, int]]:
    """
    Draws ``count`` distinct (template, search) frame pairs uniformly from all eligible pairs
    of all sequences, with the template index not after the search index.
    """
    if count < 0:
        raise ValidationFailure(f"The number of pairs must be non-negative, got {count}")

    eligible = [_eligible_frames(sequence, require_area=require_area) for sequence in sequences]
    pair_counts = np.array([len(e) * (len(e) + 1) // 2 for e in eligible], dtype=np.int64)
    available = int(pair_counts.sum())
    if available < count:
        raise NotEnoughSamples(count, available)
    if count == 0:
        return []

    rng = np.random.default_rng(seed)
    ranks = np.sort(rng.choice(available, size=count, replace=False))
    ends = np.cumsum(pair_counts)
    owners = np.searchsorted(ends, ranks, side="right")

    pairs = []
    for rank, owner in zip(ranks, owners, strict=True):
        local_rank = int(rank - (ends[owner] - pair_counts[owner]))
        i, j = _unrank_pair(local_rank)
        frames = eligible[owner]
        pairs.append((sequences[owner], int(frames[i]), int(frames[j])))
    return pairs


def build_sft_samples(
    sequences: Sequence[SequenceAnnotation],
    pairs_per_dataset: int,
    seed: int | np.random.SeedSequence,
) -> list[SftSample]:
    """
    Samples template-search pairs for the reasoning corpus.
    Frames flagged absent are never used; the result depends only on the arguments.
    """
    return [
        SftSample(sequence.frame(template), sequence.frame(search), sequence.language)
        for sequence, template, search in _sample_pairs(
            sequences, pairs_per_dataset, seed, require_area=False
        )
    ]


def build_rl_samples(
    sequences: Sequence[SequenceAnnotation],
    pairs_per_dataset: int,
    seed: int | np.random.SeedSequence,
) -> list[RlRecord]:
    """
    Samples template-search pairs with their ground-truth boxes for the reinforcement corpus.
    Besides absent frames, frames with a zero-area box are excluded.
    """
    return [
        RlRecord(
            search_image=sequence.frame_path(search),
            template_image=sequence.frame_path(template),
            language=sequence.language,
            box_template=sequence.gt_boxes[template],
            box_search=sequence.gt_boxes[search],
        )
        for sequence, template, search in _sample_pairs(
            sequences, pairs_per_dataset, seed, require_area=True
        )
    ]


def _dataset_seeds(
    names: Sequence[str], seed: int
) -> dict[str, np.random.SeedSequence]:
    children = np.random.SeedSequence(seed).spawn(len(names))
    return dict(zip(names, children, strict=True))


def _check_datasets(
    datasets: Mapping[str, Sequence[SequenceAnnotation]], counts: Mapping[str, int]
) -> list[str]:
    unknown = sorted(set(counts) - set(datasets))
    if unknown:
        raise ValidationFailure(f"Counts given for unknown datasets: {', '.join(unknown)}")
    return sorted(counts)


def build_sft_corpus(
    datasets: Mapping[str, Sequence[SequenceAnnotation]],
    counts: Mapping[str, int],
    seed: int,
) -> dict[str, list[SftSample]]:
    """
    Runs :py:func:`build_sft_samples` for every dataset named in ``counts``,
    each with its own seed derived from ``seed`` and the sorted dataset names.
    """
    names = _check_datasets(datasets, counts)
    seeds = _dataset_seeds(names, seed)
    return {name: build_sft_samples(datasets[name], counts[name], seeds[name]) for name in names}


def build_rl_corpus(
    datasets: Mapping[str, Sequence[SequenceAnnotation]],
    counts: Mapping[str, int],
    seed: int,
) -> dict[str, list[RlRecord]]:
    """The reinforcement-corpus counterpart of :py:func:`build_sft_corpus`."""
    names = _check_datasets(datasets, counts)
    seeds = _dataset_seeds(names, seed)
    return {name: build_rl_samples(datasets[name], counts[name], seeds[name]) for name in names}


def attach_reasoning(sample: SftSample, reasoning: str) -> SftRecord:
    """Turns a sampled pair and the reply generated for it into a reasoning record."""
    return SftRecord(
        search_image=sample.search.path,
        template_image=sample.template.path,
        language=sample.language,
        reasoning=reasoning,
    )


def write_sft_samples(path: Path, samples: Sequence[SftSample]) -> None:
    dump_jsonl(path, SftSample, samples)


def read_sft_samples(path: Path) -> list[SftSample]:
    return load_jsonl(path, SftSample)


def write_sft_records(path: Path, records: Sequence[SftRecord]) -> None:
    dump_jsonl(path, SftRecord, records)


def read_sft_records(path: Path) -> list[SftRecord]:
    return load_jsonl(path, SftRecord)


def write_rl_records(path: Path, records: Sequence[RlRecord]) -> None:
    dump_jsonl(path, RlRecord, records)


def read_rl_records(path: Path) -> list[RlRecord]:
    return load_jsonl(path, RlRecord)


@dataclass(frozen=True)
class CorpusStatistics:
    sequence_count: int
    total_frames: int
    min_frames: int
    mean_frames: float
    max_frames: int
    length_buckets: dict[str, int]
    """Sequence counts per length range, keyed by the labels in :py:data:`LENGTH_BUCKETS`."""

    attribute_counts: dict[Attribute, int]
    """Number of sequences carrying each attribute."""

    absent_ratio: float
    """Fraction of all frames flagged absent."""


def _length_bucket(frame_count: int) -> str:
    for label, upper in zip(LENGTH_BUCKETS, _BUCKET_UPPER_BOUNDS, strict=False):
        if frame_count <= upper:
            return label
    return LENGTH_BUCKETS[-1]


def corpus_statistics(sequences: Sequence[SequenceAnnotation]) -> CorpusStatistics:
    if not sequences:
        raise ValidationFailure("Cannot compute statistics of an empty corpus")

    lengths = np.array([sequence.frame_count for sequence in sequences], dtype=np.int64)
    absent_frames = sum(sum(sequence.absent) for sequence in sequences)

    buckets = dict.fromkeys(LENGTH_BUCKETS, 0)
    for sequence in sequences:
        buckets[_length_bucket(sequence.frame_count)] += 1

    flags = np.array([sequence.attributes for sequence in sequences], dtype=bool)
    attribute_counts = {
        attribute: int(count) for attribute, count in zip(Attribute, flags.sum(axis=0), strict=True)
    }

    return CorpusStatistics(
        sequence_count=len(sequences),
        total_frames=int(lengths.sum()),
        min_frames=int(lengths.min()),
        mean_frames=float(lengths.mean()),
        max_frames=int(lengths.max()),
        length_buckets=buckets,
        attribute_counts=attribute_counts,
        absent_ratio=absent_frames / int(lengths.sum()),
    )
