from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from vltrack import (
    RL_REFERENCE_COUNTS,
    AnnotationLoadError,
    Attribute,
    BoundingBox,
    FrameRef,
    InvalidReasoning,
    NotEnoughSamples,
    RlRecord,
    SequenceAnnotation,
    SftRecord,
    ValidationFailure,
    attach_reasoning,
    build_rl_corpus,
    build_rl_samples,
    build_sft_corpus,
    build_sft_samples,
    corpus_statistics,
    load_corpus,
    load_sequence,
    read_rl_records,
    read_sft_records,
    read_sft_samples,
    save_sequence,
    write_rl_records,
    write_sft_records,
    write_sft_samples,
)
from vltrack._dataset import format_number

REASONING = "<think>same target</think><d>no</d><answer>the red ball</answer>"


def make_sequence(sequence_id, boxes, absent=None, language="the red ball", attributes=()):
    flags = tuple(attribute in attributes for attribute in Attribute)
    return SequenceAnnotation(
        sequence_id=sequence_id,
        frame_count=len(boxes),
        gt_boxes=tuple(BoundingBox(*box) for box in boxes),
        absent=tuple(absent) if absent is not None else (False,) * len(boxes),
        language=language,
        attributes=flags,
    )


def synthetic_corpus(sequences=10, frames=100, absent_ratio=0.2, seed=0):
    rng = np.random.default_rng(seed)
    corpus = []
    for index in range(sequences):
        absent = np.zeros(frames, dtype=bool)
        absent[rng.choice(frames, size=int(frames * absent_ratio), replace=False)] = True
        boxes = [(float(x), float(y), 10.0, 10.0) for x, y in rng.uniform(0, 100, size=(frames, 2))]
        corpus.append(make_sequence(f"seq{index:02d}", boxes, absent.tolist()))
    return corpus


def test_round_trip(tmp_path):
    annotation = make_sequence("ball", [(0, 0, 5, 5), (1, 1, 5, 5), (2, 2, 5, 5)])
    save_sequence(annotation, tmp_path / "ball")
    loaded = load_sequence(tmp_path / "ball")
    assert loaded == annotation
    assert loaded.root == tmp_path / "ball"

    files = {path.name: path.read_bytes() for path in (tmp_path / "ball").iterdir()}
    assert files["groundtruth.txt"] == b"0,0,5,5\n1,1,5,5\n2,2,5,5\n"
    assert files["absent.txt"] == b"0\n0\n0\n"
    assert files["language.txt"] == b"the red ball\n"
    assert files["attributes.txt"] == b"0,0,0,0,0,0,0,0,0,0,0,0,0,0,0\n"

    save_sequence(loaded, tmp_path / "copy")
    for name, contents in files.items():
        assert (tmp_path / "copy" / name).read_bytes() == contents


def test_round_trip_keeps_original_spelling(tmp_path):
    files = {
        "groundtruth.txt": b"10.0000,20.5000,30.0000,40.0000\r\n1\t2 3,4.50\r\n",
        "absent.txt": b"0\r\n1",
        "language.txt": b"the red ball",
        "attributes.txt": b"1,0,0,0,0,0,0,0,0,0,0,0,0,0,0\n",
    }
    source = tmp_path / "s"
    source.mkdir()
    for name, contents in files.items():
        (source / name).write_bytes(contents)

    loaded = load_sequence(source)
    assert loaded.gt_boxes == (BoundingBox(10, 20.5, 30, 40), BoundingBox(1, 2, 3, 4.5))
    assert loaded.absent == (False, True)
    assert loaded.language == "the red ball"

    save_sequence(loaded, tmp_path / "copy")
    for name, contents in files.items():
        assert (tmp_path / "copy" / name).read_bytes() == contents


def test_edited_fields_are_written_canonically(tmp_path):
    source = tmp_path / "s"
    source.mkdir()
    (source / "groundtruth.txt").write_bytes(b"10.0000 20.0000 30.0000 40.0000\n")
    (source / "absent.txt").write_bytes(b"0\n")
    (source / "language.txt").write_bytes(b"the red ball")
    (source / "attributes.txt").write_bytes(b"0,0,0,0,0,0,0,0,0,0,0,0,0,0,0\n")

    edited = replace(load_sequence(source), language="the blue ball")
    save_sequence(edited, tmp_path / "copy")
    assert (tmp_path / "copy" / "language.txt").read_bytes() == b"the blue ball\n"
    assert (tmp_path / "copy" / "groundtruth.txt").read_bytes() == (
        b"10.0000 20.0000 30.0000 40.0000\n"
    )
    assert load_sequence(tmp_path / "copy") == edited

    in_memory = make_sequence("m", [(10, 20, 30, 40)])
    save_sequence(in_memory, tmp_path / "m")
    assert (tmp_path / "m" / "groundtruth.txt").read_bytes() == b"10,20,30,40\n"


def test_fractional_values_round_trip(tmp_path):
    annotation = make_sequence("s", [(0.5, 1 / 3, 10, 2.25)], attributes=(Attribute.AS,))
    save_sequence(annotation, tmp_path / "s")
    assert load_sequence(tmp_path / "s") == annotation
    assert format_number(3.0) == "3"
    assert format_number(0.1) == "0.1"


@pytest.mark.parametrize("line", ["10,20,30,40", "10 20 30 40", "10,\t20, 30 ,40"])
def test_groundtruth_separators(tmp_path, line):
    annotation = make_sequence("s", [(0, 0, 1, 1)])
    save_sequence(annotation, tmp_path / "s")
    (tmp_path / "s" / "groundtruth.txt").write_text(line + "\n", encoding="utf-8")
    assert load_sequence(tmp_path / "s").gt_boxes == (BoundingBox(10, 20, 30, 40),)


def write_files(directory, groundtruth, absent, language="a ball\n", attributes=None):
    directory.mkdir()
    (directory / "groundtruth.txt").write_text(groundtruth, encoding="utf-8")
    (directory / "absent.txt").write_text(absent, encoding="utf-8")
    (directory / "language.txt").write_text(language, encoding="utf-8")
    if attributes is None:
        attributes = ",".join(["0"] * 15) + "\n"
    (directory / "attributes.txt").write_text(attributes, encoding="utf-8")
    return directory


@pytest.mark.parametrize(
    ("groundtruth", "absent", "language", "attributes", "message"),
    [
        ("0,0,5,5\n1,1,5,5\n", "0\n", "a\n", None, r"absent.txt: expected 2 lines, got 1"),
        ("0,0,5,5\n0,0,5\n", "0\n0\n", "a\n", None, r"groundtruth.txt:2: expected 4 values"),
        ("0,0,5,x\n", "0\n", "a\n", None, r"groundtruth.txt:1: not a number"),
        ("0,0,-5,5\n", "0\n", "a\n", None, r"groundtruth.txt:1: .*non-negative"),
        ("", "", "a\n", None, r"groundtruth.txt: no frames"),
        ("0,0,5,5\n", "2\n", "a\n", None, r"absent.txt:1: expected 0 or 1"),
        ("0,0,5,5\n", "0\n", "\n", None, r"language.txt: expected a single non-empty line"),
        ("0,0,5,5\n", "0\n", "a\nb\n", None, r"language.txt: expected a single non-empty line"),
        ("0,0,5,5\n", "0\n", "a\n", "0,1\n", r"attributes.txt:1: expected 15 flags, got 2"),
    ],
)
def test_load_errors(tmp_path, groundtruth, absent, language, attributes, message):
    directory = write_files(tmp_path / "s", groundtruth, absent, language, attributes)
    with pytest.raises(AnnotationLoadError, match=message):
        load_sequence(directory)


def test_missing_file(tmp_path):
    directory = write_files(tmp_path / "s", "0,0,5,5\n", "0\n")
    (directory / "absent.txt").unlink()
    with pytest.raises(AnnotationLoadError, match="absent.txt: file is missing"):
        load_sequence(directory)


def test_load_corpus(tmp_path):
    for name in ("b", "a"):
        save_sequence(make_sequence(name, [(0, 0, 5, 5)]), tmp_path / name)
    (tmp_path / "notes").mkdir()
    (tmp_path / "README").write_text("not a sequence", encoding="utf-8")

    corpus = load_corpus(tmp_path)
    assert [sequence.sequence_id for sequence in corpus] == ["a", "b"]

    with pytest.raises(AnnotationLoadError, match="not a directory"):
        load_corpus(tmp_path / "README")


def test_frames():
    annotation = make_sequence("ball", [(0, 0, 5, 5)] * 3)
    assert annotation.frame(2) == FrameRef("ball", 2, Path("ball/img/00000003.jpg"))
    assert [frame.index for frame in annotation.frames()] == [0, 1, 2]
    with pytest.raises(IndexError):
        annotation.frame(3)


def test_annotation_validation():
    with pytest.raises(ValidationFailure, match="Expected 2 absent flags, got 1"):
        SequenceAnnotation("s", 2, (BoundingBox(0, 0, 1, 1),) * 2, (False,), "a", (False,) * 15)
    with pytest.raises(ValidationFailure, match="Expected 15 attribute flags, got 3"):
        SequenceAnnotation("s", 1, (BoundingBox(0, 0, 1, 1),), (False,), "a", (False,) * 3)


def test_sft_samples_skip_absent_frames():
    corpus = synthetic_corpus()
    samples = build_sft_samples(corpus, 50, seed=7)
    assert len(samples) == 50

    by_id = {sequence.sequence_id: sequence for sequence in corpus}
    pairs = set()
    for sample in samples:
        sequence = by_id[sample.template.sequence_id]
        assert sample.search.sequence_id == sequence.sequence_id
        assert sample.template.index <= sample.search.index
        assert not sequence.absent[sample.template.index]
        assert not sequence.absent[sample.search.index]
        assert sample.language == sequence.language
        pairs.add((sequence.sequence_id, sample.template.index, sample.search.index))
    assert len(pairs) == 50

    assert build_sft_samples(corpus, 50, seed=7) == samples
    assert build_sft_samples(corpus, 50, seed=8) != samples


def test_all_absent_sequence_contributes_nothing():
    hidden = make_sequence("hidden", [(0, 0, 5, 5)] * 5, [True] * 5)
    visible = make_sequence("visible", [(0, 0, 5, 5)] * 2)
    # 2 eligible frames give 3 pairs: (0, 0), (0, 1), (1, 1)
    samples = build_sft_samples([hidden, visible], 3, seed=0)
    assert {(s.template.index, s.search.index) for s in samples} == {(0, 0), (0, 1), (1, 1)}

    with pytest.raises(NotEnoughSamples, match="short by 1") as exc:
        build_sft_samples([hidden, visible], 4, seed=0)
    assert exc.value.shortfall == 1

    assert build_sft_samples([hidden], 0, seed=0) == []


def test_rl_samples():
    boxes = [(0, 0, 5, 5), (1, 1, 0, 5), (2, 2, 5, 5), (3, 3, 5, 5)]
    sequence = make_sequence("s", boxes, [False, False, False, True])
    # frame 1 has no area and frame 3 is absent: only frames 0 and 2 remain
    records = build_rl_samples([sequence], 3, seed=1)
    assert len(records) == 3
    for record in records:
        assert record.box_template.has_area()
        assert record.box_search.has_area()
    assert {record.search_image.name for record in records} == {"00000001.jpg", "00000003.jpg"}


def test_rl_record_fields():
    sequence = synthetic_corpus(sequences=1, absent_ratio=0.0)[0]
    records = build_rl_samples([sequence], 200, seed=3)
    for record in records:
        template = int(record.template_image.stem) - 1
        search = int(record.search_image.stem) - 1
        assert template <= search
        assert record.box_template == sequence.gt_boxes[template]
        assert record.box_search == sequence.gt_boxes[search]

    with pytest.raises(ValidationFailure, match="`box_search` must have a positive area"):
        RlRecord(Path("a"), Path("b"), "x", BoundingBox(0, 0, 1, 1), BoundingBox(0, 0, 0, 1))


def test_corpus_builders():
    datasets = {
        "GOT-10k": synthetic_corpus(3, 50, seed=1),
        "LaSOT": synthetic_corpus(3, 50, seed=2),
    }
    counts = {"GOT-10k": 20, "LaSOT": 10}
    corpus = build_sft_corpus(datasets, counts, seed=5)
    assert {name: len(samples) for name, samples in corpus.items()} == counts
    assert build_sft_corpus(datasets, counts, seed=5) == corpus

    # the seed of one dataset does not depend on the count of another
    other = build_sft_corpus(datasets, {"GOT-10k": 20, "LaSOT": 15}, seed=5)
    assert other["GOT-10k"] == corpus["GOT-10k"]

    with pytest.raises(ValidationFailure, match="unknown datasets: OTB99"):
        build_rl_corpus(datasets, {"OTB99": 1}, seed=5)

    # full-scale counts are accepted as long as the corpus has enough eligible pairs
    large = {name: synthetic_corpus(2, 60, seed=len(name)) for name in RL_REFERENCE_COUNTS}
    rl = build_rl_corpus(large, RL_REFERENCE_COUNTS, seed=0)
    assert {name: len(records) for name, records in rl.items()} == RL_REFERENCE_COUNTS


def test_reasoning_records(tmp_path):
    sequence = make_sequence("s", [(0, 0, 5, 5)] * 4)
    samples = build_sft_samples([sequence], 2, seed=0)

    samples_path = tmp_path / "samples.jsonl"
    write_sft_samples(samples_path, samples)
    assert read_sft_samples(samples_path) == samples

    records = [attach_reasoning(sample, REASONING) for sample in samples]
    assert records[0].template_image == samples[0].template.path
    assert records[0].language == "the red ball"

    records_path = tmp_path / "sft.jsonl"
    write_sft_records(records_path, records)
    assert read_sft_records(records_path) == records

    with pytest.raises(InvalidReasoning):
        attach_reasoning(samples[0], "just some text")
    with pytest.raises(InvalidReasoning):
        SftRecord(Path("a"), Path("b"), "x", "<think>t</think><answer>a</answer>")


def test_rl_records_io(tmp_path):
    records = build_rl_samples(synthetic_corpus(2, 20), 10, seed=0)
    path = tmp_path / "rl.jsonl"
    write_rl_records(path, records)
    assert read_rl_records(path) == records


def test_corpus_statistics():
    corpus = [
        make_sequence(
            "a", [(0, 0, 5, 5)] * 4, [True, False, False, False], attributes=(Attribute.AS,)
        ),
        make_sequence(
            "b", [(0, 0, 5, 5)] * 1300, [False] * 1300, attributes=(Attribute.AS, Attribute.FM)
        ),
    ]
    stats = corpus_statistics(corpus)
    assert stats.sequence_count == 2
    assert stats.total_frames == 1304
    assert (stats.min_frames, stats.max_frames) == (4, 1300)
    assert stats.mean_frames == 652.0
    assert stats.length_buckets == {
        "<=1200": 1,
        "1201-2000": 1,
        "2001-4000": 0,
        "4001-6000": 0,
        ">6000": 0,
    }
    assert stats.attribute_counts[Attribute.AS] == 2
    assert stats.attribute_counts[Attribute.FM] == 1
    assert stats.attribute_counts[Attribute.CM] == 0
    assert stats.absent_ratio == pytest.approx(1 / 1304)

    with pytest.raises(ValidationFailure, match="empty corpus"):
        corpus_statistics([])
