from dataclasses import replace

import numpy as np
import pytest
from vltrack import (
    UPDATE_INTERVAL_GRID,
    AnchorPolicy,
    Attribute,
    BoundingBox,
    ClientRefiner,
    Decision,
    EndpointConfig,
    FormatLevel,
    InvalidArgument,
    LoopConfig,
    LoopJob,
    OracleTracker,
    RefinerClient,
    RefinerUnavailable,
    SequenceAnnotation,
    Strategy,
    StubChatServer,
    TemplatePolicy,
    TrackerFailure,
    evaluate,
    parse,
    preliminary_gate,
    run,
    run_many,
    sweep_intervals,
)

LANGUAGE = "the red ball"


def reply(decision, answer="a"):
    return f"<think>t</think><d>{decision}</d><answer>{answer}</answer>"


NO = reply("no", LANGUAGE)


def make_sequence(frames, sequence_id="seq", size=10):
    boxes = tuple(BoundingBox(2 * i, i, size, size) for i in range(frames))
    return SequenceAnnotation(
        sequence_id=sequence_id,
        frame_count=frames,
        gt_boxes=boxes,
        absent=(False,) * frames,
        language=LANGUAGE,
        attributes=(False,) * len(Attribute),
    )


class ScriptedRefiner:
    """Serves scripted replies in order, then ``default``; exceptions are raised."""

    def __init__(self, *replies, default=NO):
        self.replies = list(replies)
        self.default = default
        self.calls = []

    def refine(self, template, search, language):
        self.calls.append((template.index, search.index, language))
        item = self.replies.pop(0) if self.replies else self.default
        if isinstance(item, Exception):
            raise item
        return parse(item)


class RecordingTracker:
    def __init__(self, inner):
        self.inner = inner
        self.queries = []

    def initialize(self, frame, box, language):
        self.inner.initialize(frame, box, language)

    def track(self, templates, search, language):
        self.queries.append(([template.index for template in templates], search.index, language))
        return self.inner.track(templates, search, language)


def run_sequence(sequence, refiner, tracker=None, **config):
    tracker = tracker or OracleTracker(sequence.gt_boxes)
    return run(
        sequence.frames(),
        sequence.gt_boxes[0],
        sequence.language,
        tracker,
        refiner,
        LoopConfig(**config),
    )


def test_rejections_keep_the_anchor():
    refiner = ScriptedRefiner()
    result = run_sequence(make_sequence(10), refiner, update_interval=3)

    assert result.completed
    assert len(result.output.boxes) == 10
    assert [event.frame_index for event in result.events] == [3, 6, 9]
    assert all(event.previous_anchor_frame == 1 for event in result.events)
    assert all(event.decision == Decision.NO for event in result.events)
    assert all(not event.accepted for event in result.events)
    assert all(event.new_language == LANGUAGE for event in result.events)
    assert [call[:2] for call in refiner.calls] == [(0, 2), (0, 5), (0, 8)]
    assert result.final_language == LANGUAGE
    assert result.refiner_calls == 3


def test_every_call_anchor_policy():
    refiner = ScriptedRefiner()
    result = run_sequence(
        make_sequence(10), refiner, update_interval=3, anchor_policy=AnchorPolicy.EVERY_CALL
    )
    assert [event.previous_anchor_frame for event in result.events] == [1, 3, 6]
    assert [call[0] for call in refiner.calls] == [0, 2, 5]


@pytest.mark.parametrize("interval", [1, 3, 100])
def test_static_strategy_never_calls_the_refiner(interval):
    refiner = ScriptedRefiner()
    result = run_sequence(
        make_sequence(10), refiner, update_interval=interval, strategy=Strategy.STATIC
    )
    assert refiner.calls == []
    assert result.events == []
    assert result.refiner_calls == 0

    result = run_sequence(make_sequence(10), None, strategy=Strategy.STATIC)
    assert result.completed


def test_refiner_is_required():
    with pytest.raises(InvalidArgument, match="Strategy 'dynamic1' needs a refiner"):
        run_sequence(make_sequence(3), None)


def test_single_frame_update():
    sequence = make_sequence(1)
    result = run_sequence(
        sequence,
        ScriptedRefiner(reply("yes", "a")),
        update_interval=1,
        strategy=Strategy.DYNAMIC_STATIC,
    )
    [event] = result.events
    assert event.accepted
    assert event.level == FormatLevel.ORDERED
    assert (event.old_language, event.new_language) == (LANGUAGE, "a")
    assert result.final_language == f"a; {LANGUAGE}"

    result = run_sequence(sequence, ScriptedRefiner(reply("yes", "a")), update_interval=1)
    assert result.final_language == "a"


def test_update_takes_effect_on_the_next_frame():
    sequence = make_sequence(4)
    tracker = RecordingTracker(OracleTracker(sequence.gt_boxes))
    refiner = ScriptedRefiner(reply("yes", "a"), reply("yes", "b"))
    run_sequence(
        sequence, refiner, tracker=tracker, update_interval=2, strategy=Strategy.DYNAMIC_STATIC
    )
    languages = [language for _, _, language in tracker.queries]
    assert languages == [
        f"{LANGUAGE}; {LANGUAGE}",
        f"{LANGUAGE}; {LANGUAGE}",
        f"a; {LANGUAGE}",
        f"a; {LANGUAGE}",
    ]
    # the refiner always sees the initial description under this strategy
    assert [language for _, _, language in refiner.calls] == [LANGUAGE, LANGUAGE]


@pytest.mark.parametrize(
    ("strategy", "second_query"),
    [(Strategy.DYNAMIC1, LANGUAGE), (Strategy.DYNAMIC2, "a")],
)
def test_refiner_query_language(strategy, second_query):
    refiner = ScriptedRefiner(reply("yes", "a"), reply("yes", "b"))
    result = run_sequence(make_sequence(4), refiner, update_interval=2, strategy=strategy)
    assert [language for _, _, language in refiner.calls] == [LANGUAGE, second_query]
    assert result.final_language == "b"
    # an accepted update moves the anchor to the frame it was made at
    assert [call[0] for call in refiner.calls] == [0, 1]


def test_templates():
    sequence = make_sequence(6)
    tracker = RecordingTracker(OracleTracker(sequence.gt_boxes))
    refiner = ScriptedRefiner(NO, reply("yes", "a"))
    run_sequence(sequence, refiner, tracker=tracker, update_interval=2)
    templates = [indices for indices, _, _ in tracker.queries]
    # the anchor moves to frame 4 (index 3) after the accepted update there
    assert templates == [
        [0, 0, 0],
        [0, 0, 0],
        [0, 0, 1],
        [0, 0, 2],
        [0, 3, 3],
        [0, 3, 4],
    ]

    tracker = RecordingTracker(OracleTracker(sequence.gt_boxes))
    run_sequence(
        sequence,
        ScriptedRefiner(),
        tracker=tracker,
        update_interval=2,
        template_policy=TemplatePolicy.INITIAL_ONLY,
    )
    assert all(indices == [0, 0, 0] for indices, _, _ in tracker.queries)


@pytest.mark.parametrize(
    ("text", "level", "format_score"),
    [
        ("complete garbage", FormatLevel.MALFORMED, 0.0),
        ("<d>yes</d><think>t</think><answer>new</answer>", FormatLevel.IDENTIFIERS, 1.0),
        (reply("yes", ""), FormatLevel.ORDERED, 2.0),
    ],
)
def test_rejected_replies(text, level, format_score):
    result = run_sequence(make_sequence(3), ScriptedRefiner(default=text), update_interval=1)
    assert result.completed
    assert len(result.events) == 3
    for event in result.events:
        assert not event.accepted
        assert event.level == level
        assert event.format_score == format_score
        assert event.new_language == LANGUAGE
        assert event.previous_anchor_frame == 1


def test_refiner_failure_is_logged_and_skipped(caplog):
    refiner = ScriptedRefiner(RefinerUnavailable("endpoint down"), reply("yes", "a"))
    result = run_sequence(make_sequence(4), refiner, update_interval=2)

    assert result.completed
    failed, accepted = result.events
    assert failed.error == "endpoint down"
    assert failed.decision == Decision.INVALID
    assert not failed.accepted
    assert failed.new_language == LANGUAGE
    assert accepted.accepted
    assert accepted.previous_anchor_frame == 1
    assert result.final_language == "a"
    assert "refiner failed at frame 2" in caplog.text


def test_tracker_failure_returns_partial_output():
    sequence = make_sequence(8)
    tracker = OracleTracker(sequence.gt_boxes[:5])
    result = run_sequence(sequence, ScriptedRefiner(), tracker=tracker, update_interval=2)

    assert not result.completed
    assert len(result.output.boxes) == 5
    assert result.output.boxes == list(sequence.gt_boxes[:5])
    assert result.failure.startswith("frame 6:")
    assert [event.frame_index for event in result.events] == [2, 4]


class UnreachableTracker:
    def initialize(self, frame, box, language):
        raise TrackerFailure("connection refused")

    def track(self, templates, search, language):
        raise AssertionError("tracked without initializing")


def test_tracker_failing_to_initialize():
    sequence = make_sequence(4)
    refiner = ScriptedRefiner()
    result = run_sequence(sequence, refiner, tracker=UnreachableTracker(), update_interval=1)

    assert not result.completed
    assert result.output.boxes == []
    assert result.events == []
    assert result.failure == "initialize: connection refused"
    assert refiner.calls == []


def test_run_many_keeps_finished_runs_when_one_cannot_start():
    sequences = [make_sequence(6, f"seq{i}") for i in range(3)]
    jobs = {
        s.sequence_id: LoopJob(s.frames(), s.gt_boxes[0], s.language, OracleTracker(s.gt_boxes))
        for s in sequences
    }
    jobs["seq1"] = LoopJob(
        sequences[1].frames(), sequences[1].gt_boxes[0], LANGUAGE, UnreachableTracker()
    )

    results = run_many(jobs, ScriptedRefiner(), LoopConfig(update_interval=3))
    assert not results["seq1"].completed
    assert results["seq0"].completed
    assert results["seq2"].completed
    assert len(results["seq2"].output.boxes) == 6


def test_refiner_with_missing_inline_frame(tmp_path):
    sequence = make_sequence(4)
    frames = [
        replace(frame, path=tmp_path / f"{frame.index + 1:08d}.jpg") for frame in sequence.frames()
    ]
    server = StubChatServer()
    client = RefinerClient(
        EndpointConfig(url="http://stub.invalid/v1", inline_images=True), server.transport()
    )
    result = run(
        frames,
        sequence.gt_boxes[0],
        LANGUAGE,
        OracleTracker(sequence.gt_boxes),
        ClientRefiner(client),
        LoopConfig(update_interval=2),
    )

    assert result.completed
    assert len(result.output.boxes) == 4
    assert [event.frame_index for event in result.events] == [2, 4]
    assert all("Cannot read image" in event.error for event in result.events)
    assert server.calls == 0


@pytest.mark.parametrize(
    ("history", "threshold", "expected"),
    [([0.2], 1.0, True), ([0.99], 1.5, True), ([0.9], 0.5, False), ([0.3], 0.5, True)],
)
def test_preliminary_gate(history, threshold, expected):
    assert preliminary_gate(history, threshold) is expected


def test_gate_in_the_loop():
    sequence = make_sequence(6)
    refiner = ScriptedRefiner()
    # a noiseless oracle is fully confident, so a closed gate skips every call
    result = run_sequence(sequence, refiner, update_interval=1, gate_threshold=0.5)
    assert refiner.calls == []
    assert result.refiner_calls == 0

    with pytest.raises(InvalidArgument, match="`update_interval` must be at least 1"):
        LoopConfig(update_interval=0)
    with pytest.raises(InvalidArgument, match="`gate_threshold` must be non-negative"):
        LoopConfig(gate_threshold=-0.1)


def test_oracle_tracker():
    sequence = make_sequence(50)
    frames = sequence.frames()

    exact = OracleTracker(sequence.gt_boxes)
    assert [exact.track([], frame, LANGUAGE).box for frame in frames] == list(sequence.gt_boxes)

    first = OracleTracker(sequence.gt_boxes, 5, seed=3)
    second = OracleTracker(sequence.gt_boxes, 5, seed=3)
    boxes = [first.track([], frame, LANGUAGE) for frame in frames]
    assert boxes == [second.track([], frame, LANGUAGE) for frame in frames]
    first.initialize(frames[0], sequence.gt_boxes[0], LANGUAGE)
    assert boxes == [first.track([], frame, LANGUAGE) for frame in frames]

    with pytest.raises(InvalidArgument):
        OracleTracker(sequence.gt_boxes, -1)


def test_oracle_noise_degrades_overlap():
    sequence = make_sequence(200)
    tracker = OracleTracker(sequence.gt_boxes, 5, seed=1)
    result = run_sequence(sequence, None, tracker=tracker, strategy=Strategy.STATIC)
    report = evaluate([sequence], {"seq": result.output})
    assert 0 < report.ao < 1

    result = run_sequence(sequence, None, strategy=Strategy.STATIC)
    assert evaluate([sequence], {"seq": result.output}).ao == 1.0


@pytest.mark.parametrize("interval", UPDATE_INTERVAL_GRID)
def test_interval_grid_with_stub_endpoint(interval):
    server = StubChatServer()
    client = RefinerClient(EndpointConfig(url="http://stub.invalid/v1"), server.transport())
    sequence = make_sequence(1000)

    result = run_sequence(sequence, ClientRefiner(client), update_interval=interval)
    client.close()

    assert result.completed
    assert server.calls == 1000 // interval
    assert [event.frame_index for event in result.events] == list(
        range(interval, 1001, interval)
    )
    assert all(event.decision == Decision.NO for event in result.events)


def test_run_many_keeps_runs_apart():
    sequences = [make_sequence(12, f"seq{i}") for i in range(4)]
    jobs = {
        s.sequence_id: LoopJob(s.frames(), s.gt_boxes[0], s.language, OracleTracker(s.gt_boxes))
        for s in sequences
    }

    class AlwaysYes:
        def refine(self, template, search, language):
            return parse(reply("yes", f"{search.sequence_id} at {search.index}"))

    results = run_many(jobs, AlwaysYes(), LoopConfig(update_interval=5), max_workers=4)
    assert sorted(results) == [s.sequence_id for s in sequences]
    for sequence_id, result in results.items():
        assert result.output.sequence_id == sequence_id
        assert [event.new_language for event in result.events] == [
            f"{sequence_id} at 4",
            f"{sequence_id} at 9",
        ]


def test_sweep_intervals():
    corpus = [make_sequence(30, f"seq{i}") for i in range(3)]
    refiner = ScriptedRefiner()
    points = sweep_intervals(
        corpus,
        lambda annotation: OracleTracker(annotation.gt_boxes),
        refiner,
        LoopConfig(),
        intervals=(5, 10),
        max_workers=2,
    )
    assert [point.update_interval for point in points] == [5, 10]
    assert [point.refiner_calls for point in points] == [18, 9]
    assert all(point.report.ao == 1.0 for point in points)

    with pytest.raises(TrackerFailure, match="u=5: runs aborted for seq0, seq1, seq2"):
        sweep_intervals(
            corpus,
            lambda annotation: OracleTracker(annotation.gt_boxes[:10]),
            refiner,
            LoopConfig(),
            intervals=(5,),
        )


def test_noise_is_monotone():
    sequence = make_sequence(300, size=40)
    aos = []
    for noise in (0, 2, 5, 10):
        tracker = OracleTracker(sequence.gt_boxes, noise, seed=0)
        result = run_sequence(sequence, None, tracker=tracker, strategy=Strategy.STATIC)
        aos.append(evaluate([sequence], {"seq": result.output}).ao)
    assert aos[0] == 1.0
    assert all(a > b for a, b in zip(aos, aos[1:], strict=False))
    assert np.all(np.array(aos) > 0)
