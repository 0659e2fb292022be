"""
The ``vltrack`` command: every harness operation as a batch subcommand.

Exit codes: 0 on success, 1 on an internal error, 2 when the input is rejected,
3 when an endpoint is unavailable.
"""

import argparse
import logging
import sys
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from datetime import UTC, datetime
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any

from ._client import ClientRefiner, RefinerClient, RefinerRequest, RemoteTracker
from ._codec import dump_jsonl, dumps, load_jsonl
from ._config import HarnessConfig, dump_config, resolve_config
from ._dataset import (
    GROUNDTRUTH_FILE,
    CorpusStatistics,
    SequenceAnnotation,
    build_rl_corpus,
    build_sft_corpus,
    corpus_statistics,
    load_corpus,
    load_sequence,
    write_rl_records,
    write_sft_samples,
)
from ._errors import EndpointFailure, ValidationFailure
from ._geometry import BoundingBox
from ._grpo import SampleGroup, normalize_groups
from ._loop import (
    UPDATE_INTERVAL_GRID,
    AnchorPolicy,
    LoopConfig,
    OracleTracker,
    RunResult,
    Strategy,
    TemplatePolicy,
    TrackerPort,
    UpdateEvent,
    job_for,
    run_many,
    sweep_intervals,
)
from ._metrics import (
    ReportFormat,
    emit_report,
    evaluate,
    parse_reference_rows,
    read_track_outputs,
    write_track_output,
)
from ._response import parse as parse_reply
from ._response import render
from ._rewards import RewardWeights, overall_reward, write_breakdown_table
from ._stub import StubChatServer

logger = logging.getLogger(__name__)

STUB_URL = "http://stub.invalid/v1"


@dataclass(frozen=True)
class RunManifest:
    """Written next to the outputs of every subcommand."""

    command: str
    arguments: dict[str, str]
    config: dict[str, Any]
    seed: int
    started: str
    finished: str
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    version: str = ""


@dataclass(frozen=True)
class ReplyRecord:
    """One sampled reply to score; missing values fall back to the command-line flags."""

    sample_id: str
    reply: str
    gt: BoundingBox | None = None
    pred_opt: BoundingBox | None = None
    iou1: float | None = None


def _package_version() -> str:
    try:
        return version("vltrack")
    except PackageNotFoundError:
        return "unknown"


def _now() -> str:
    return datetime.now(UTC).isoformat(timespec="seconds")


def _box(text: str) -> BoundingBox:
    try:
        values = [float(value) for value in text.split(",")]
        return BoundingBox.from_sequence(values)
    except (ValueError, ValidationFailure) as exc:
        raise argparse.ArgumentTypeError(f"expected x,y,w,h, got {text!r}") from exc


def _weights(text: str) -> tuple[float, float, float, float]:
    values = [float(value) for value in text.split(",")]
    if len(values) != 4:
        raise argparse.ArgumentTypeError("expected 4 comma-separated weights")
    return (values[0], values[1], values[2], values[3])


def _intervals(text: str) -> list[int]:
    return [int(value) for value in text.split(",")]


def _load_sequences(path: Path) -> list[SequenceAnnotation]:
    if (path / GROUNDTRUTH_FILE).exists():
        return [load_sequence(path)]
    return load_corpus(path)


class Context:
    """The resolved configuration and the bookkeeping for the run manifest."""

    def __init__(self, command: str, args: argparse.Namespace, config: HarnessConfig):
        self.command = command
        self.args = args
        self.config = config
        self.started = _now()
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []

    def manifest(self) -> RunManifest:
        return RunManifest(
            command=self.command,
            arguments={
                key: str(value)
                for key, value in sorted(vars(self.args).items())
                if key not in ("handler",)
            },
            config=dump_config(self.config),
            seed=self.args.seed,
            started=self.started,
            finished=_now(),
            inputs=[path.as_posix() for path in self.inputs],
            outputs=[path.as_posix() for path in self.outputs],
            version=_package_version(),
        )


def _manifest_path(out: Path) -> Path:
    if out.is_dir():
        return out / "manifest.json"
    return out.with_name(out.name + ".manifest.json")


def _make_refiner_client(
    kind: str, config: HarnessConfig
) -> tuple[RefinerClient, StubChatServer | None]:
    if kind == "stub":
        stub = StubChatServer()
        endpoint = replace(config.refiner.endpoint, url=STUB_URL)
        return RefinerClient(endpoint, transport=stub.transport()), stub
    return RefinerClient(config.refiner.endpoint), None


def _tracker_factory(
    kind: str, config: HarnessConfig, noise_px: float, seed: int
) -> Callable[[SequenceAnnotation], TrackerPort]:
    if kind == "remote":
        url = config.tracker.url
        if url is None:
            raise ValidationFailure("A remote tracker needs `tracker.url` or TRACKER_URL")
        return lambda _annotation: RemoteTracker(url, timeout_s=config.tracker.timeout_s)
    return lambda annotation: OracleTracker(annotation.gt_boxes, noise_px=noise_px, seed=seed)


def _loop_config(args: argparse.Namespace, config: HarnessConfig) -> LoopConfig:
    return replace(
        config.loop,
        update_interval=args.u,
        strategy=Strategy(args.strategy),
        template_policy=TemplatePolicy(args.template_policy),
        gate_threshold=args.gate_threshold,
        anchor_policy=AnchorPolicy(args.anchor_policy),
        weights=config.rewards,
    )


def cmd_eval(ctx: Context) -> None:
    args = ctx.args
    annotations = _load_sequences(args.gt_dir)
    outputs = read_track_outputs(args.pred_dir, [a.sequence_id for a in annotations])
    ctx.inputs += [args.gt_dir, args.pred_dir]

    references = []
    if args.references is not None:
        references = parse_reference_rows(args.references.read_text(encoding="utf-8"))
        ctx.inputs.append(args.references)

    report = evaluate(annotations, outputs, references)
    ctx.outputs += emit_report(report, ReportFormat(args.format), args.out)
    logger.info("pr=%.4f npr=%.4f sr=%.4f ao=%.4f", report.pr, report.npr, report.sr_auc, report.ao)


def cmd_reward(ctx: Context) -> None:
    args = ctx.args
    w_format1, w_format2, w_iou, w_judge = args.weights
    weights = RewardWeights(w_format1, w_format2, w_iou, w_judge, theta=args.theta)

    rows = []
    for record in load_jsonl(args.responses, ReplyRecord):
        gt = record.gt if record.gt is not None else args.gt
        pred_opt = record.pred_opt if record.pred_opt is not None else args.pred_opt
        iou1 = record.iou1 if record.iou1 is not None else args.iou1
        if gt is None or pred_opt is None or iou1 is None:
            raise ValidationFailure(f"{record.sample_id}: needs --gt, --pred-opt and --iou1")
        breakdown = overall_reward(parse_reply(record.reply), gt, pred_opt, iou1, weights)
        rows.append((record.sample_id, breakdown))

    ctx.inputs.append(args.responses)
    write_breakdown_table(args.out, rows)
    ctx.outputs.append(args.out)


def cmd_advantage(ctx: Context) -> None:
    args = ctx.args
    groups = normalize_groups(load_jsonl(args.groups_file, SampleGroup))
    dump_jsonl(args.out, SampleGroup, groups)
    ctx.inputs.append(args.groups_file)
    ctx.outputs.append(args.out)


def cmd_sample(ctx: Context) -> None:
    args = ctx.args
    config = ctx.config
    client, _stub = _make_refiner_client(args.refiner, config)
    request = RefinerRequest(
        template_image=args.template,
        search_image=args.search,
        initial_language=args.language,
        system_prompt=config.refiner.system_prompt,
        sampling=replace(config.refiner.sampling, temperature=config.grpo.temperature),
    )
    try:
        responses = client.sample_group(request, args.n)
    finally:
        client.close()

    records = [
        ReplyRecord(
            sample_id=f"{args.question_id}/{index}",
            reply=render(response) if args.canonical else response.raw,
        )
        for index, response in enumerate(responses)
    ]
    dump_jsonl(args.out, ReplyRecord, records)
    ctx.outputs.append(args.out)


def _write_run(out: Path, result: RunResult) -> list[Path]:
    sequence_id = result.output.sequence_id
    events_path = out / f"{sequence_id}.events.jsonl"
    dump_jsonl(events_path, UpdateEvent, result.events)
    return [write_track_output(out, result.output), events_path]


def cmd_track(ctx: Context) -> None:
    args = ctx.args
    config = ctx.config
    annotations = _load_sequences(args.sequence_dir)
    ctx.inputs.append(args.sequence_dir)
    loop_config = _loop_config(args, config)
    make_tracker = _tracker_factory(args.tracker, config, args.noise_px, args.seed)

    client, _stub = _make_refiner_client(args.refiner, config)
    refiner = ClientRefiner(client, config.refiner.system_prompt, config.refiner.sampling)
    try:
        jobs = {a.sequence_id: job_for(a, make_tracker(a)) for a in annotations}
        results = run_many(jobs, refiner, loop_config, max_workers=args.workers)
    finally:
        client.close()

    args.out.mkdir(parents=True, exist_ok=True)
    for result in results.values():
        ctx.outputs += _write_run(args.out, result)

    aborted = {key: result.failure for key, result in results.items() if not result.completed}
    if aborted:
        details = "; ".join(f"{key}: {failure}" for key, failure in sorted(aborted.items()))
        raise EndpointFailure(f"Partial output written; runs aborted: {details}")


def cmd_sweep(ctx: Context) -> None:
    args = ctx.args
    config = ctx.config
    annotations = _load_sequences(args.sequence_dir)
    ctx.inputs.append(args.sequence_dir)
    loop_config = _loop_config(args, config)
    make_tracker = _tracker_factory(args.tracker, config, args.noise_px, args.seed)

    client, _stub = _make_refiner_client(args.refiner, config)
    refiner = ClientRefiner(client, config.refiner.system_prompt, config.refiner.sampling)
    try:
        points = sweep_intervals(
            annotations, make_tracker, refiner, loop_config, args.intervals, args.workers
        )
    finally:
        client.close()

    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "sweep.tsv"
    lines = ["u\tpr\tnpr\tsr_auc\tao\trefiner_calls"]
    lines += [
        f"{p.update_interval}\t{p.report.pr!r}\t{p.report.npr!r}\t{p.report.sr_auc!r}\t"
        f"{p.report.ao!r}\t{p.refiner_calls}"
        for p in points
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    ctx.outputs.append(path)


def _datasets(corpora: Sequence[Path]) -> dict[str, list[SequenceAnnotation]]:
    names = [corpus.resolve().name for corpus in corpora]
    if len(set(names)) != len(names):
        raise ValidationFailure("Corpus directories must have distinct names")
    return {name: _load_sequences(corpus) for name, corpus in zip(names, corpora, strict=True)}


def cmd_build_sft(ctx: Context) -> None:
    args = ctx.args
    datasets = _datasets(args.corpus)
    corpus = build_sft_corpus(datasets, dict.fromkeys(datasets, args.count), args.seed)
    write_sft_samples(args.out, [sample for name in sorted(corpus) for sample in corpus[name]])
    ctx.inputs += args.corpus
    ctx.outputs.append(args.out)


def cmd_build_rl(ctx: Context) -> None:
    args = ctx.args
    datasets = _datasets(args.corpus)
    corpus = build_rl_corpus(datasets, dict.fromkeys(datasets, args.count), args.seed)
    write_rl_records(args.out, [record for name in sorted(corpus) for record in corpus[name]])
    ctx.inputs += args.corpus
    ctx.outputs.append(args.out)


def cmd_stats(ctx: Context) -> None:
    args = ctx.args
    statistics = corpus_statistics(_load_sequences(args.corpus))
    args.out.write_text(dumps(CorpusStatistics, statistics), encoding="utf-8")
    ctx.inputs.append(args.corpus)
    ctx.outputs.append(args.out)


def _add_loop_flags(parser: argparse.ArgumentParser, config: HarnessConfig) -> None:
    parser.add_argument("--sequence-dir", type=Path, required=True, help="a sequence or a corpus")
    parser.add_argument("--tracker", choices=["oracle", "remote"], default="oracle")
    parser.add_argument("--refiner", choices=["stub", "remote"], default="stub")
    parser.add_argument(
        "--u", type=int, default=config.loop.update_interval, help="update interval"
    )
    parser.add_argument(
        "--strategy", choices=[s.value for s in Strategy], default=config.loop.strategy.value
    )
    parser.add_argument(
        "--template-policy",
        choices=[p.value for p in TemplatePolicy],
        default=config.loop.template_policy.value,
    )
    parser.add_argument(
        "--anchor-policy",
        choices=[p.value for p in AnchorPolicy],
        default=config.loop.anchor_policy.value,
    )
    parser.add_argument("--gate-threshold", type=float, default=config.loop.gate_threshold)
    parser.add_argument("--noise-px", type=float, default=config.tracker.noise_px)
    parser.add_argument("--workers", type=int, default=4, help="sequences tracked at once")
    parser.add_argument("--out", type=Path, required=True, help="output directory")


def _common_parser(config: HarnessConfig) -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="YAML configuration file")
    common.add_argument("--seed", type=int, default=0, help="the seed of all randomness")
    common.add_argument(
        "-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug logging"
    )
    return common


def build_parser(config: HarnessConfig | None = None) -> argparse.ArgumentParser:
    """Builds the parser; flag defaults are taken from ``config``."""
    config = config or HarnessConfig()
    common = _common_parser(config)
    formatter = argparse.ArgumentDefaultsHelpFormatter

    parser = argparse.ArgumentParser(prog="vltrack", description=__doc__, formatter_class=formatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {_package_version()}")
    commands = parser.add_subparsers(dest="command", required=True)

    def add(
        name: str, handler: Callable[[Context], None], help_text: str
    ) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, parents=[common], help=help_text, formatter_class=formatter)
        sub.set_defaults(handler=handler)
        return sub

    sub = add("eval", cmd_eval, "evaluate tracker outputs against annotations")
    sub.add_argument("--gt-dir", type=Path, required=True)
    sub.add_argument("--pred-dir", type=Path, required=True)
    sub.add_argument("--out", type=Path, required=True, help="output directory")
    sub.add_argument("--format", choices=[f.value for f in ReportFormat], default="tabular")
    sub.add_argument("--references", type=Path, default=None, help="published results to compare")

    sub = add("reward", cmd_reward, "score sampled replies")
    sub.add_argument("--responses", type=Path, required=True, help="reply records, one per line")
    sub.add_argument("--gt", type=_box, default=None, help="x,y,w,h")
    sub.add_argument("--pred-opt", type=_box, default=None, help="x,y,w,h")
    sub.add_argument("--iou1", type=float, default=None)
    weights = config.rewards
    sub.add_argument(
        "--weights",
        type=_weights,
        default=(weights.w_format1, weights.w_format2, weights.w_iou, weights.w_judge),
        help="format1,format2,iou,judge",
    )
    sub.add_argument("--theta", type=float, default=weights.theta)
    sub.add_argument("--out", type=Path, required=True)

    sub = add("advantage", cmd_advantage, "normalize rewards within groups")
    sub.add_argument("--groups-file", type=Path, required=True)
    sub.add_argument("--out", type=Path, required=True)

    sub = add("sample", cmd_sample, "sample a group of refiner replies")
    sub.add_argument("--template", type=Path, required=True)
    sub.add_argument("--search", type=Path, required=True)
    sub.add_argument("--language", required=True)
    sub.add_argument("--question-id", default="q0")
    sub.add_argument("--n", type=int, default=config.grpo.group_size)
    sub.add_argument("--refiner", choices=["stub", "remote"], default="remote")
    sub.add_argument("--canonical", action="store_true", help="store re-rendered replies")
    sub.add_argument("--out", type=Path, required=True)

    sub = add("track", cmd_track, "track sequences with periodic description updates")
    _add_loop_flags(sub, config)

    sub = add("sweep", cmd_sweep, "compare update intervals")
    _add_loop_flags(sub, config)
    sub.add_argument("--intervals", type=_intervals, default=list(UPDATE_INTERVAL_GRID))

    for name, handler in (("build-sft", cmd_build_sft), ("build-rl", cmd_build_rl)):
        sub = add(name, handler, f"sample the {name.removeprefix('build-')} training records")
        sub.add_argument("--corpus", type=Path, action="extend", nargs="+", required=True)
        sub.add_argument("--count", type=int, required=True, help="pairs per corpus")
        sub.add_argument("--out", type=Path, required=True)

    sub = add("stats", cmd_stats, "summarize a corpus")
    sub.add_argument("--corpus", type=Path, required=True)
    sub.add_argument("--out", type=Path, required=True)

    return parser


def _configure_logging(verbosity: int) -> None:
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbosity, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)

    # The configuration file provides the flag defaults, so it is read first.
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path, default=None)
    known, _ = pre.parse_known_args(argv)

    try:
        config = resolve_config(known.config)
    except ValidationFailure as exc:
        _configure_logging(0)
        logger.error("%s", exc)  # noqa: TRY400
        return 2

    args = build_parser(config).parse_args(argv)
    _configure_logging(args.verbose)
    ctx = Context(args.command, args, config)

    try:
        args.handler(ctx)
    except ValidationFailure as exc:
        logger.error("%s", exc)  # noqa: TRY400
        return 2
    except EndpointFailure as exc:
        logger.error("%s", exc)  # noqa: TRY400
        return 3
    except OSError as exc:
        logger.error("%s", exc)  # noqa: TRY400
        return 2
    except Exception:
        logger.exception("Internal error")
        return 1
    finally:
        out = getattr(args, "out", None)
        if out is not None and out.exists():
            _manifest_path(out).write_text(dumps(RunManifest, ctx.manifest()), encoding="utf-8")

    return 0
