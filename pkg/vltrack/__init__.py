from ._client import (
    DEFAULT_SYSTEM_PROMPT,
    ClientRefiner,
    EndpointConfig,
    EndpointError,
    RefinerClient,
    RefinerError,
    RefinerRequest,
    RefinerUnavailable,
    RemoteTracker,
    SamplingParams,
    build_payload,
)
from ._codec import (
    RecordError,
    dump_jsonl,
    dumps,
    load_jsonl,
    loads,
)
from ._config import (
    ConfigError,
    GrpoSettings,
    HarnessConfig,
    RefinerSettings,
    TrackerSettings,
    load_config,
    resolve_config,
)
from ._dataset import (
    RL_REFERENCE_COUNTS,
    SFT_REFERENCE_COUNTS,
    AnnotationLoadError,
    Attribute,
    CorpusStatistics,
    FrameRef,
    InvalidReasoning,
    NotEnoughSamples,
    RlRecord,
    SequenceAnnotation,
    SftRecord,
    SftSample,
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
from ._errors import (
    EndpointFailure,
    InvalidArgument,
    ValidationFailure,
    VltrackError,
)
from ._geometry import (
    BoundingBox,
    DegenerateGroundTruth,
    InvalidGeometry,
    center_distance,
    iou,
    normalized_center_distance,
)
from ._grpo import (
    GroupTooSmall,
    KLMode,
    MissingDistribution,
    PolicyStep,
    SampleGroup,
    SupportMismatch,
    group_advantages,
    kl_categorical,
    kl_sampled_estimate,
    normalize_groups,
    objective_value,
    score_group,
)
from ._loop import (
    UPDATE_INTERVAL_GRID,
    AnchorPolicy,
    LoopConfig,
    LoopJob,
    OracleTracker,
    RefinerPort,
    RunResult,
    Strategy,
    SweepPoint,
    TemplatePolicy,
    TrackResult,
    TrackerFailure,
    TrackerPort,
    UpdateEvent,
    preliminary_gate,
    run,
    run_many,
    sweep_intervals,
)
from ._metrics import (
    AttributeScores,
    EmptySequence,
    EvalReport,
    EvaluationError,
    ReferenceRow,
    ReportFormat,
    SequenceMetrics,
    TrackOutput,
    aggregate,
    emit_report,
    evaluate,
    evaluate_sequence,
    parse_reference_rows,
    read_track_outputs,
    write_track_output,
)
from ._response import (
    CoTResponse,
    Decision,
    FormatLevel,
    format_rewards,
    parse,
    render,
)
from ._rewards import (
    DEFAULT_THETA,
    RewardBreakdown,
    RewardComponent,
    RewardSummary,
    RewardWeights,
    iou_reward,
    judge_reward,
    overall_reward,
    read_breakdown_table,
    summarize,
    write_breakdown_table,
)
from ._stub import (
    TIMEOUT,
    StubChatServer,
)

__all__ = [
    "ClientRefiner",
    "DEFAULT_SYSTEM_PROMPT",
    "EndpointConfig",
    "EndpointError",
    "RefinerClient",
    "RefinerError",
    "RefinerRequest",
    "RefinerUnavailable",
    "RemoteTracker",
    "SamplingParams",
    "build_payload",
    "RecordError",
    "dump_jsonl",
    "dumps",
    "load_jsonl",
    "loads",
    "ConfigError",
    "GrpoSettings",
    "HarnessConfig",
    "RefinerSettings",
    "TrackerSettings",
    "load_config",
    "resolve_config",
    "RL_REFERENCE_COUNTS",
    "SFT_REFERENCE_COUNTS",
    "AnnotationLoadError",
    "Attribute",
    "CorpusStatistics",
    "FrameRef",
    "InvalidReasoning",
    "NotEnoughSamples",
    "RlRecord",
    "SequenceAnnotation",
    "SftRecord",
    "SftSample",
    "attach_reasoning",
    "build_rl_corpus",
    "build_rl_samples",
    "build_sft_corpus",
    "build_sft_samples",
    "corpus_statistics",
    "load_corpus",
    "load_sequence",
    "read_rl_records",
    "read_sft_records",
    "read_sft_samples",
    "save_sequence",
    "write_rl_records",
    "write_sft_records",
    "write_sft_samples",
    "EndpointFailure",
    "InvalidArgument",
    "ValidationFailure",
    "VltrackError",
    "BoundingBox",
    "DegenerateGroundTruth",
    "InvalidGeometry",
    "center_distance",
    "iou",
    "normalized_center_distance",
    "GroupTooSmall",
    "KLMode",
    "MissingDistribution",
    "PolicyStep",
    "SampleGroup",
    "SupportMismatch",
    "group_advantages",
    "kl_categorical",
    "kl_sampled_estimate",
    "normalize_groups",
    "objective_value",
    "score_group",
    "UPDATE_INTERVAL_GRID",
    "AnchorPolicy",
    "LoopConfig",
    "LoopJob",
    "OracleTracker",
    "RefinerPort",
    "RunResult",
    "Strategy",
    "SweepPoint",
    "TemplatePolicy",
    "TrackerFailure",
    "TrackerPort",
    "TrackResult",
    "UpdateEvent",
    "preliminary_gate",
    "run",
    "run_many",
    "sweep_intervals",
    "AttributeScores",
    "EmptySequence",
    "EvalReport",
    "EvaluationError",
    "ReferenceRow",
    "ReportFormat",
    "SequenceMetrics",
    "TrackOutput",
    "aggregate",
    "emit_report",
    "evaluate",
    "evaluate_sequence",
    "parse_reference_rows",
    "read_track_outputs",
    "write_track_output",
    "CoTResponse",
    "Decision",
    "FormatLevel",
    "format_rewards",
    "parse",
    "render",
    "DEFAULT_THETA",
    "RewardBreakdown",
    "RewardComponent",
    "RewardSummary",
    "RewardWeights",
    "iou_reward",
    "judge_reward",
    "overall_reward",
    "read_breakdown_table",
    "summarize",
    "write_breakdown_table",
    "TIMEOUT",
    "StubChatServer",
]
