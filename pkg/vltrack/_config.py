import logging
import os
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import yaml

from ._client import DEFAULT_SYSTEM_PROMPT, EndpointConfig, SamplingParams
from ._codec import CODEC, RecordError
from ._errors import ValidationFailure
from ._grpo import DEFAULT_GROUP_SIZE
from ._loop import LoopConfig
from ._rewards import RewardWeights

logger = logging.getLogger(__name__)

REFINER_URL_ENV = "REFINER_URL"
REFINER_KEY_ENV = "REFINER_KEY"
TRACKER_URL_ENV = "TRACKER_URL"


class ConfigError(ValidationFailure):
    """Raised for unreadable or invalid configuration files."""


@dataclass(frozen=True)
class GrpoSettings:
    group_size: int = DEFAULT_GROUP_SIZE
    temperature: float = 1.0
    """Sampling temperature for the replies of a group."""


@dataclass(frozen=True)
class RefinerSettings:
    endpoint: EndpointConfig = field(default_factory=EndpointConfig)
    system_prompt: str = DEFAULT_SYSTEM_PROMPT
    sampling: SamplingParams = field(default_factory=SamplingParams)


@dataclass(frozen=True)
class TrackerSettings:
    url: str | None = None
    """Address of a remote tracker; ``None`` means the oracle tracker is used."""

    timeout_s: float = 30.0
    noise_px: float = 0.0


@dataclass(frozen=True)
class HarnessConfig:
    rewards: RewardWeights = field(default_factory=RewardWeights)
    grpo: GrpoSettings = field(default_factory=GrpoSettings)
    loop: LoopConfig = field(default_factory=LoopConfig)
    refiner: RefinerSettings = field(default_factory=RefinerSettings)
    tracker: TrackerSettings = field(default_factory=TrackerSettings)


def parse_config(data: Any) -> HarnessConfig:
    """Decodes a parsed configuration document; missing sections and keys take defaults."""
    if data is None:
        return HarnessConfig()
    try:
        return CODEC.decode(HarnessConfig, data)
    except RecordError as exc:
        raise ConfigError(f"Invalid configuration:\n{exc}") from exc


def load_config(path: Path) -> HarnessConfig:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"Cannot read configuration {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"Malformed YAML in {path}: {exc}") from exc
    return parse_config(data)


def apply_environment(
    config: HarnessConfig, environ: Mapping[str, str] = os.environ
) -> HarnessConfig:
    """Overrides endpoint addresses and the refiner key from the environment."""
    endpoint = config.refiner.endpoint
    if REFINER_URL_ENV in environ:
        endpoint = replace(endpoint, url=environ[REFINER_URL_ENV])
    if REFINER_KEY_ENV in environ:
        endpoint = replace(endpoint, key=environ[REFINER_KEY_ENV])

    tracker = config.tracker
    if TRACKER_URL_ENV in environ:
        tracker = replace(tracker, url=environ[TRACKER_URL_ENV])

    if endpoint is not config.refiner.endpoint or tracker is not config.tracker:
        logger.debug("Applied endpoint overrides from the environment")
    return replace(config, refiner=replace(config.refiner, endpoint=endpoint), tracker=tracker)


def resolve_config(path: Path | None, environ: Mapping[str, str] = os.environ) -> HarnessConfig:
    """Defaults, then the file (if any), then the environment. Flags are applied by the caller."""
    config = load_config(path) if path is not None else HarnessConfig()
    return apply_environment(config, environ)


def dump_config(config: HarnessConfig) -> dict[str, Any]:
    """The configuration as plain data, with the refiner key masked."""
    data: dict[str, Any] = CODEC.encode(HarnessConfig, config)
    data["refiner"]["endpoint"]["key"] = "***"
    return data
