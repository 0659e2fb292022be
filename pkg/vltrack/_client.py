import base64
import logging
import mimetypes
import threading
import time
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import httpx
import openai
from tenacity import (
    Retrying,
    before_sleep_log,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

from ._codec import CODEC, RecordError
from ._dataset import FrameRef
from ._errors import EndpointFailure, InvalidArgument
from ._geometry import BoundingBox
from ._loop import TrackResult, TrackerFailure
from ._response import CoTResponse, parse

logger = logging.getLogger(__name__)

DEFAULT_SYSTEM_PROMPT = """\
You help a visual object tracker keep the description of its target up to date.
You are shown two images: the first is a template frame in which the target is known,
the second is the current search frame. You are also given the current description of
the target.

First describe the target as it appears in the template frame, then find it in the search
frame and compare its appearance, position and surroundings with the description.
Decide whether the description still identifies the target in the search frame.

Reply in exactly this form and nothing else:
<think>your step-by-step comparison</think>
<d>yes if the description should be replaced, otherwise no</d>
<answer>the description to use from now on, as one sentence</answer>
"""
"""The refiner's default system prompt; configurable, as the prompt is data."""

USER_INSTRUCTION = (
    "The first image is the template frame and the second image is the search frame. "
    'The current description of the target is: "{language}". '
    "Answer with <think>, <d> and <answer> as instructed."
)

_EXCERPT_LENGTH = 200


class RefinerError(EndpointFailure):
    """Base class for failures of the refiner endpoint."""


class EndpointError(RefinerError):
    """Raised when the endpoint answers with a non-retryable error status."""

    def __init__(self, status: int, body: str):
        excerpt = body[:_EXCERPT_LENGTH]
        super().__init__(f"Endpoint returned status {status}: {excerpt}")
        self.status = status
        self.body_excerpt = excerpt


class RefinerUnavailable(RefinerError):
    """Raised when the endpoint keeps timing out or failing after all attempts."""


# Failures worth another attempt
_TRANSIENT = (openai.APIConnectionError, openai.InternalServerError)


@dataclass(frozen=True)
class EndpointConfig:
    url: str = "http://localhost:8000/v1"
    key: str = "EMPTY"
    model: str = "refiner"
    timeout_s: float = 60.0
    attempts: int = 3
    backoff_base_s: float = 0.5
    """Delay before the first retry; it doubles for every further one."""

    max_in_flight: int = 4
    inline_images: bool = False
    """Send images as base64 data URIs instead of ``file://`` URIs."""

    def __post_init__(self) -> None:
        if self.attempts < 1:
            raise InvalidArgument(f"`attempts` must be at least 1, got {self.attempts}")
        if self.max_in_flight < 1:
            raise InvalidArgument(f"`max_in_flight` must be at least 1, got {self.max_in_flight}")
        if self.timeout_s <= 0 or self.backoff_base_s < 0:
            raise InvalidArgument("Timeouts must be positive and backoff non-negative")


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.0
    max_tokens: int = 1024

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise InvalidArgument(f"`temperature` must be non-negative, got {self.temperature}")
        if self.max_tokens < 1:
            raise InvalidArgument(f"`max_tokens` must be positive, got {self.max_tokens}")


ImageRef = Path | str
"""A frame on disk, or an already formed URI (``http(s)://``, ``file://``, ``data:``)."""


@dataclass(frozen=True)
class RefinerRequest:
    template_image: ImageRef
    search_image: ImageRef
    initial_language: str
    system_prompt: str = DEFAULT_SYSTEM_PROMPT
    sampling: SamplingParams = field(default_factory=SamplingParams)

    def __post_init__(self) -> None:
        for name in ("template_image", "search_image", "initial_language", "system_prompt"):
            if not str(getattr(self, name)).strip():
                raise InvalidArgument(f"`{name}` must not be empty")


def _is_uri(image: str) -> bool:
    return image.startswith(("http://", "https://", "file://", "data:"))


def image_url(image: ImageRef, *, inline: bool) -> str:
    if isinstance(image, str) and _is_uri(image):
        return image
    path = Path(image)
    if not inline:
        return path.resolve().as_uri()
    mime, _ = mimetypes.guess_type(path.name)
    encoded = base64.b64encode(path.read_bytes()).decode("ascii")
    return f"data:{mime or 'image/jpeg'};base64,{encoded}"


def build_payload(
    request: RefinerRequest, model: str, *, inline_images: bool = False
) -> dict[str, Any]:
    """
    Composes the chat-completions request body: the system prompt, then one user turn
    with the template image, the search image and the instruction, in that order.
    """
    template_url = image_url(request.template_image, inline=inline_images)
    search_url = image_url(request.search_image, inline=inline_images)
    instruction = USER_INSTRUCTION.format(language=request.initial_language)
    return {
        "model": model,
        "messages": [
            {"role": "system", "content": request.system_prompt},
            {
                "role": "user",
                "content": [
                    {
                        "type": "image_url",
                        "image_url": {"url": template_url},
                    },
                    {
                        "type": "image_url",
                        "image_url": {"url": search_url},
                    },
                    {"type": "text", "text": instruction},
                ],
            },
        ],
        "temperature": request.sampling.temperature,
        "max_tokens": request.sampling.max_tokens,
    }


class RefinerClient:
    """
    A chat-completions client for the refiner. Safe to share between threads;
    at most ``max_in_flight`` exchanges run at once.
    """

    def __init__(
        self,
        config: EndpointConfig,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self._config = config
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(config.max_in_flight)
        self._openai = openai.OpenAI(
            base_url=config.url,
            api_key=config.key,
            timeout=config.timeout_s,
            max_retries=0,  # retried below
            http_client=httpx.Client(transport=transport) if transport is not None else None,
        )

    @property
    def config(self) -> EndpointConfig:
        return self._config

    def _exchange(self, payload: dict[str, Any]) -> str:
        with self._slots:
            completion = self._openai.chat.completions.create(**payload)
        if not completion.choices:
            return ""
        return completion.choices[0].message.content or ""

    def refine(self, request: RefinerRequest) -> CoTResponse:
        """
        Sends one request and parses the reply. Timeouts, connection errors and 5xx statuses
        are retried with exponential backoff; a reply that cannot be parsed is returned
        as a malformed response rather than raised. Every other failure raises a
        :py:class:`RefinerError`.
        """
        try:
            payload = build_payload(
                request, self._config.model, inline_images=self._config.inline_images
            )
        except OSError as exc:
            raise RefinerError(f"Cannot read image: {exc}") from exc

        retrying = Retrying(
            stop=stop_after_attempt(self._config.attempts),
            wait=wait_exponential(multiplier=self._config.backoff_base_s),
            retry=retry_if_exception_type(_TRANSIENT),
            before_sleep=before_sleep_log(logger, logging.WARNING),
            sleep=self._sleep,
            reraise=True,
        )
        try:
            text = retrying(self._exchange, payload)
        except _TRANSIENT as exc:
            raise RefinerUnavailable(
                f"Refiner unavailable after {self._config.attempts} attempts: {exc}"
            ) from exc
        except openai.APIStatusError as exc:
            raise EndpointError(exc.status_code, exc.response.text) from exc
        except openai.APIError as exc:
            raise RefinerError(f"Refiner request failed: {exc}") from exc
        return parse(text)

    def sample_group(self, request: RefinerRequest, n: int) -> list[CoTResponse]:
        """
        Sends ``n`` independent requests, in parallel up to the in-flight limit.
        Failed calls are dropped with a warning; the order of the rest is preserved.
        If every call fails, the first failure is raised.
        """
        if n < 1:
            raise InvalidArgument(f"`n` must be at least 1, got {n}")

        with ThreadPoolExecutor(max_workers=min(n, self._config.max_in_flight)) as executor:
            futures = [executor.submit(self.refine, request) for _ in range(n)]

        responses = []
        failures: list[RefinerError] = []
        for index, future in enumerate(futures):
            try:
                responses.append(future.result())
            except RefinerError as exc:  # noqa: PERF203
                logger.warning("Sample %d of %d failed: %s", index + 1, n, exc)
                failures.append(exc)

        if not responses:
            raise failures[0]
        return responses

    def close(self) -> None:
        self._openai.close()


class ClientRefiner:
    """Adapts :py:class:`RefinerClient` to the tracking loop's refiner port."""

    def __init__(
        self,
        client: RefinerClient,
        system_prompt: str = DEFAULT_SYSTEM_PROMPT,
        sampling: SamplingParams | None = None,
    ):
        self._client = client
        self._system_prompt = system_prompt
        self._sampling = sampling or SamplingParams()

    def refine(self, template: FrameRef, search: FrameRef, language: str) -> CoTResponse:
        request = RefinerRequest(
            template_image=template.path,
            search_image=search.path,
            initial_language=language,
            system_prompt=self._system_prompt,
            sampling=self._sampling,
        )
        return self._client.refine(request)


class RemoteTracker:
    """
    A tracker behind an HTTP endpoint. ``POST /initialize`` takes the first frame, its box
    and the description; ``POST /track`` takes the template frames, the search frame and the
    description and answers ``{"box": [x, y, w, h], "confidence": c}``.
    """

    def __init__(
        self,
        url: str,
        timeout_s: float = 30.0,
        transport: httpx.BaseTransport | None = None,
    ):
        self._http = httpx.Client(base_url=url, timeout=timeout_s, transport=transport)

    def _post(self, route: str, body: dict[str, Any]) -> Any:
        try:
            response = self._http.post(route, json=body)
            response.raise_for_status()
            return response.json()
        except httpx.HTTPStatusError as exc:
            raise TrackerFailure(
                f"Tracker returned status {exc.response.status_code}: "
                f"{exc.response.text[:_EXCERPT_LENGTH]}"
            ) from exc
        except httpx.HTTPError as exc:
            raise TrackerFailure(f"Tracker request to {route} failed: {exc}") from exc
        except ValueError as exc:
            raise TrackerFailure(f"Tracker sent a malformed body: {exc}") from exc

    def initialize(self, frame: FrameRef, box: BoundingBox, language: str) -> None:
        self._post(
            "/initialize",
            {
                "frame": frame.path.as_posix(),
                "box": CODEC.encode(BoundingBox, box),
                "language": language,
            },
        )

    def track(
        self, templates: Sequence[FrameRef], search: FrameRef, language: str
    ) -> TrackResult:
        body = self._post(
            "/track",
            {
                "templates": [template.path.as_posix() for template in templates],
                "search": search.path.as_posix(),
                "language": language,
            },
        )
        try:
            result = CODEC.decode(TrackResult, body)
        except RecordError as exc:
            raise TrackerFailure(f"Tracker sent a malformed result:\n{exc}") from exc
        if not 0 <= result.confidence <= 1:
            raise TrackerFailure(f"Tracker confidence {result.confidence} is outside of [0, 1]")
        return result

    def close(self) -> None:
        self._http.close()
