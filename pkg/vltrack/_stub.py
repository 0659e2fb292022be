import json
import threading
from collections import deque
from collections.abc import Iterable
from typing import Any

import httpx

DEFAULT_REPLY = (
    "<think>The target in the search frame matches the description.</think>"
    "<d>no</d>"
    "<answer>The description still fits.</answer>"
)
"""A well-formed reply that keeps the current description."""


class Timeout:
    """A scripted reply that makes the exchange time out."""


TIMEOUT = Timeout()

StubReply = str | int | Timeout
"""Reply text (answered with status 200), an error status, or :py:data:`TIMEOUT`."""


class StubChatServer:
    """
    An in-process chat-completions endpoint for tests and offline runs.

    Scripted replies are served in order, then ``default`` is served for every
    further request. Every request body is recorded.
    """

    def __init__(self, replies: Iterable[StubReply] = (), default: StubReply = DEFAULT_REPLY):
        self._replies = deque(replies)
        self._default = default
        self._lock = threading.Lock()
        self.requests: list[dict[str, Any]] = []

    def transport(self) -> httpx.MockTransport:
        return httpx.MockTransport(self._handle)

    def script(self, *replies: StubReply) -> None:
        with self._lock:
            self._replies.extend(replies)

    @property
    def calls(self) -> int:
        return len(self.requests)

    def _next_reply(self, body: dict[str, Any]) -> StubReply:
        with self._lock:
            self.requests.append(body)
            return self._replies.popleft() if self._replies else self._default

    def _handle(self, request: httpx.Request) -> httpx.Response:
        if request.method != "POST" or not request.url.path.endswith("/chat/completions"):
            return httpx.Response(404, json={"error": {"message": "not found"}})

        body = json.loads(request.content)
        reply = self._next_reply(body)

        if isinstance(reply, Timeout):
            raise httpx.ReadTimeout("stub timeout", request=request)
        if isinstance(reply, int):
            return httpx.Response(reply, json={"error": {"message": f"stub status {reply}"}})

        return httpx.Response(
            200,
            json={
                "id": f"stub-{self.calls}",
                "object": "chat.completion",
                "created": 0,
                "model": body.get("model", ""),
                "choices": [
                    {
                        "index": 0,
                        "message": {"role": "assistant", "content": reply},
                        "finish_reason": "stop",
                    }
                ],
                "usage": {"prompt_tokens": 0, "completion_tokens": 0, "total_tokens": 0},
            },
        )

    def user_texts(self) -> list[str]:
        """The instruction text of every recorded request, in order."""
        texts = []
        for body in self.requests:
            user = body["messages"][-1]["content"]
            texts.append(next(part["text"] for part in user if part["type"] == "text"))
        return texts
