"""Chat-completions wire client, stub client and bounded-concurrency helpers."""

from __future__ import annotations

import base64
import logging
import mimetypes
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Sequence, TypeVar

import httpx

from lingflow.errors import EmptyReply, NonRetriableStatus, SchemaError, TransportError
from lingflow.trace import iter_jsonl

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


@dataclass
class ChatRequest:
    model: str
    messages: list[dict[str, Any]]
    temperature: float = 1.0
    max_tokens: int | None = None
    # routing key for stub replies; never sent over the wire
    query_id: str | None = None

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("a chat request needs at least one message")

    def payload(self) -> dict[str, Any]:
        body: dict[str, Any] = {"model": self.model, "messages": self.messages, "temperature": self.temperature}
        if self.max_tokens is not None:
            body["max_tokens"] = self.max_tokens
        return body


@dataclass
class ChatReply:
    content: str
    latency_seconds: float


def _image_part(ref: str, inline: bool) -> dict[str, Any]:
    url = ref
    if inline and os.path.isfile(ref):
        mime = mimetypes.guess_type(ref)[0] or "image/png"
        url = f"data:{mime};base64," + base64.b64encode(Path(ref).read_bytes()).decode("ascii")
    return {"type": "image_url", "image_url": {"url": url}}


def build_messages(system: str | None, user: str, images: Sequence[str] = (), inline_images: bool = False) -> list[dict]:
    messages = []
    if system:
        messages.append({"role": "system", "content": system})
    if images:
        parts: list[dict[str, Any]] = [{"type": "text", "text": user}]
        parts.extend(_image_part(ref, inline_images) for ref in images)
        messages.append({"role": "user", "content": parts})
    else:
        messages.append({"role": "user", "content": user})
    return messages


def _extract_content(data: Any) -> str:
    try:
        content = data["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        return ""
    if isinstance(content, list):
        content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
    return content or ""


class HTTPChatClient:
    """POSTs to ``<endpoint>/chat/completions`` with exponential backoff on transient failures."""

    def __init__(self, endpoint: str, api_key: str | None = None, *, timeout: float = 60.0,
                 max_retries: int = 3, backoff: float = 0.5, max_backoff: float = 8.0,
                 transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep,
                 clock: Callable[[], float] = time.perf_counter):
        if timeout <= 0:
            raise ValueError("timeout must be positive")
        self.url = endpoint.rstrip("/") + "/chat/completions"
        self.max_retries = max_retries
        self.backoff = backoff
        self.max_backoff = max_backoff
        self._sleep = sleep
        self._clock = clock
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._http = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def close(self) -> None:
        self._http.close()

    def generate(self, request: ChatRequest) -> ChatReply:
        start = self._clock()
        delay = self.backoff
        last_error = ""
        for attempt in range(self.max_retries + 1):
            if attempt:
                self._sleep(delay)
                delay = min(delay * 2, self.max_backoff)
            try:
                resp = self._http.post(self.url, json=request.payload())
            except httpx.TransportError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                logger.warning("attempt %d/%d failed: %s", attempt + 1, self.max_retries + 1, last_error)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                logger.warning("attempt %d/%d got %s", attempt + 1, self.max_retries + 1, last_error)
                continue
            if resp.status_code >= 400:
                raise NonRetriableStatus(resp.status_code, resp.text)
            try:
                content = _extract_content(resp.json())
            except ValueError:
                content = ""
            if not content:
                raise EmptyReply(f"no content in reply from {self.url}")
            return ChatReply(content, self._clock() - start)
        raise TransportError(f"gave up after {self.max_retries + 1} attempts: {last_error}")


class SimulatedClock:
    """Per-thread clock that only moves when a stub reply advances it."""

    def __init__(self) -> None:
        self._local = threading.local()

    def __call__(self) -> float:
        return getattr(self._local, "now", 0.0)

    def advance(self, seconds: float) -> None:
        self._local.now = self() + seconds


class StubClient:
    """Replies from a fixture keyed by ``ChatRequest.query_id``, else from ``fallback``."""

    def __init__(self, replies: dict[str, str] | None = None,
                 fallback: Callable[[ChatRequest], str] | None = None, *,
                 latency: float = 0.25, latencies: dict[str, float] | None = None,
                 clock: SimulatedClock | None = None):
        self.replies = dict(replies or {})
        self.fallback = fallback
        self.latency = latency
        self.latencies = dict(latencies or {})
        self.clock = clock
        self.calls = 0
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path, **kwargs) -> StubClient:
        replies, latencies = {}, {}
        for line_no, obj in iter_jsonl(path):
            if not isinstance(obj, dict) or "query_id" not in obj or "reply" not in obj:
                raise SchemaError(f"{path}:{line_no}: stub lines need query_id and reply")
            replies[str(obj["query_id"])] = str(obj["reply"])
            if "latency_seconds" in obj:
                latencies[str(obj["query_id"])] = float(obj["latency_seconds"])
        return cls(replies, latencies=latencies, **kwargs)

    def generate(self, request: ChatRequest) -> ChatReply:
        with self._lock:
            self.calls += 1
        start = time.perf_counter()
        if request.query_id is not None and request.query_id in self.replies:
            content = self.replies[request.query_id]
        elif self.fallback is not None:
            content = self.fallback(request)
        else:
            raise EmptyReply(f"stub has no reply for {request.query_id!r}")
        if self.clock is not None:
            latency = self.latencies.get(request.query_id or "", self.latency)
            self.clock.advance(latency)
        else:
            latency = max(time.perf_counter() - start, 1e-9)
        return ChatReply(content, latency)

    def close(self) -> None:
        pass


_JUDGE_FIELDS = re.compile(r"Reference Answer: (.*)\nGenerated Answer: (.*)\Z", re.DOTALL)


def exact_match_judge(request: ChatRequest) -> str:
    """Stub judge: reads the rendered judge prompt and answers by normalized exact match."""
    from lingflow.reward import answers_match

    user = request.messages[-1]["content"]
    if isinstance(user, list):
        user = "".join(p.get("text", "") for p in user)
    m = _JUDGE_FIELDS.search(user)
    ok = bool(m) and answers_match(m.group(2), m.group(1))
    return f"<judge>{ok}</judge>"


def bounded_map(fn: Callable[[T], R], items: Iterable[T], max_in_flight: int = 4) -> Iterator[R]:
    """Apply ``fn`` with at most ``max_in_flight`` concurrent calls; results keep input order."""
    if max_in_flight < 1:
        raise ValueError("max_in_flight must be >= 1")
    if max_in_flight == 1:
        for item in items:
            yield fn(item)
        return
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        yield from pool.map(fn, items)
