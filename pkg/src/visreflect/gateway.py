"""Chat-completion clients for the forging pipeline.

``HttpChatClient`` talks to any OpenAI-compatible ``/chat/completions``
endpoint; ``ScriptedClient`` replays canned replies for offline runs. Both
share the retry loop in ``ChatClient.complete``.
"""

from __future__ import annotations

import base64
import logging
import mimetypes
import os
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Literal, Sequence

import httpx

log = logging.getLogger(__name__)

Role = Literal["system", "user", "assistant"]


class GatewayError(Exception):
    pass


class TransportError(GatewayError):
    """Retry budget exhausted on transient failures."""


class RequestError(GatewayError):
    """Non-retryable rejection (4xx other than 429)."""

    def __init__(self, status: int, message: str):
        super().__init__(f"HTTP {status}: {message}")
        self.status = status


class ScriptExhausted(GatewayError):
    pass


class _Transient(Exception):
    pass


@dataclass(frozen=True)
class ChatMessage:
    role: Role
    text: str
    image_ref: str | None = None

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown role {self.role!r}")
        if self.image_ref is not None and self.role != "user":
            raise ValueError("image_ref is only allowed on user messages")


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.7
    max_tokens: int = 2048

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass(frozen=True)
class ChatResponse:
    text: str
    finish_reason: Literal["stop", "length", "error"] = "stop"
    usage: Usage = field(default_factory=Usage)

    def __post_init__(self) -> None:
        if self.finish_reason == "stop" and not self.text:
            raise ValueError("a stopped completion must carry text")


def backoff_delays(attempts: int, base: float, cap: float, rng: random.Random) -> list[float]:
    """Delays before retry 1..attempts-1: exponential with equal jitter, never decreasing."""
    delays = []
    prev = 0.0
    for k in range(attempts - 1):
        ceiling = min(cap, base * 2.0**k)
        d = max(prev, ceiling / 2.0 + rng.uniform(0.0, ceiling / 2.0))
        delays.append(d)
        prev = d
    return delays


class ChatClient:
    """Retry loop around a single-shot ``_send``; subclasses implement the transport."""

    model: str = ""

    def __init__(
        self,
        max_attempts: int = 3,
        backoff_base: float = 0.5,
        backoff_cap: float = 8.0,
        max_concurrency: int = 4,
        sleep: Callable[[float], None] = time.sleep,
        seed: int | None = None,
    ):
        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self._sleep = sleep
        self._rng = random.Random(seed)
        self._slots = threading.BoundedSemaphore(max_concurrency)
        self.attempts_made = 0

    def _send(self, request: ChatRequest) -> ChatResponse:
        raise NotImplementedError

    def complete(self, request: ChatRequest) -> ChatResponse:
        delays = backoff_delays(self.max_attempts, self.backoff_base, self.backoff_cap, self._rng)
        last: Exception | None = None
        for attempt in range(self.max_attempts):
            if attempt:
                self._sleep(delays[attempt - 1])
            with self._slots:
                self.attempts_made += 1
                try:
                    return self._send(request)
                except _Transient as exc:
                    last = exc
                    log.debug("attempt %d/%d failed: %s", attempt + 1, self.max_attempts, exc)
        raise TransportError(f"gave up after {self.max_attempts} attempts: {last}")


def complete(client: ChatClient, request: ChatRequest) -> ChatResponse:
    return client.complete(request)


# --- HTTP ------------------------------------------------------------------

RETRYABLE_STATUS = {429, 500, 502, 503, 504}


def encode_image(image_ref: str, encoding: Literal["url", "base64"]) -> str:
    if image_ref.startswith(("http://", "https://", "data:")) or encoding == "url":
        return image_ref
    path = Path(image_ref)
    mime = mimetypes.guess_type(path.name)[0] or "image/png"
    return f"data:{mime};base64," + base64.b64encode(path.read_bytes()).decode("ascii")


def request_payload(request: ChatRequest, encoding: Literal["url", "base64"] = "url") -> dict:
    messages = []
    for m in request.messages:
        if m.image_ref is None:
            messages.append({"role": m.role, "content": m.text})
        else:
            messages.append(
                {
                    "role": m.role,
                    "content": [
                        {"type": "image_url", "image_url": {"url": encode_image(m.image_ref, encoding)}},
                        {"type": "text", "text": m.text},
                    ],
                }
            )
    return {
        "model": request.model,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    }


def _parse_completion(body: dict) -> ChatResponse:
    choice = body["choices"][0]
    text = choice["message"].get("content") or ""
    reason = choice.get("finish_reason") or "stop"
    if reason not in ("stop", "length"):
        reason = "error"
    if reason == "stop" and not text:
        reason = "error"
    usage = body.get("usage") or {}
    return ChatResponse(
        text=text,
        finish_reason=reason,
        usage=Usage(usage.get("prompt_tokens", 0), usage.get("completion_tokens", 0)),
    )


class HttpChatClient(ChatClient):
    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str,
        image_encoding: Literal["url", "base64"] = "url",
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
        **retry,
    ):
        super().__init__(**retry)
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.image_encoding = image_encoding
        self._http = httpx.Client(
            timeout=timeout,
            transport=transport,
            headers={"Authorization": f"Bearer {api_key}"},
        )

    @classmethod
    def from_env(cls, base_url: str, model: str, env_var: str, **kwargs) -> "HttpChatClient":
        key = os.environ.get(env_var, "").strip()
        if not key:
            raise GatewayError(f"missing credential: set {env_var}")
        return cls(base_url, model, key, **kwargs)

    def _send(self, request: ChatRequest) -> ChatResponse:
        try:
            resp = self._http.post(
                f"{self.base_url}/chat/completions",
                json=request_payload(request, self.image_encoding),
            )
        except (httpx.TimeoutException, httpx.NetworkError) as exc:
            raise _Transient(repr(exc)) from exc
        if resp.status_code in RETRYABLE_STATUS:
            raise _Transient(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            try:
                message = resp.json().get("error", {}).get("message", resp.text)
            except ValueError:
                message = resp.text
            raise RequestError(resp.status_code, message)
        return _parse_completion(resp.json())

    def close(self) -> None:
        self._http.close()


# --- scripted mock -----------------------------------------------------------


class _Fail:
    def __repr__(self) -> str:
        return "FAIL"


FAIL = _Fail()
"""Script entry that simulates a transient transport failure."""


class ScriptedClient(ChatClient):
    """Replays a fixed list of replies in order; every request is recorded in ``requests``."""

    def __init__(self, script: Iterable[str | _Fail], model: str = "scripted", **retry):
        retry.setdefault("sleep", lambda _s: None)
        super().__init__(**retry)
        self.model = model
        self._script = list(script)
        self._pos = 0
        self._lock = threading.Lock()
        self.requests: list[ChatRequest] = []

    @property
    def remaining(self) -> int:
        return len(self._script) - self._pos

    def _send(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            if self._pos >= len(self._script):
                raise ScriptExhausted(f"script of {len(self._script)} entries exhausted")
            entry = self._script[self._pos]
            self._pos += 1
            self.requests.append(request)
        if entry is FAIL:
            raise _Transient("scripted failure")
        return ChatResponse(text=entry, finish_reason="stop" if entry else "error")


def mock_script(transcript: Sequence[str | _Fail], **kwargs) -> ScriptedClient:
    if not transcript:
        raise ValueError("mock transcript must be non-empty")
    return ScriptedClient(transcript, **kwargs)


def script_from_json(entries: Sequence) -> list[str | _Fail]:
    """Decode a JSON script: strings are replies, ``{"fail": true}`` is a transport failure."""
    out: list[str | _Fail] = []
    for e in entries:
        if isinstance(e, str):
            out.append(e)
        elif isinstance(e, dict) and e.get("fail"):
            out.append(FAIL)
        else:
            raise ValueError(f"bad script entry {e!r}")
    return out
