"""Provider-agnostic chat-completion gateway.

Every model call in the pipeline and the evaluator goes through
:class:`Gateway`. It speaks a chat-completions-style wire format (role-tagged
messages, text plus base64 image parts), enforces a per-endpoint concurrency
ceiling, retries transient failures with exponential backoff, and knows how
to coax structured output out of free-text replies.

Scripted backends replay canned fixtures so the whole pipeline can run
deterministically with zero network.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import jsonschema
import requests

from .errors import (
    AuthError,
    ContextLengthError,
    FixtureExhaustedError,
    FixtureMissError,
    StructuredParseError,
    TransportError,
    ValidationError,
)
from .util import canonical_json, sha256_hex

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelEndpoint:
    """Where a model lives and how hard we may hit it.

    ``api_key_env`` names an environment variable; the key itself is never
    stored in config or logs.
    """

    model_id: str
    base_url: str = ""
    api_key_env: str = ""
    max_concurrent: int = 4
    request_timeout: float = 120.0
    vision: bool = True

    def __post_init__(self):
        if self.max_concurrent < 1:
            raise ValidationError("endpoint max_concurrent must be >= 1")

    def key(self) -> tuple[str, str]:
        return (self.model_id, self.base_url)


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    data: bytes
    media_type: str = "image/png"


@dataclass(frozen=True)
class Message:
    role: str
    parts: tuple = ()

    @classmethod
    def user(cls, text: str, images: Sequence[ImagePart] = ()) -> "Message":
        return cls(role="user", parts=tuple([TextPart(text), *images]))

    @classmethod
    def system(cls, text: str) -> "Message":
        return cls(role="system", parts=(TextPart(text),))

    @classmethod
    def assistant(cls, text: str) -> "Message":
        return cls(role="assistant", parts=(TextPart(text),))


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    temperature: float = 0.0
    max_output_tokens: int = 4096
    response_schema: Mapping[str, Any] | None = None

    def __post_init__(self):
        if not self.messages:
            raise ValidationError("a chat request needs at least one message")
        object.__setattr__(self, "messages", tuple(self.messages))

    def text_digest(self) -> str:
        """All text content, role-tagged; the matching surface for fixtures."""
        chunks = []
        for msg in self.messages:
            for part in msg.parts:
                if isinstance(part, TextPart):
                    chunks.append(f"[{msg.role}] {part.text}")
                else:
                    chunks.append(f"[{msg.role}] <image {len(part.data)}B>")
        return "\n".join(chunks)

    def has_images(self) -> bool:
        return any(
            isinstance(p, ImagePart) for m in self.messages for p in m.parts
        )


@dataclass(frozen=True)
class ChatResponse:
    text: str
    finish_reason: str = "stop"
    usage: Mapping[str, int] = field(default_factory=dict)
    latency: float = 0.0

    def __post_init__(self):
        if self.finish_reason == "stop" and self.text is None:
            raise ValidationError("a stop response must carry text")


class BackendHTTPError(Exception):
    """An HTTP-level failure from a backend, carrying the status code."""

    def __init__(self, status_code: int, detail: str = ""):
        super().__init__(f"HTTP {status_code}: {detail}")
        self.status_code = status_code
        self.detail = detail


class BackendTransportError(Exception):
    """Connection-level failure (DNS, refused, timed out)."""


class HTTPBackend:
    """Speaks the de facto chat-completions JSON protocol over HTTP(S)."""

    def __init__(self, session: requests.Session | None = None):
        self._session = session or requests.Session()

    def send(self, endpoint: ModelEndpoint, request: ChatRequest) -> ChatResponse:
        headers = {"Content-Type": "application/json"}
        if endpoint.api_key_env:
            key = os.environ.get(endpoint.api_key_env, "")
            if key:
                headers["Authorization"] = f"Bearer {key}"
        payload = {
            "model": endpoint.model_id,
            "messages": [_wire_message(m) for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        t0 = time.monotonic()
        try:
            resp = self._session.post(
                endpoint.base_url.rstrip("/") + "/chat/completions",
                json=payload,
                headers=headers,
                timeout=endpoint.request_timeout,
            )
        except requests.RequestException as exc:
            raise BackendTransportError(str(exc)) from exc
        if resp.status_code != 200:
            raise BackendHTTPError(resp.status_code, resp.text[:500])
        body = resp.json()
        choice = body["choices"][0]
        return ChatResponse(
            text=choice["message"]["content"] or "",
            finish_reason=choice.get("finish_reason", "stop"),
            usage=body.get("usage", {}),
            latency=time.monotonic() - t0,
        )


def _wire_message(msg: Message) -> dict:
    content: list[dict] = []
    for part in msg.parts:
        if isinstance(part, TextPart):
            content.append({"type": "text", "text": part.text})
        else:
            b64 = base64.b64encode(part.data).decode("ascii")
            content.append(
                {
                    "type": "image_url",
                    "image_url": {"url": f"data:{part.media_type};base64,{b64}"},
                }
            )
    return {"role": msg.role, "content": content}


Matcher = Callable[[ChatRequest], bool]


@dataclass
class ScriptedRule:
    matcher: Matcher
    response: Any  # str | ChatResponse | Exception
    times: int | None = 1  # None = reusable without limit
    used: int = 0

    def available(self) -> bool:
        return self.times is None or self.used < self.times


def _as_matcher(spec) -> Matcher:
    if callable(spec):
        return spec
    if isinstance(spec, str):
        return lambda req, needle=spec: needle in req.text_digest()
    if isinstance(spec, (list, tuple)):
        needles = [str(s) for s in spec]
        return lambda req: all(n in req.text_digest() for n in needles)
    raise ValidationError(f"unsupported matcher spec: {spec!r}")


class ScriptedBackend:
    """Deterministic fixture playback standing in for a live model.

    Rules are consulted in order; the first available rule whose matcher
    accepts the request is consumed (unless marked reusable). Requests with
    no matching rule raise :class:`FixtureMissError`; an empty or fully
    consumed fixture raises :class:`FixtureExhaustedError`.
    """

    def __init__(self, rules: Sequence[ScriptedRule] = ()):
        self._rules = list(rules)
        self._lock = threading.Lock()
        self.calls: list[str] = []

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple]) -> "ScriptedBackend":
        """Build from (matcher_spec, response) or (matcher_spec, response, times)."""
        rules = []
        for pair in pairs:
            matcher_spec, response = pair[0], pair[1]
            times = pair[2] if len(pair) > 2 else 1
            rules.append(ScriptedRule(_as_matcher(matcher_spec), response, times))
        return cls(rules)

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        """Load a JSON fixture: a list of {match, response, times?} objects.

        ``match`` is a substring or list of substrings that must all occur in
        the request text; ``response`` is a string or a JSON value (serialized
        into the reply text); ``times`` defaults to 1, null means reusable.
        """
        entries = json.loads(Path(path).read_text(encoding="utf-8"))
        rules = []
        for i, entry in enumerate(entries):
            if "match" not in entry or "response" not in entry:
                raise ValidationError(f"fixture entry {i} needs match and response")
            response = entry["response"]
            if not isinstance(response, str):
                response = canonical_json(response)
            rules.append(
                ScriptedRule(
                    _as_matcher(entry["match"]), response, entry.get("times", 1)
                )
            )
        return cls(rules)

    @property
    def call_count(self) -> int:
        return len(self.calls)

    def pending_rules(self) -> int:
        return sum(1 for r in self._rules if r.available())

    def send(self, endpoint: ModelEndpoint, request: ChatRequest) -> ChatResponse:
        digest = request.text_digest()
        with self._lock:
            self.calls.append(digest)
            available = [r for r in self._rules if r.available()]
            if not available:
                raise FixtureExhaustedError(
                    f"scripted backend has no responses left "
                    f"(request sha {sha256_hex(digest)[:12]})"
                )
            for rule in self._rules:
                if rule.available() and rule.matcher(request):
                    rule.used += 1
                    response = rule.response
                    break
            else:
                raise FixtureMissError(
                    "no fixture rule matches request "
                    f"(sha {sha256_hex(digest)[:12]}): {digest[:300]!r}"
                )
        if isinstance(response, Exception):
            raise response
        if isinstance(response, int):
            raise BackendHTTPError(response, "scripted failure")
        if isinstance(response, ChatResponse):
            return response
        return ChatResponse(text=str(response))


class CountingBackend:
    """Wraps a backend and tracks the number of in-flight requests; used to
    assert the gateway's concurrency ceiling."""

    def __init__(self, inner, delay: float = 0.0):
        self._inner = inner
        self._delay = delay
        self._lock = threading.Lock()
        self.in_flight = 0
        self.max_in_flight = 0

    def send(self, endpoint: ModelEndpoint, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
        try:
            if self._delay:
                time.sleep(self._delay)
            return self._inner.send(endpoint, request)
        finally:
            with self._lock:
                self.in_flight -= 1


_RETRYABLE_STATUS = {408, 409, 429, 500, 502, 503, 504}
_AUTH_STATUS = {401, 403}
_CONTEXT_STATUS = {413}

_FENCE_RE = re.compile(r"```(?:json|JSON)?\s*\n(.*?)\n?\s*```", re.DOTALL)

REPAIR_INSTRUCTION = (
    "Your previous reply could not be used: {error}. "
    "Respond again with ONLY a JSON document that satisfies this schema, "
    "no prose, no code fences:\n{schema}"
)


class Gateway:
    """Retry, rate-limit, and structured-output layer over a backend."""

    def __init__(
        self,
        backend,
        max_retries: int = 3,
        backoff_base: float = 0.5,
        transcript_path: str | Path | None = None,
    ):
        self._backend = backend
        self._max_retries = max_retries
        self._backoff_base = backoff_base
        self._limiters: dict[tuple[str, str], threading.BoundedSemaphore] = {}
        self._lock = threading.Lock()
        self._transcript_path = Path(transcript_path) if transcript_path else None
        self._transcript_lock = threading.Lock()

    def _limiter(self, endpoint: ModelEndpoint) -> threading.BoundedSemaphore:
        with self._lock:
            sem = self._limiters.get(endpoint.key())
            if sem is None:
                sem = threading.BoundedSemaphore(endpoint.max_concurrent)
                self._limiters[endpoint.key()] = sem
            return sem

    def complete(self, endpoint: ModelEndpoint, request: ChatRequest) -> ChatResponse:
        """Send one chat request, retrying transient failures.

        Auth rejections and context-length rejections are terminal on the
        first attempt; transport errors and retryable HTTP statuses back off
        exponentially for up to ``max_retries`` further attempts. The request
        payload is identical on every attempt.
        """
        if request.has_images() and not endpoint.vision:
            raise ValidationError(
                f"endpoint {endpoint.model_id} is not declared vision-capable"
            )
        limiter = self._limiter(endpoint)
        last_error: Exception | None = None
        for attempt in range(self._max_retries + 1):
            if attempt:
                time.sleep(self._backoff_base * (2 ** (attempt - 1)))
            try:
                with limiter:
                    t0 = time.monotonic()
                    response = self._backend.send(endpoint, request)
                if response.latency == 0.0:
                    response = replace(response, latency=time.monotonic() - t0)
                self._log_transcript(endpoint, request, response)
                return response
            except BackendHTTPError as exc:
                if exc.status_code in _AUTH_STATUS:
                    raise AuthError(
                        f"{endpoint.model_id}: authentication rejected ({exc.status_code})"
                    ) from exc
                if exc.status_code in _CONTEXT_STATUS:
                    raise ContextLengthError(
                        f"{endpoint.model_id}: request too large ({exc.status_code})"
                    ) from exc
                if exc.status_code not in _RETRYABLE_STATUS:
                    raise TransportError(
                        f"{endpoint.model_id}: unretryable HTTP {exc.status_code}"
                    ) from exc
                last_error = exc
            except BackendTransportError as exc:
                last_error = exc
            logger.debug(
                "retrying %s after %s (attempt %d)", endpoint.model_id, last_error, attempt + 1
            )
        raise TransportError(
            f"{endpoint.model_id}: gave up after {self._max_retries + 1} attempts: {last_error}"
        )

    def complete_structured(
        self, endpoint: ModelEndpoint, request: ChatRequest
    ) -> Any:
        """Return the first schema-valid payload in the response text.

        Tries the raw text, then fenced blocks, then the first balanced JSON
        object. On failure, re-prompts once with a repair instruction before
        raising :class:`StructuredParseError`.
        """
        if request.response_schema is None:
            raise ValidationError("complete_structured requires a response_schema")
        response = self.complete(endpoint, request)
        try:
            return extract_structured(response.text, request.response_schema)
        except StructuredParseError as first_error:
            repair = replace(
                request,
                messages=request.messages
                + (
                    Message.assistant(response.text),
                    Message.user(
                        REPAIR_INSTRUCTION.format(
                            error=first_error,
                            schema=canonical_json(dict(request.response_schema)),
                        )
                    ),
                ),
            )
            retry_response = self.complete(endpoint, repair)
            try:
                return extract_structured(retry_response.text, request.response_schema)
            except StructuredParseError as exc:
                raise StructuredParseError(
                    f"structured output failed after repair: {exc}",
                    raw_text=retry_response.text,
                ) from exc

    def _log_transcript(
        self, endpoint: ModelEndpoint, request: ChatRequest, response: ChatResponse
    ) -> None:
        if self._transcript_path is None:
            return
        record = {
            "model_id": endpoint.model_id,
            "request_sha": sha256_hex(request.text_digest()),
            "request_text": request.text_digest(),
            "response_text": response.text,
            "finish_reason": response.finish_reason,
        }
        line = canonical_json(record) + "\n"
        with self._transcript_lock:
            with open(self._transcript_path, "a", encoding="utf-8") as fh:
                fh.write(line)


def _candidate_payloads(text: str):
    stripped = text.strip()
    if stripped:
        yield stripped
    for match in _FENCE_RE.finditer(text):
        yield match.group(1).strip()
    # First balanced top-level object or array, for payloads wrapped in prose.
    for opener, closer in (("{", "}"), ("[", "]")):
        start = text.find(opener)
        if start < 0:
            continue
        depth = 0
        in_string = False
        escape = False
        for i in range(start, len(text)):
            ch = text[i]
            if in_string:
                if escape:
                    escape = False
                elif ch == "\\":
                    escape = True
                elif ch == '"':
                    in_string = False
                continue
            if ch == '"':
                in_string = True
            elif ch == opener:
                depth += 1
            elif ch == closer:
                depth -= 1
                if depth == 0:
                    yield text[start : i + 1]
                    break


def extract_structured(text: str, schema: Mapping[str, Any]) -> Any:
    """Extract and validate the first well-formed payload in ``text``."""
    last_problem = "no JSON payload found"
    for candidate in _candidate_payloads(text):
        try:
            value = json.loads(candidate)
        except json.JSONDecodeError as exc:
            last_problem = f"invalid JSON: {exc}"
            continue
        try:
            jsonschema.validate(value, dict(schema))
        except jsonschema.ValidationError as exc:
            last_problem = f"schema violation: {exc.message}"
            continue
        return value
    raise StructuredParseError(last_problem, raw_text=text)
