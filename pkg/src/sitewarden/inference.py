"""Chat interface to local text and vision-language models.

Three interchangeable backends share one ``chat(request)`` method:

* :class:`LiveBackend` posts to a local model server's ``/api/chat`` endpoint.
* :class:`ReplayBackend` answers from a recorded JSONL cassette and never
  touches the network. Unknown requests raise :class:`CassetteMiss`.
* :class:`ScriptedBackend` returns programmed replies for tests.

:class:`RecordingBackend` wraps any backend and appends every exchange to a
cassette, so a later replay reproduces the run exactly.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol

from .errors import (
    BackendError,
    BackendUnreachable,
    CassetteMiss,
    ImageNotFound,
    InvalidRequest,
    ModelNotFound,
    ScriptExhausted,
)

logger = logging.getLogger(__name__)

BASE_URL_ENV = "SITEWARDEN_BASE_URL"
DEFAULT_BASE_URL = "http://localhost:11434"
DEFAULT_OPTIONS: dict[str, Any] = {"temperature": 0, "seed": 42}
ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class ChatMessage:
    role: str
    text: str = ""
    images: tuple[bytes, ...] = ()

    def __post_init__(self):
        if self.role not in ROLES:
            raise InvalidRequest(f"unknown role {self.role!r}")
        if not self.text and not self.images:
            raise InvalidRequest("message needs text or at least one image")
        object.__setattr__(self, "images", tuple(self.images))


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[ChatMessage, ...]
    options: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.model_id:
            raise InvalidRequest("model_id must be non-empty")
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise InvalidRequest("request needs at least one message")
        object.__setattr__(self, "options", dict(self.options))

    @property
    def key(self) -> str:
        return request_key(self)

    def prompt_text(self) -> str:
        return "\n".join(m.text for m in self.messages)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    model_id: str
    latency_ms: int = 0


def _canonical(request: ChatRequest) -> dict:
    return {
        "model": request.model_id,
        "messages": [
            {
                "role": m.role,
                "content": m.text,
                "images": [hashlib.sha256(img).hexdigest() for img in m.images],
            }
            for m in request.messages
        ],
        "options": dict(request.options),
    }


def request_key(request: ChatRequest) -> str:
    """SHA-256 over the model, the messages (images by digest) and the options."""
    blob = json.dumps(_canonical(request), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def request_summary(request: ChatRequest, max_chars: int = 200) -> dict:
    canon = _canonical(request)
    for m in canon["messages"]:
        if len(m["content"]) > max_chars:
            m["content"] = m["content"][:max_chars] + "..."
    return canon


def wire_payload(request: ChatRequest) -> dict:
    """JSON body for ``POST {base_url}/api/chat``."""
    messages = []
    for m in request.messages:
        msg: dict[str, Any] = {"role": m.role, "content": m.text}
        if m.images:
            msg["images"] = [base64.b64encode(img).decode("ascii") for img in m.images]
        messages.append(msg)
    return {
        "model": request.model_id,
        "messages": messages,
        "stream": False,
        "options": dict(request.options),
    }


class Backend(Protocol):
    def chat(self, request: ChatRequest) -> ChatResponse: ...


def resolve_base_url(base_url: str | None = None) -> str:
    return (base_url or os.environ.get(BASE_URL_ENV) or DEFAULT_BASE_URL).rstrip("/")


class LiveBackend:
    """HTTP client for a local model server speaking the ``/api/chat`` protocol."""

    def __init__(
        self,
        base_url: str | None = None,
        timeout: float = 600.0,
        max_in_flight: int = 2,
        transport=None,
    ):
        import httpx

        self.base_url = resolve_base_url(base_url)
        self._client = httpx.Client(timeout=timeout, transport=transport)
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def _post(self, path: str, payload: dict) -> dict:
        import httpx

        url = f"{self.base_url}{path}"
        with self._slots:
            try:
                response = self._client.post(url, json=payload)
            except (httpx.ConnectError, httpx.ConnectTimeout) as exc:
                raise BackendUnreachable(f"cannot reach {url}: {exc}") from exc
            except httpx.TransportError as exc:
                raise BackendUnreachable(f"transport error talking to {url}: {exc}") from exc
        if response.status_code == 404:
            raise ModelNotFound(f"{payload.get('model')!r}: {response.text.strip()}")
        if response.status_code >= 400:
            raise BackendError(f"{url} returned HTTP {response.status_code}: {response.text.strip()}")
        try:
            return response.json()
        except ValueError as exc:
            raise BackendError(f"{url} returned non-JSON body") from exc

    def chat(self, request: ChatRequest) -> ChatResponse:
        started = time.monotonic()
        body = self._post("/api/chat", wire_payload(request))
        try:
            text = body["message"]["content"]
        except (KeyError, TypeError) as exc:
            raise BackendError(f"reply has no message.content: {str(body)[:200]}") from exc
        latency = int((time.monotonic() - started) * 1000)
        return ChatResponse(text=text, model_id=body.get("model", request.model_id), latency_ms=latency)

    def embed(self, model_id: str, text: str) -> list[float]:
        body = self._post("/api/embed", {"model": model_id, "input": text})
        try:
            return list(body["embeddings"][0])
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"reply has no embeddings: {str(body)[:200]}") from exc

    def close(self) -> None:
        self._client.close()


class ScriptedBackend:
    """Mock backend driven by ``(matcher, reply)`` rules, checked in order.

    A matcher is ``None`` (any request), a substring of the prompt text, or a
    predicate. A reply is a fixed string, a list of strings consumed one per
    call, or a callable. Raises :class:`ScriptExhausted` when no rule applies
    or a reply list runs out.
    """

    def __init__(self, rules: Iterable[tuple[Any, Any]] = (), model_id: str | None = None):
        self._rules = []
        for matcher, reply in rules:
            if isinstance(reply, (list, tuple)):
                reply = list(reply)
            self._rules.append((matcher, reply))
        self._model_id = model_id
        self._lock = threading.Lock()
        self.calls: list[ChatRequest] = []

    @classmethod
    def always(cls, text: str) -> "ScriptedBackend":
        return cls([(None, text)])

    @staticmethod
    def _matches(matcher, request: ChatRequest) -> bool:
        if matcher is None:
            return True
        if isinstance(matcher, str):
            return matcher in request.prompt_text()
        return bool(matcher(request))

    def chat(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.calls.append(request)
            for matcher, reply in self._rules:
                if not self._matches(matcher, request):
                    continue
                if isinstance(reply, list):
                    if not reply:
                        raise ScriptExhausted(f"replies for rule {matcher!r} are used up")
                    text = reply.pop(0)
                elif callable(reply):
                    text = reply(request)
                else:
                    text = reply
                if isinstance(text, BaseException):
                    raise text
                return ChatResponse(text=text, model_id=self._model_id or request.model_id)
        raise ScriptExhausted("no scripted rule matches the request")


_ERRORS_BY_NAME = {
    cls.__name__: cls
    for cls in (BackendError, BackendUnreachable, ModelNotFound, ScriptExhausted)
}


def load_cassette(path: str | os.PathLike) -> dict[str, dict]:
    entries: dict[str, dict] = {}
    p = Path(path)
    if not p.exists():
        return entries
    with open(p, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                entries.setdefault(record["key"], record)
            except (ValueError, KeyError) as exc:
                raise BackendError(f"{p}:{n}: malformed cassette record") from exc
    return entries


class ReplayBackend:
    """Answers from a cassette; unknown keys raise, there is no live fallback."""

    def __init__(self, cassette_path: str | os.PathLike):
        self.cassette_path = Path(cassette_path)
        self._entries = load_cassette(self.cassette_path)

    def __len__(self) -> int:
        return len(self._entries)

    def chat(self, request: ChatRequest) -> ChatResponse:
        key = request_key(request)
        entry = self._entries.get(key)
        if entry is None:
            raise CassetteMiss(f"no cassette entry for key {key[:16]} (model {request.model_id})")
        if "error" in entry:
            err = entry["error"]
            raise _ERRORS_BY_NAME.get(err.get("type"), BackendError)(err.get("message", ""))
        return ChatResponse(text=entry["response_text"], model_id=entry["model_id"], latency_ms=0)


class RecordingBackend:
    """Forwards to ``inner`` and appends each new exchange to a cassette."""

    def __init__(self, inner: Backend, cassette_path: str | os.PathLike):
        self.inner = inner
        self.cassette_path = Path(cassette_path)
        self.cassette_path.parent.mkdir(parents=True, exist_ok=True)
        self._seen = set(load_cassette(self.cassette_path))
        self._lock = threading.Lock()

    def _append(self, record: dict) -> None:
        with self._lock:
            if record["key"] in self._seen:
                return
            self._seen.add(record["key"])
            with open(self.cassette_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")

    def chat(self, request: ChatRequest) -> ChatResponse:
        key = request_key(request)
        base = {"key": key, "request_summary": request_summary(request), "model_id": request.model_id}
        try:
            response = self.inner.chat(request)
        except BackendError as exc:
            self._append({**base, "error": {"type": type(exc).__name__, "message": str(exc)}})
            raise
        self._append({**base, "response_text": response.text, "model_id": response.model_id})
        return response


def record_cassette(
    live_backend: Backend, requests: Iterable[ChatRequest], cassette_path: str | os.PathLike
) -> Path:
    """Send ``requests`` through ``live_backend``, recording each exchange.

    Failed requests are stored as error entries and do not stop the recording.
    """
    recorder = RecordingBackend(live_backend, cassette_path)
    for request in requests:
        try:
            recorder.chat(request)
        except BackendError as exc:
            logger.warning("recorded error for %s: %s", request.model_id, exc)
    return recorder.cassette_path


def chat(backend: Backend, request: ChatRequest) -> ChatResponse:
    return backend.chat(request)


def image_request(
    model_id: str,
    prompt: str,
    image_ref: str | os.PathLike,
    options: Mapping[str, Any] | None = None,
) -> ChatRequest:
    try:
        with open(image_ref, "rb") as fh:
            image = fh.read()
    except FileNotFoundError as exc:
        raise ImageNotFound(f"image file not found: {image_ref}") from exc
    return ChatRequest(
        model_id=model_id,
        messages=(ChatMessage("user", prompt, (image,)),),
        options=DEFAULT_OPTIONS if options is None else options,
    )


def text_request(model_id: str, prompt: str, options: Mapping[str, Any] | None = None) -> ChatRequest:
    return ChatRequest(
        model_id=model_id,
        messages=(ChatMessage("user", prompt),),
        options=DEFAULT_OPTIONS if options is None else options,
    )


def chat_with_image(
    backend: Backend,
    model_id: str,
    prompt: str,
    image_ref: str | os.PathLike,
    options: Mapping[str, Any] | None = None,
) -> str:
    return backend.chat(image_request(model_id, prompt, image_ref, options)).text
