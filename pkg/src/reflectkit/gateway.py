"""Uniform client over chat-completion endpoints.

One gateway fronts either a real HTTP server (the common chat-completions
JSON shape), an in-process mock, or a replay of a previous run's log. The
gateway owns retries, the in-flight cap, and the append-only replay log;
backends only turn a request into text.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import requests

API_KEY_ENV = "REFLECT_API_KEY"
DEFAULT_RETRIES = 3
DEFAULT_BACKOFF_S = 0.5


class TransportError(Exception):
    """Endpoint unreachable or persistently failing; retried up to the cap."""


class ProtocolError(Exception):
    """The server answered, but not in the expected shape. Not retried."""


class ReplayMissError(ProtocolError):
    """Replay log has no entry for this request."""


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def to_dict(self) -> dict:
        return {"role": self.role, "content": self.content}


def user(content: str) -> Message:
    return Message("user", content)


def system(content: str) -> Message:
    return Message("system", content)


@dataclass(frozen=True)
class CompletionRequest:
    messages: tuple[Message, ...]
    model: str = "default"
    temperature: float = 0.0
    max_new_tokens: int = 512
    stop: tuple[str, ...] = ()
    seed: int | None = None

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.max_new_tokens <= 0:
            raise ValueError("max_new_tokens must be > 0")

    def to_dict(self) -> dict:
        return {
            "messages": [m.to_dict() for m in self.messages],
            "model": self.model,
            "temperature": self.temperature,
            "max_new_tokens": self.max_new_tokens,
            "stop": list(self.stop),
            "seed": self.seed,
        }

    def prompt_text(self) -> str:
        return "\n".join(m.content for m in self.messages)


@dataclass(frozen=True)
class CompletionResult:
    text: str | None
    finish_reason: str  # "stop" | "length" | "error"
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_s: float = 0.0
    attempts: int = 1
    error: str | None = None

    def __post_init__(self) -> None:
        if (self.finish_reason == "error") == (self.text is not None):
            raise ValueError("text must be present exactly when finish_reason != error")

    @property
    def ok(self) -> bool:
        return self.error is None


def request_hash(req: CompletionRequest) -> str:
    canonical = json.dumps(req.to_dict(), sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class Backend(Protocol):
    def send(self, req: CompletionRequest) -> str: ...


class EchoBackend:
    """Returns the last message content verbatim."""

    def send(self, req: CompletionRequest) -> str:
        return req.messages[-1].content


@dataclass(frozen=True)
class MockRule:
    """Reply template chosen when `contains` appears in the prompt.

    The template may use ``{seed}`` and ``{temperature}`` from the request.
    ``fail=True`` simulates a transient endpoint failure instead.
    """

    contains: str
    reply: str = ""
    fail: bool = False


class ScriptedBackend:
    """Table-driven mock: first matching rule wins, else the default reply.

    Replies are a pure function of the request, so pipeline output is
    byte-identical across runs and scheduling orders.
    """

    def __init__(self, rules: Sequence[MockRule], default: str | None = None):
        self._rules = tuple(rules)
        self._default = default

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        spec = json.loads(Path(path).read_text(encoding="utf-8"))
        rules = [
            MockRule(
                contains=r["contains"],
                reply=r.get("reply", ""),
                fail=bool(r.get("fail", False)),
            )
            for r in spec.get("rules", [])
        ]
        return cls(rules, default=spec.get("default"))

    def send(self, req: CompletionRequest) -> str:
        prompt = req.prompt_text()
        for rule in self._rules:
            if rule.contains in prompt:
                if rule.fail:
                    raise TransportError(f"scripted failure on {rule.contains!r}")
                return self._fill(rule.reply, req)
        if self._default is None:
            raise ProtocolError("no scripted rule matched and no default reply")
        return self._fill(self._default, req)

    @staticmethod
    def _fill(template: str, req: CompletionRequest) -> str:
        out = template.replace("{seed}", str(req.seed))
        return out.replace("{temperature}", str(req.temperature))


class CallableBackend:
    """Adapter for test responders written as plain functions."""

    def __init__(self, fn: Callable[[CompletionRequest], str]):
        self._fn = fn

    def send(self, req: CompletionRequest) -> str:
        return self._fn(req)


class HttpBackend:
    """Chat-completions HTTP JSON endpoint (messages array in, choices out)."""

    def __init__(
        self,
        url: str,
        *,
        model: str | None = None,
        timeout_s: float = 60.0,
        api_key_env: str = API_KEY_ENV,
        session: requests.Session | None = None,
    ):
        self.url = url
        self.model = model
        self.timeout_s = timeout_s
        self.api_key_env = api_key_env
        self._session = session or requests.Session()

    def send(self, req: CompletionRequest) -> str:
        payload = {
            "model": self.model or req.model,
            "messages": [m.to_dict() for m in req.messages],
            "temperature": req.temperature,
            "max_tokens": req.max_new_tokens,
        }
        if req.stop:
            payload["stop"] = list(req.stop)
        if req.seed is not None:
            payload["seed"] = req.seed  # best effort; servers may ignore it
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        try:
            resp = self._session.post(
                self.url, json=payload, headers=headers, timeout=self.timeout_s
            )
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise TransportError(f"server returned {resp.status_code}")
        if resp.status_code != 200:
            raise ProtocolError(f"server returned {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            text = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed completion response: {exc}") from exc
        if not isinstance(text, str):
            raise ProtocolError("completion content is not a string")
        return text


class ReplayBackend:
    """Serves responses recorded in a replay log; never touches the network."""

    def __init__(self, responses: dict[str, str]):
        self._responses = responses

    @classmethod
    def from_log(cls, path: str | Path) -> "ReplayBackend":
        responses: dict[str, str] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                entry = json.loads(line)
                responses[entry["request_hash"]] = entry["response"]
        return cls(responses)

    def send(self, req: CompletionRequest) -> str:
        key = request_hash(req)
        if key not in self._responses:
            raise ReplayMissError(f"no logged response for request {key[:12]}...")
        return self._responses[key]


class ChatGateway:
    """Thread-safe front for a backend: retries, in-flight cap, replay log."""

    def __init__(
        self,
        backend: Backend,
        *,
        retries: int = DEFAULT_RETRIES,
        backoff_s: float = DEFAULT_BACKOFF_S,
        max_in_flight: int = 8,
        replay_log_path: str | Path | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.backend = backend
        self.retries = retries
        self.backoff_s = backoff_s
        self.max_in_flight = max_in_flight
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._log_lock = threading.Lock()
        self._log_path = Path(replay_log_path) if replay_log_path else None
        self.calls = 0

    def complete(self, req: CompletionRequest) -> CompletionResult:
        """Run one request with retry-on-transient; raises after the last try."""
        start = time.monotonic()
        last_exc: Exception | None = None
        for attempt in range(1, self.retries + 1):
            try:
                with self._slots:
                    text = self.backend.send(req)
            except TransportError as exc:
                last_exc = exc
                if attempt < self.retries:
                    self._sleep(self.backoff_s * (2 ** (attempt - 1)))
                continue
            latency = time.monotonic() - start
            self._append_log(req, text)
            with self._log_lock:
                self.calls += 1
            return CompletionResult(
                text=text,
                finish_reason="stop",
                prompt_tokens=len(req.prompt_text().split()),
                completion_tokens=len(text.split()),
                latency_s=latency,
                attempts=attempt,
            )
        raise TransportError(f"exhausted {self.retries} attempts: {last_exc}")

    def complete_many(
        self, reqs: Iterable[CompletionRequest], max_in_flight: int | None = None
    ) -> list[CompletionResult]:
        """Run a batch; results stay positionally aligned with the inputs.

        Per-item failures become error results; one failure never aborts
        the batch.
        """
        reqs = list(reqs)
        if not reqs:
            return []
        workers = max_in_flight or self.max_in_flight
        if workers < 1:
            raise ValueError("max_in_flight must be >= 1")

        def one(req: CompletionRequest) -> CompletionResult:
            try:
                return self.complete(req)
            except (TransportError, ProtocolError) as exc:
                return CompletionResult(
                    text=None, finish_reason="error", error=str(exc)
                )

        with ThreadPoolExecutor(max_workers=min(workers, len(reqs))) as pool:
            return list(pool.map(one, reqs))

    def _append_log(self, req: CompletionRequest, text: str) -> None:
        if self._log_path is None:
            return
        entry = {
            "request_hash": request_hash(req),
            "request": req.to_dict(),
            "response": text,
            "ts": time.time(),
        }
        line = json.dumps(entry, sort_keys=True, ensure_ascii=False)
        with self._log_lock:
            with open(self._log_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")


def derive_seed(base: int, *parts: object) -> int:
    """Stable per-call seed from a base seed and any identifying parts."""
    tag = "|".join([str(base), *[str(p) for p in parts]])
    return int(hashlib.sha256(tag.encode("utf-8")).hexdigest()[:16], 16)
