"""Chat-completion providers: live HTTP, scripted fixtures, and record/replay.

Every provider exposes the same two calls. ``complete`` returns exactly one
:class:`CompletionResponse` per request, after transport retries, and never
raises for transport trouble: that surfaces as ``finish_reason ==
TRANSPORT_ERROR``. ``probe`` checks readiness before a pipeline starts.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import threading
import time
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import httpx

from .domain import Stage

log = logging.getLogger(__name__)


class FinishReason(str, enum.Enum):
    COMPLETE = "complete"
    TRUNCATED = "truncated"
    REFUSED = "refused"
    TRANSPORT_ERROR = "transport_error"


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class CompletionRequest:
    prompt_text: str
    stage: Stage
    attempt: int = 1
    logical_key: str = ""
    model_id: str = "scripted"
    temperature: float = 0.0
    max_output_tokens: int = 2048

    def __post_init__(self) -> None:
        if self.attempt < 1:
            raise ValueError("attempt must be >= 1")
        if not self.prompt_text:
            raise ValueError("prompt_text must be non-empty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must lie in [0, 2]")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")

    @property
    def digest(self) -> str:
        return sha256_text(self.prompt_text)


@dataclass(frozen=True)
class CompletionResponse:
    raw_text: str
    finish_reason: FinishReason = FinishReason.COMPLETE
    latency: float = 0.0
    provider_meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.raw_text and self.finish_reason is FinishReason.COMPLETE:
            raise ValueError("a complete response must carry text")

    @classmethod
    def transport_error(cls, message: str, **meta: Any) -> "CompletionResponse":
        return cls("", FinishReason.TRANSPORT_ERROR, provider_meta={"error": message, **meta})


@dataclass
class ReadinessReport:
    ready: bool
    problems: list[tuple[str, str]] = field(default_factory=list)

    def __str__(self) -> str:
        if self.ready:
            return "ready"
        return "not ready: " + "; ".join(f"[{c}] {d}" for c, d in self.problems)


@dataclass
class RetryPolicy:
    """Exponential backoff for transport failures: ``base * 2**n`` capped at ``cap``."""

    max_retries: int = 3
    base_delay: float = 0.5
    cap: float = 8.0
    sleep: Callable[[float], None] = time.sleep

    def delay(self, retry: int) -> float:
        return min(self.cap, self.base_delay * (2**retry))


# called once per transport attempt; whatever it returns is what the caller sees
ResponseHook = Callable[[CompletionRequest, CompletionResponse, int], CompletionResponse]


class Provider:
    """Base class: retry loop and in-flight limiting around ``_send``."""

    kind = "abstract"
    model_id = "none"

    def __init__(self, retry: RetryPolicy | None = None, max_in_flight: int = 8) -> None:
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.retry = retry or RetryPolicy()
        self.max_in_flight = max_in_flight
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def complete(
        self, request: CompletionRequest, on_response: ResponseHook | None = None
    ) -> CompletionResponse:
        retry = 0
        while True:
            with self._slots:
                started = time.perf_counter()
                try:
                    resp = self._send(request)
                except Exception as exc:  # transport layer; never escapes complete()
                    log.warning("%s transport failure on %s: %s", self.kind, request.stage.value, exc)
                    resp = CompletionResponse.transport_error(f"{type(exc).__name__}: {exc}")
                if not resp.latency:
                    resp = CompletionResponse(
                        resp.raw_text, resp.finish_reason, time.perf_counter() - started, resp.provider_meta
                    )
            if on_response is not None:
                resp = on_response(request, resp, retry)
            if resp.finish_reason is not FinishReason.TRANSPORT_ERROR:
                return resp
            if retry >= self.retry.max_retries or not resp.provider_meta.get("retryable", True):
                return resp
            self.retry.sleep(self.retry.delay(retry))
            retry += 1

    def _send(self, request: CompletionRequest) -> CompletionResponse:
        raise NotImplementedError

    def probe(self, stages: Iterable[Stage] = tuple(Stage)) -> ReadinessReport:
        return ReadinessReport(True)


# -- scripted --------------------------------------------------------------


@dataclass(frozen=True)
class ScriptedKey:
    stage: Stage
    logical_key: str
    attempt: int

    def __str__(self) -> str:
        return f"{self.stage.value}[{self.logical_key}]#{self.attempt}"


@dataclass(frozen=True)
class ScriptedReply:
    text: str
    finish_reason: FinishReason = FinishReason.COMPLETE


class ScriptedProvider(Provider):
    """Answers from a fixture table keyed by (stage, logical key, attempt).

    The logical key names the entities a call is about (``"M01/G03"`` for an
    expansion call, ``"E007"`` for a severity call, ``""`` for the singleton
    stages). Unknown keys come back as transport errors naming the key.
    """

    kind = "scripted"

    def __init__(
        self,
        fixtures: Mapping[ScriptedKey, ScriptedReply | str],
        model_id: str = "scripted",
        **kw: Any,
    ) -> None:
        kw.setdefault("retry", RetryPolicy(max_retries=0, sleep=lambda s: None))
        super().__init__(**kw)
        self.model_id = model_id
        self.fixtures: dict[ScriptedKey, ScriptedReply] = {
            k: v if isinstance(v, ScriptedReply) else ScriptedReply(v) for k, v in fixtures.items()
        }

    def _send(self, request: CompletionRequest) -> CompletionResponse:
        key = ScriptedKey(request.stage, request.logical_key, request.attempt)
        reply = self.fixtures.get(key)
        if reply is None:
            return CompletionResponse.transport_error(f"no fixture for {key}", retryable=False)
        return CompletionResponse(reply.text, reply.finish_reason, provider_meta={"fixture": str(key)})

    def probe(self, stages: Iterable[Stage] = tuple(Stage)) -> ReadinessReport:
        present = {k.stage for k in self.fixtures if k.attempt == 1}
        missing = [s for s in stages if s not in present]
        if missing:
            return ReadinessReport(
                False, [("missing-fixtures", ", ".join(s.value for s in missing))]
            )
        return ReadinessReport(True)

    @classmethod
    def from_directory(cls, path: str | Path, **kw: Any) -> "ScriptedProvider":
        """Load a fixture directory: ``index.json`` plus one text file per reply."""
        root = Path(path)
        index = json.loads((root / "index.json").read_text(encoding="utf-8"))
        fixtures = {}
        for e in index["entries"]:
            key = ScriptedKey(Stage(e["stage"]), e.get("key", ""), int(e.get("attempt", 1)))
            text = (root / e["file"]).read_text(encoding="utf-8")
            fixtures[key] = ScriptedReply(text, FinishReason(e.get("finish_reason", "complete")))
        kw.setdefault("model_id", index.get("model_id", "scripted"))
        return cls(fixtures, **kw)

    def save(self, path: str | Path) -> None:
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, (key, reply) in enumerate(
            sorted(self.fixtures.items(), key=lambda kv: (kv[0].stage.number, kv[0].logical_key, kv[0].attempt))
        ):
            slug = key.logical_key.replace("/", "-") or "run"
            fname = f"{key.stage.number:02d}_{key.stage.value}_{slug}_a{key.attempt}.txt"
            (root / fname).write_text(reply.text, encoding="utf-8", newline="\n")
            entries.append(
                {
                    "stage": key.stage.value,
                    "key": key.logical_key,
                    "attempt": key.attempt,
                    "file": fname,
                    "finish_reason": reply.finish_reason.value,
                }
            )
        index = {"model_id": self.model_id, "entries": entries}
        (root / "index.json").write_text(json.dumps(index, indent=1) + "\n", encoding="utf-8")


# -- record / replay -------------------------------------------------------


@dataclass(frozen=True)
class Exchange:
    stage: Stage
    digest: str
    attempt: int
    response_text: str
    finish_reason: FinishReason

    @property
    def key(self) -> tuple[Stage, str, int]:
        return (self.stage, self.digest, self.attempt)

    def to_json(self) -> dict[str, Any]:
        return {
            "stage": self.stage.value,
            "digest": self.digest,
            "attempt": self.attempt,
            "response_text": self.response_text,
            "finish_reason": self.finish_reason.value,
        }

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "Exchange":
        return cls(
            Stage(d["stage"]), d["digest"], int(d["attempt"]), d["response_text"], FinishReason(d["finish_reason"])
        )


class RecordingProvider(Provider):
    """Pass-through wrapper that records every exchange of the wrapped provider."""

    kind = "recording"

    def __init__(self, inner: Provider) -> None:
        super().__init__(retry=RetryPolicy(max_retries=0), max_in_flight=inner.max_in_flight)
        self.inner = inner
        self.model_id = inner.model_id
        self.exchanges: list[Exchange] = []
        self._lock = threading.Lock()

    def _send(self, request: CompletionRequest) -> CompletionResponse:
        resp = self.inner.complete(request)
        with self._lock:
            self.exchanges.append(
                Exchange(request.stage, request.digest, request.attempt, resp.raw_text, resp.finish_reason)
            )
        return resp

    def probe(self, stages: Iterable[Stage] = tuple(Stage)) -> ReadinessReport:
        return self.inner.probe(stages)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for ex in self.exchanges:
                fh.write(json.dumps(ex.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


class ReplayProvider(Provider):
    """Serves recorded responses keyed by (stage, prompt hash, attempt).

    Keying by content rather than call order keeps replay stable when calls
    arrive concurrently in a different order than they were recorded.
    """

    kind = "replay"

    def __init__(self, exchanges: Iterable[Exchange], model_id: str = "replay", **kw: Any) -> None:
        kw.setdefault("retry", RetryPolicy(max_retries=0, sleep=lambda s: None))
        super().__init__(**kw)
        self.model_id = model_id
        self.table: dict[tuple[Stage, str, int], Exchange] = {}
        for ex in exchanges:
            # a later success supersedes an earlier transport error for the same key
            prev = self.table.get(ex.key)
            if prev is None or prev.finish_reason is FinishReason.TRANSPORT_ERROR:
                self.table[ex.key] = ex

    def _send(self, request: CompletionRequest) -> CompletionResponse:
        ex = self.table.get((request.stage, request.digest, request.attempt))
        if ex is None:
            return CompletionResponse.transport_error(
                f"no recorded exchange for {request.stage.value} attempt {request.attempt} "
                f"(prompt {request.digest[:12]})",
                retryable=False,
            )
        return CompletionResponse(ex.response_text, ex.finish_reason, provider_meta={"replayed": True})

    def probe(self, stages: Iterable[Stage] = tuple(Stage)) -> ReadinessReport:
        present = {k[0] for k in self.table}
        missing = [s for s in stages if s not in present]
        if missing:
            return ReadinessReport(False, [("missing-recordings", ", ".join(s.value for s in missing))])
        return ReadinessReport(True)

    @classmethod
    def from_file(cls, path: str | Path, **kw: Any) -> "ReplayProvider":
        with open(path, encoding="utf-8") as fh:
            return cls([Exchange.from_json(json.loads(line)) for line in fh if line.strip()], **kw)


# -- live HTTP -------------------------------------------------------------


class HttpProvider(Provider):
    """OpenAI-compatible ``/chat/completions`` client.

    The credential is read from the environment variable named by
    ``api_key_env`` and never stored anywhere else. Each call is a fresh
    single-turn exchange.
    """

    kind = "live"
    RETRYABLE_STATUS = frozenset({408, 409, 429, 500, 502, 503, 504})

    def __init__(
        self,
        endpoint: str,
        model_id: str,
        api_key_env: str = "OPENAI_API_KEY",
        temperature: float = 0.0,
        max_output_tokens: int = 2048,
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
        **kw: Any,
    ) -> None:
        super().__init__(**kw)
        self.endpoint = endpoint
        self.model_id = model_id
        self.api_key_env = api_key_env
        self.temperature = temperature
        self.max_output_tokens = max_output_tokens
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def _headers(self) -> dict[str, str]:
        key = os.environ.get(self.api_key_env, "")
        return {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}

    def _send(self, request: CompletionRequest) -> CompletionResponse:
        body = {
            "model": self.model_id,
            "messages": [{"role": "user", "content": request.prompt_text}],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        try:
            r = self._client.post(self.endpoint, json=body, headers=self._headers())
        except httpx.HTTPError as exc:
            return CompletionResponse.transport_error(f"{type(exc).__name__}: {exc}")
        if r.status_code != 200:
            return CompletionResponse.transport_error(
                f"HTTP {r.status_code}",
                status=r.status_code,
                retryable=r.status_code in self.RETRYABLE_STATUS,
            )
        try:
            choice = r.json()["choices"][0]
            text = choice["message"].get("content") or ""
            vendor_reason = choice.get("finish_reason") or "stop"
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            return CompletionResponse.transport_error(f"malformed response body: {exc}")
        reason = {
            "stop": FinishReason.COMPLETE,
            "length": FinishReason.TRUNCATED,
            "content_filter": FinishReason.REFUSED,
        }.get(vendor_reason, FinishReason.COMPLETE)
        if not text and reason is FinishReason.COMPLETE:
            reason = FinishReason.REFUSED
        return CompletionResponse(text, reason, provider_meta={"vendor_finish_reason": vendor_reason})

    def probe(self, stages: Iterable[Stage] = tuple(Stage)) -> ReadinessReport:
        if not os.environ.get(self.api_key_env):
            return ReadinessReport(False, [("missing-credential", f"${self.api_key_env} is not set")])
        url = self.endpoint.rsplit("/chat/completions", 1)[0] + "/models"
        try:
            r = self._client.get(url, headers=self._headers())
        except httpx.HTTPError as exc:
            return ReadinessReport(False, [("unreachable", f"{url}: {exc}")])
        if r.status_code in (401, 403):
            return ReadinessReport(False, [("auth", f"HTTP {r.status_code} from {url}")])
        if r.status_code >= 400:
            return ReadinessReport(False, [("http", f"HTTP {r.status_code} from {url}")])
        return ReadinessReport(True)

    def close(self) -> None:
        self._client.close()
