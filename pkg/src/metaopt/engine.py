"""Black-box model access: live HTTP, scripted, echo and cached engines.

Every call carries a ``level`` (program, optimizer or meta) and is recorded in
the engine's :class:`UsageLedger` under that level.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import httpx

log = logging.getLogger(__name__)

LEVELS = ("program", "optimizer", "meta")
DEFAULT_TEMPERATURE = {"program": 0.0, "optimizer": 0.0, "meta": 1.0}
DEFAULT_MAX_TOKENS = 2048
RETRYABLE_STATUS = frozenset({408, 409, 429, 500, 502, 503, 504})
API_KEY_ENV = "METAOPT_API_KEY"


class EngineError(RuntimeError):
    pass


class TransportError(EngineError):
    """Retries exhausted on timeouts, connection errors or retryable statuses."""


class ProtocolError(EngineError):
    def __init__(self, status: int, body: str = ""):
        super().__init__(f"HTTP {status}: {body[:200]}")
        self.status = status


class UnscriptedRequestError(EngineError):
    def __init__(self, key: str):
        preview = key if len(key) <= 120 else key[:117] + "..."
        super().__init__(f"unscripted request: {preview!r}")
        self.key = key


@dataclass(frozen=True)
class EngineRequest:
    system_text: str
    user_text: str
    level: str
    temperature: float | None = None
    max_tokens: int = DEFAULT_MAX_TOKENS
    seed: int | None = None

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValueError(f"level must be one of {LEVELS}, got {self.level!r}")
        if not self.user_text:
            raise ValueError("user_text must be non-empty")
        if self.temperature is None:
            object.__setattr__(self, "temperature", DEFAULT_TEMPERATURE[self.level])
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class EngineResponse:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    cached: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "text": self.text,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
        }


@dataclass
class LevelUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    requests: int = 0
    cached_requests: int = 0

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def to_dict(self) -> dict[str, int]:
        return {
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "total_tokens": self.total_tokens,
            "requests": self.requests,
            "cached_requests": self.cached_requests,
        }


class UsageLedger:
    """Thread-safe per-level running totals."""

    def __init__(self):
        self._lock = threading.Lock()
        self._levels = {level: LevelUsage() for level in LEVELS}

    def record(self, level: str, response: EngineResponse) -> None:
        with self._lock:
            u = self._levels[level]
            u.prompt_tokens += response.prompt_tokens
            u.completion_tokens += response.completion_tokens
            u.requests += 1
            u.cached_requests += int(response.cached)

    def merge(self, other: UsageLedger) -> None:
        snap = other.snapshot()
        with self._lock:
            for level, u in snap.items():
                mine = self._levels[level]
                mine.prompt_tokens += u.prompt_tokens
                mine.completion_tokens += u.completion_tokens
                mine.requests += u.requests
                mine.cached_requests += u.cached_requests

    def snapshot(self) -> dict[str, LevelUsage]:
        with self._lock:
            return {k: LevelUsage(**vars(v)) for k, v in self._levels.items()}

    def level(self, level: str) -> LevelUsage:
        return self.snapshot()[level]

    def total(self) -> LevelUsage:
        out = LevelUsage()
        for u in self.snapshot().values():
            out.prompt_tokens += u.prompt_tokens
            out.completion_tokens += u.completion_tokens
            out.requests += u.requests
            out.cached_requests += u.cached_requests
        return out


def usage_report(ledger: UsageLedger) -> dict[str, dict[str, int]]:
    """Per-level totals plus a ``total`` entry equal to their sum."""
    report = {level: u.to_dict() for level, u in ledger.snapshot().items()}
    report["total"] = ledger.total().to_dict()
    return report


def estimate_tokens(text: str) -> int:
    # Rough whitespace count; used only by offline engines.
    return len(text.split())


class Engine:
    """Base class. Subclasses implement :meth:`_complete`."""

    engine_id = "engine"

    def __init__(self, ledger: UsageLedger | None = None):
        self.ledger = ledger if ledger is not None else UsageLedger()

    def complete(self, request: EngineRequest) -> EngineResponse:
        response = self._complete(request)
        self.ledger.record(request.level, response)
        return response

    def _complete(self, request: EngineRequest) -> EngineResponse:
        raise NotImplementedError


class EchoEngine(Engine):
    """Returns the user content verbatim; reports zero tokens."""

    engine_id = "echo"

    def _complete(self, request):
        return EngineResponse(request.user_text)


class CallableEngine(Engine):
    """Wraps a plain function ``request -> str`` (a simulated model)."""

    def __init__(self, fn: Callable[[EngineRequest], str], engine_id: str = "callable",
                 ledger: UsageLedger | None = None, count_tokens: bool = True):
        super().__init__(ledger)
        self.fn = fn
        self.engine_id = engine_id
        self.count_tokens = count_tokens

    def _complete(self, request):
        text = self.fn(request)
        if not self.count_tokens:
            return EngineResponse(text)
        return EngineResponse(
            text,
            prompt_tokens=estimate_tokens(request.system_text) + estimate_tokens(request.user_text),
            completion_tokens=estimate_tokens(text),
        )


@dataclass(frozen=True)
class ScriptRecord:
    match: str
    response: str
    mode: str | None = None  # falls back to the engine's mode
    usage: tuple[int, int] | None = None


class ScriptedEngine(Engine):
    """Replays a fixed transcript.

    Exact records are looked up by the full user text. Substring records are
    tried in transcript order and the first whose ``match`` occurs in the user
    text wins. Exact matches take precedence.
    """

    def __init__(self, records: Iterable[ScriptRecord | tuple[str, str]], mode: str = "exact",
                 engine_id: str = "scripted", ledger: UsageLedger | None = None,
                 count_tokens: bool = True):
        super().__init__(ledger)
        if mode not in ("exact", "substring"):
            raise ValueError(f"mode must be 'exact' or 'substring', got {mode!r}")
        self.mode = mode
        self.engine_id = engine_id
        self.count_tokens = count_tokens
        self._exact: dict[str, ScriptRecord] = {}
        self._substring: list[ScriptRecord] = []
        self.misses = 0
        self._lock = threading.Lock()
        for rec in records:
            if not isinstance(rec, ScriptRecord):
                rec = ScriptRecord(*rec)
            if (rec.mode or mode) == "exact":
                self._exact.setdefault(rec.match, rec)
            else:
                self._substring.append(rec)

    @classmethod
    def from_file(cls, path: str | os.PathLike, **kwargs) -> ScriptedEngine:
        """Load a transcript: a JSON list (or JSONL) of ``{match, response, mode?, usage?}``."""
        text = Path(path).read_text(encoding="utf-8")
        stripped = text.lstrip()
        if stripped.startswith("["):
            raw = json.loads(text)
        elif stripped.startswith("{") and '"records"' in stripped[:200]:
            doc = json.loads(text)
            kwargs.setdefault("mode", doc.get("mode", "exact"))
            raw = doc["records"]
        else:
            raw = [json.loads(line) for line in text.splitlines() if line.strip()]
        return cls([_record_from_dict(r) for r in raw], **kwargs)

    def lookup(self, user_text: str) -> ScriptRecord:
        rec = self._exact.get(user_text)
        if rec is not None:
            return rec
        for rec in self._substring:
            if rec.match in user_text:
                return rec
        with self._lock:
            self.misses += 1
        raise UnscriptedRequestError(user_text)

    def _complete(self, request):
        rec = self.lookup(request.user_text)
        if rec.usage is not None:
            return EngineResponse(rec.response, *rec.usage)
        if not self.count_tokens:
            return EngineResponse(rec.response)
        return EngineResponse(
            rec.response,
            prompt_tokens=estimate_tokens(request.system_text) + estimate_tokens(request.user_text),
            completion_tokens=estimate_tokens(rec.response),
        )


def _record_from_dict(data: Mapping[str, Any]) -> ScriptRecord:
    usage = data.get("usage")
    if usage is not None:
        usage = (int(usage["prompt_tokens"]), int(usage["completion_tokens"]))
    return ScriptRecord(str(data["match"]), str(data["response"]), data.get("mode"), usage)


def write_transcript(path: str | os.PathLike, records: Sequence[ScriptRecord], mode: str = "exact") -> None:
    doc = {
        "mode": mode,
        "records": [
            {k: v for k, v in {"match": r.match, "response": r.response, "mode": r.mode}.items() if v is not None}
            for r in records
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1, ensure_ascii=False), encoding="utf-8")


class HTTPEngine(Engine):
    """OpenAI-compatible chat completions client with bounded retries."""

    def __init__(self, model: str, endpoint: str = "https://api.openai.com/v1",
                 api_key: str | None = None, timeout: float = 60.0, max_retries: int = 3,
                 backoff: Sequence[float] = (1.0, 2.0, 4.0), ledger: UsageLedger | None = None,
                 client: httpx.Client | None = None, sleep: Callable[[float], None] = time.sleep):
        super().__init__(ledger)
        self.model = model
        self.endpoint = endpoint.rstrip("/")
        self.engine_id = f"http:{self.endpoint}:{model}"
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.max_retries = max_retries
        self.backoff = tuple(backoff)
        self._sleep = sleep
        self._client = client or httpx.Client(timeout=timeout)

    def payload(self, request: EngineRequest) -> dict[str, Any]:
        messages = []
        if request.system_text:
            messages.append({"role": "system", "content": request.system_text})
        messages.append({"role": "user", "content": request.user_text})
        body: dict[str, Any] = {
            "model": self.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.seed is not None:
            body["seed"] = request.seed
        return body

    def _complete(self, request):
        url = f"{self.endpoint}/chat/completions"
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        body = self.payload(request)
        last: str = ""
        for attempt in range(self.max_retries + 1):
            if attempt:
                delay = self.backoff[min(attempt - 1, len(self.backoff) - 1)]
                log.warning("retrying %s in %.1fs after %s", self.engine_id, delay, last)
                self._sleep(delay)
            try:
                resp = self._client.post(url, json=body, headers=headers)
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                last = f"{type(exc).__name__}: {exc}"
                continue
            if resp.status_code in RETRYABLE_STATUS:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 300:
                raise ProtocolError(resp.status_code, resp.text)
            data = resp.json()
            try:
                text = data["choices"][0]["message"]["content"] or ""
            except (KeyError, IndexError, TypeError) as exc:
                raise ProtocolError(resp.status_code, f"malformed body: {exc}") from exc
            usage = data.get("usage") or {}
            return EngineResponse(
                text,
                prompt_tokens=int(usage.get("prompt_tokens", 0)),
                completion_tokens=int(usage.get("completion_tokens", 0)),
            )
        raise TransportError(f"{self.engine_id}: retries exhausted ({last})")


def cache_key(engine_id: str, request: EngineRequest) -> str:
    canonical = json.dumps(
        [engine_id, request.system_text, request.user_text, request.temperature,
         request.max_tokens, request.seed],
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class CachedEngine(Engine):
    """Directory-backed response cache in front of another engine.

    Hits are recorded in this engine's ledger with ``cached=True`` and their
    stored token counts; the wrapped engine's ledger only sees misses.
    """

    def __init__(self, inner: Engine, cache_dir: str | os.PathLike, ledger: UsageLedger | None = None,
                 on_warning: Callable[[str], None] | None = None):
        super().__init__(ledger)
        self.inner = inner
        self.engine_id = inner.engine_id
        self.cache_dir = Path(cache_dir)
        self.hits = 0
        self.misses = 0
        self._on_warning = on_warning
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self._count_lock = threading.Lock()

    def _key_lock(self, key: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(key, threading.Lock())

    def _path(self, key: str) -> Path:
        return self.cache_dir / key[:2] / f"{key}.json"

    def _warn(self, message: str) -> None:
        log.warning(message)
        if self._on_warning is not None:
            self._on_warning(message)

    def _complete(self, request):
        key = cache_key(self.engine_id, request)
        path = self._path(key)
        try:
            if path.exists():
                data = json.loads(path.read_text(encoding="utf-8"))
                with self._count_lock:
                    self.hits += 1
                return EngineResponse(data["text"], data["prompt_tokens"], data["completion_tokens"], cached=True)
        except (OSError, ValueError, KeyError) as exc:
            self._warn(f"cache read failed for {key[:12]}: {exc}; calling engine uncached")
            return self._miss(request)
        with self._key_lock(key):
            # another writer may have filled it while we waited
            if path.exists():
                return self._complete(request)
            response = self._miss(request)
            try:
                path.parent.mkdir(parents=True, exist_ok=True)
                fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
                with os.fdopen(fd, "w", encoding="utf-8") as fh:
                    json.dump(response.to_dict(), fh, ensure_ascii=False)
                os.replace(tmp, path)
            except OSError as exc:
                self._warn(f"cache write failed for {key[:12]}: {exc}")
            return response

    def _miss(self, request: EngineRequest) -> EngineResponse:
        with self._count_lock:
            self.misses += 1
        return self.inner.complete(request)


@dataclass
class EngineSet:
    """Engines bound per call level; any of them may alias the same instance."""

    program: Engine
    optimizer: Engine
    meta: Engine

    @classmethod
    def single(cls, engine: Engine) -> EngineSet:
        return cls(engine, engine, engine)

    def for_level(self, level: str) -> Engine:
        return getattr(self, level)

    def distinct(self) -> list[Engine]:
        out: list[Engine] = []
        for e in (self.program, self.optimizer, self.meta):
            if all(e is not o for o in out):
                out.append(e)
        return out

    def combined_usage(self) -> UsageLedger:
        ledger = UsageLedger()
        for e in self.distinct():
            ledger.merge(e.ledger)
        return ledger
