"""Chat-completion gateway: caching, retries, rate limiting, and backends.

Every model call in the pipeline goes through LlmGateway, which enforces
deterministic settings (temperature 0), replays identical requests from an
append-only response cache, retries transient backend failures with jittered
exponential backoff, and bounds both in-flight concurrency and request rate.

Two backends ship here: RemoteBackend speaks the common chat-completions
HTTP protocol, MockBackend replays canned fixtures for offline runs.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping

import httpx

log = logging.getLogger(__name__)

ENDPOINT_ENV = "TRIALMATCH_LLM_ENDPOINT"
MODEL_ENV = "TRIALMATCH_LLM_MODEL"
KEY_ENV = "TRIALMATCH_LLM_KEY"


class GatewayError(Exception):
    """Base for all gateway failures."""


class ConfigurationError(GatewayError):
    """Missing credentials or a request that violates gateway policy."""


class TransientError(GatewayError):
    """A retryable backend failure (timeouts, 429s, 5xx)."""


class TransportError(GatewayError):
    """A non-retryable failure, or a retry budget exhausted."""


class FixtureError(GatewayError):
    """A mock fixture file that cannot be loaded."""


@dataclass(frozen=True, slots=True)
class ChatRequest:
    model: str
    system_text: str
    user_text: str
    temperature: float = 0.0
    max_output_tokens: int = 1024

    def __post_init__(self) -> None:
        if not self.system_text.strip() or not self.user_text.strip():
            raise ValueError("chat request requires non-empty system and user text")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")


@dataclass(frozen=True, slots=True)
class ChatResponse:
    text: str
    backend_id: str
    cached: bool
    latency_ms: float
    attempts: int = 1


def request_key(request: ChatRequest) -> str:
    """Content hash identifying a request for cache lookups."""
    payload = json.dumps(
        {
            "model": request.model,
            "system": request.system_text,
            "user": request.user_text,
            "temperature": request.temperature,
        },
        sort_keys=True,
        ensure_ascii=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


REQUEST_HEADER_PREFIX = "Request-Id:"


def format_request_header(**fields: object) -> str:
    """First prompt line carrying machine-readable request coordinates.

    The mock backend matches fixtures against these fields, so every
    pipeline prompt starts with one.
    """
    body = ";".join(f"{key}={value}" for key, value in fields.items())
    return f"{REQUEST_HEADER_PREFIX} {body}"


def parse_request_header(user_text: str) -> dict[str, str]:
    """Inverse of format_request_header; {} when no header is present."""
    first_line, _, _ = user_text.partition("\n")
    if not first_line.startswith(REQUEST_HEADER_PREFIX):
        return {}
    fields: dict[str, str] = {}
    for part in first_line[len(REQUEST_HEADER_PREFIX) :].strip().split(";"):
        key, separator, value = part.partition("=")
        if separator:
            fields[key.strip()] = value.strip()
    return fields


class ResponseCache:
    """Append-only JSONL cache of responses keyed by request content hash.

    Corrupt trailing lines (from an interrupted writer) are skipped with a
    warning instead of failing the load.
    """

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[str, str] = {}
        self._load()

    def _load(self) -> None:
        if not self.path.exists():
            return
        skipped = 0
        with self.path.open(encoding="utf-8") as handle:
            for line in handle:
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    self._entries[row["key"]] = row["response"]
                except (json.JSONDecodeError, KeyError, TypeError):
                    skipped += 1
        if skipped:
            log.warning("%s: skipped %d corrupt cache line(s)", self.path, skipped)

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: str) -> str | None:
        with self._lock:
            return self._entries.get(key)

    def put(self, key: str, response: str) -> None:
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = response
            row = {
                "key": key,
                "response": response,
                "ts": datetime.now(timezone.utc).isoformat(),
            }
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as handle:
                handle.write(json.dumps(row, sort_keys=True) + "\n")


class TokenBucket:
    """Blocking token-bucket rate limiter."""

    def __init__(self, rate_per_second: float, capacity: float | None = None) -> None:
        if rate_per_second <= 0:
            raise ValueError("rate_per_second must be positive")
        self.rate = float(rate_per_second)
        self.capacity = float(capacity) if capacity is not None else max(1.0, self.rate)
        self._tokens = self.capacity
        self._updated = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(
                    self.capacity, self._tokens + (now - self._updated) * self.rate
                )
                self._updated = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            time.sleep(wait)


@dataclass(slots=True)
class GatewayConfig:
    max_in_flight: int = 8
    requests_per_second: float | None = None
    max_attempts: int = 5
    backoff_base_s: float = 0.5
    backoff_cap_s: float = 30.0
    require_zero_temperature: bool = True
    retry_jitter_seed: int | None = None

    def __post_init__(self) -> None:
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


class LlmGateway:
    """Single entry point for chat completions with policy enforcement."""

    def __init__(
        self,
        backend,
        cache_path: str | Path | None = None,
        config: GatewayConfig | None = None,
        sleep=time.sleep,
    ) -> None:
        self.backend = backend
        self.config = config or GatewayConfig()
        self.cache = ResponseCache(cache_path) if cache_path else None
        self._slots = threading.Semaphore(self.config.max_in_flight)
        self._bucket = (
            TokenBucket(self.config.requests_per_second)
            if self.config.requests_per_second
            else None
        )
        self._jitter = random.Random(self.config.retry_jitter_seed)
        self._jitter_lock = threading.Lock()
        self._sleep = sleep

    @property
    def default_model(self) -> str:
        return getattr(self.backend, "default_model", "default")

    def _backoff_delay(self, attempt: int) -> float:
        base = self.config.backoff_base_s * (2.0 ** (attempt - 1))
        base = min(base, self.config.backoff_cap_s)
        with self._jitter_lock:
            factor = 0.5 + 0.5 * self._jitter.random()
        return base * factor

    def complete(self, request: ChatRequest) -> ChatResponse:
        if self.config.require_zero_temperature and request.temperature != 0.0:
            raise ConfigurationError(
                f"pipeline requests must use temperature 0, got {request.temperature}"
            )
        key = request_key(request)
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                return ChatResponse(
                    text=hit,
                    backend_id=self.backend.backend_id,
                    cached=True,
                    latency_ms=0.0,
                    attempts=0,
                )
        with self._slots:
            if self._bucket is not None:
                self._bucket.acquire()
            last_error: Exception | None = None
            for attempt in range(1, self.config.max_attempts + 1):
                started = time.monotonic()
                try:
                    text = self.backend.send(request)
                except TransientError as exc:
                    last_error = exc
                    log.warning(
                        "transient backend failure (attempt %d/%d): %s",
                        attempt,
                        self.config.max_attempts,
                        exc,
                    )
                    if attempt < self.config.max_attempts:
                        self._sleep(self._backoff_delay(attempt))
                    continue
                latency_ms = (time.monotonic() - started) * 1000.0
                if self.cache is not None:
                    self.cache.put(key, text)
                return ChatResponse(
                    text=text,
                    backend_id=self.backend.backend_id,
                    cached=False,
                    latency_ms=latency_ms,
                    attempts=attempt,
                )
        raise TransportError(
            f"backend failed after {self.config.max_attempts} attempts: {last_error}"
        ) from last_error


class MockBackend:
    """Replays fixture responses; unmatched requests get a canned refusal.

    Fixtures match a request either by exact user text or by a subset of
    the fields in its Request-Id header line, in file order.
    """

    backend_id = "mock"
    default_model = "mock"

    def __init__(self) -> None:
        self._exact: dict[str, str] = {}
        self._field_matchers: list[tuple[dict[str, str], str]] = []
        self._lock = threading.Lock()
        self.call_count = 0

    def add_fixture(
        self,
        response: str,
        user_text: str | None = None,
        fields: Mapping[str, object] | None = None,
    ) -> None:
        if (user_text is None) == (fields is None):
            raise FixtureError("fixture needs exactly one of user_text or fields")
        if user_text is not None:
            self._exact[user_text] = response
        else:
            matcher = {str(k): str(v) for k, v in fields.items()}
            if not matcher:
                raise FixtureError("fields matcher must be non-empty")
            self._field_matchers.append((matcher, response))

    def load_fixtures(self, path: str | Path) -> int:
        """Load a JSONL fixture file; returns the number of fixtures added."""
        path = Path(path)
        added = 0
        with path.open(encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, 1):
                if not line.strip():
                    continue
                where = f"{path.name}:{lineno}"
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise FixtureError(f"{where}: invalid JSON ({exc.msg})") from exc
                if not isinstance(row, dict) or not isinstance(
                    row.get("response"), str
                ):
                    raise FixtureError(f"{where}: fixture needs a string response")
                user_text = row.get("user_text")
                fields = row.get("fields")
                try:
                    self.add_fixture(row["response"], user_text, fields)
                except FixtureError as exc:
                    raise FixtureError(f"{where}: {exc}") from None
                added += 1
        return added

    def send(self, request: ChatRequest) -> str:
        with self._lock:
            self.call_count += 1
        exact = self._exact.get(request.user_text)
        if exact is not None:
            return exact
        header = parse_request_header(request.user_text)
        if header:
            for matcher, response in self._field_matchers:
                if all(header.get(k) == v for k, v in matcher.items()):
                    return response
        digest = hashlib.sha256(request.user_text.encode("utf-8")).hexdigest()[:12]
        return f"MOCK-REFUSAL: no fixture matches request {digest}"


def mock_register(backend: MockBackend, fixture_path: str | Path) -> int:
    return backend.load_fixtures(fixture_path)


class RemoteBackend:
    """Chat-completions HTTP backend with bearer-token auth."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str,
        timeout_s: float = 60.0,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        if not endpoint:
            raise ConfigurationError("remote backend requires an endpoint URL")
        if not model:
            raise ConfigurationError("remote backend requires a model name")
        if not api_key:
            raise ConfigurationError("remote backend requires an API key")
        self.endpoint = endpoint.rstrip("/")
        self.default_model = model
        self.backend_id = f"remote:{model}"
        self._client = httpx.Client(
            timeout=timeout_s,
            transport=transport,
            headers={"Authorization": f"Bearer {api_key}"},
        )

    @classmethod
    def from_env(
        cls,
        environ: Mapping[str, str] | None = None,
        transport: httpx.BaseTransport | None = None,
    ) -> "RemoteBackend":
        environ = os.environ if environ is None else environ
        missing = [
            name for name in (ENDPOINT_ENV, MODEL_ENV, KEY_ENV) if not environ.get(name)
        ]
        if missing:
            raise ConfigurationError(
                "remote backend is not configured; set " + ", ".join(missing)
            )
        return cls(
            endpoint=environ[ENDPOINT_ENV],
            model=environ[MODEL_ENV],
            api_key=environ[KEY_ENV],
            transport=transport,
        )

    def send(self, request: ChatRequest) -> str:
        payload = {
            "model": request.model,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        try:
            response = self._client.post(
                f"{self.endpoint}/chat/completions", json=payload
            )
        except httpx.TransportError as exc:
            raise TransientError(f"transport failure: {exc}") from exc
        if response.status_code == 429 or response.status_code >= 500:
            raise TransientError(f"HTTP {response.status_code} from backend")
        if response.status_code >= 400:
            raise TransportError(
                f"HTTP {response.status_code} from backend: {response.text[:200]}"
            )
        try:
            return response.json()["choices"][0]["message"]["content"]
        except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed backend response: {exc}") from exc

    def close(self) -> None:
        self._client.close()
