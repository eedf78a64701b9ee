"""Chat and embedding providers.

Two provider families sit behind small protocols: HTTP-backed ones for live
runs (OpenAI-compatible endpoints, configured via environment variables) and
deterministic ones for tests and offline runs.  Embeddings are always
L2-normalized at ingestion so similarity is a plain dot product.
"""

from __future__ import annotations

import hashlib
import json
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import requests

ROLES = ("system", "user", "assistant")


class ProviderError(RuntimeError):
    """A provider failed after exhausting its retries."""

    def __init__(self, message: str, fingerprint: str | None = None):
        super().__init__(message)
        self.fingerprint = fingerprint


@dataclass
class ChatRequest:
    """Ordered chat messages as (role, text) pairs."""

    messages: list[tuple[str, str]]
    temperature: float = 0.0
    max_output_tokens: int = 2048

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("chat request needs at least one message")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        previous = None
        for role, _text in self.messages:
            if role not in ROLES:
                raise ValueError(f"unknown role {role!r}")
            if role == "assistant" and previous == "assistant":
                raise ValueError("two consecutive assistant messages")
            previous = role


def request_fingerprint(messages: list[tuple[str, str]]) -> str:
    """Stable hash of the concatenated message texts.

    Exact-match keying for scripted providers: any prompt change (templates,
    spliced query results) changes the key.
    """
    joined = "\x1d".join(f"{role}\x1f{text}" for role, text in messages)
    return hashlib.sha256(joined.encode("utf-8")).hexdigest()


def estimate_tokens(text: str) -> int:
    """Characters/4 heuristic; a budget, not an exact count."""
    return math.ceil(len(text) / 4)


class ChatProvider(Protocol):
    def chat(self, request: ChatRequest) -> str: ...


class EmbeddingProvider(Protocol):
    def embed(self, texts: list[str]) -> list[np.ndarray]: ...


# ---------------------------------------------------------------------------
# deterministic providers
# ---------------------------------------------------------------------------

class ScriptedChatProvider:
    """Replies keyed by the fingerprint of the request messages."""

    def __init__(self, responses: dict[str, str] | None = None):
        self.responses = dict(responses or {})
        self.calls = 0

    def script(self, messages: list[tuple[str, str]], reply: str) -> None:
        self.responses[request_fingerprint(messages)] = reply

    def chat(self, request: ChatRequest) -> str:
        self.calls += 1
        key = request_fingerprint(request.messages)
        if key not in self.responses:
            raise ProviderError(
                f"no scripted reply for request {key[:12]}…", fingerprint=key
            )
        return self.responses[key]


class SequenceChatProvider:
    """Replies consumed in order; for end-to-end fixtures where computing
    prompt hashes up front would be circular."""

    def __init__(self, replies: list[str]):
        self._replies = list(replies)
        self._next = 0
        self.calls = 0

    def chat(self, request: ChatRequest) -> str:
        self.calls += 1
        if self._next >= len(self._replies):
            raise ProviderError(
                f"scripted reply sequence exhausted after {len(self._replies)} calls",
                fingerprint=request_fingerprint(request.messages),
            )
        reply = self._replies[self._next]
        self._next += 1
        return reply


class CallableChatProvider:
    """Adapter turning a plain function into a chat provider."""

    def __init__(self, fn: Callable[[ChatRequest], str]):
        self._fn = fn
        self.calls = 0

    def chat(self, request: ChatRequest) -> str:
        self.calls += 1
        return self._fn(request)


def normalize_vector(vector: np.ndarray) -> np.ndarray:
    v = np.asarray(vector, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0 or not math.isfinite(norm):
        raise ValueError("cannot normalize zero or non-finite vector")
    return v / norm


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Dot product of unit vectors; symmetric, in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a, b))


class ScriptedEmbeddingProvider:
    """Embeddings from a fixed text -> vector table (normalized at load).

    Unknown texts raise unless ``fallback`` is set, in which case they get a
    deterministic hash-derived vector (useful when a fixture only pins the
    pairs whose similarity matters).
    """

    def __init__(self, table: dict[str, list[float]],
                 fallback: "HashEmbeddingProvider | None" = None):
        dims = {len(v) for v in table.values()}
        if len(dims) > 1:
            raise ValueError(f"inconsistent embedding dimensions: {sorted(dims)}")
        self.table = {
            text: normalize_vector(np.array(vec)) for text, vec in table.items()
        }
        self.fallback = fallback
        self.calls = 0

    @classmethod
    def from_file(cls, path: str | Path,
                  fallback: "HashEmbeddingProvider | None" = None
                  ) -> "ScriptedEmbeddingProvider":
        with open(path, "r", encoding="utf-8") as fh:
            table = json.load(fh)
        if not isinstance(table, dict):
            raise ValueError("embedding table file must map text to vector")
        return cls(table, fallback=fallback)

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        self.calls += 1
        out = []
        for text in texts:
            if text in self.table:
                out.append(self.table[text])
            elif self.fallback is not None:
                out.append(self.fallback.embed([text])[0])
            else:
                raise ProviderError(f"no scripted embedding for {text!r}")
        return out


class HashEmbeddingProvider:
    """Deterministic pseudo-embeddings derived from a text digest.

    Platform-independent: equal texts give identical unit vectors (cosine 1),
    different texts give quasi-random directions.  Meant for offline runs and
    golden tests, not for semantic similarity.
    """

    def __init__(self, dim: int = 32):
        if dim < 2 or dim > 64:
            raise ValueError("dim must be in [2, 64]")
        self.dim = dim
        self.calls = 0

    def _vector(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        raw = np.frombuffer(digest[: self.dim], dtype=np.uint8).astype(np.float64)
        return normalize_vector(raw - 127.5)

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        self.calls += 1
        return [self._vector(t) for t in texts]


class CachedEmbedder:
    """Per-text cache in front of an embedding provider.

    Caching never changes results, only call counts; safe for concurrent
    use.
    """

    def __init__(self, inner: EmbeddingProvider):
        self.inner = inner
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        self.inner_calls = 0

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        with self._lock:
            missing = sorted({t for t in texts if t not in self._cache})
            if missing:
                self.inner_calls += 1
                vectors = self.inner.embed(missing)
                if len(vectors) != len(missing):
                    raise ProviderError(
                        f"embedding provider returned {len(vectors)} vectors "
                        f"for {len(missing)} texts"
                    )
                for text, vec in zip(missing, vectors):
                    self._cache[text] = normalize_vector(vec)
            return [self._cache[t] for t in texts]


# ---------------------------------------------------------------------------
# HTTP providers
# ---------------------------------------------------------------------------

@dataclass
class RetryPolicy:
    max_attempts: int = 4
    backoff_base: float = 0.5
    backoff_cap: float = 8.0

    def delay(self, attempt: int) -> float:
        return min(self.backoff_cap, self.backoff_base * (2 ** attempt))


_RETRYABLE_STATUS = {429, 500, 502, 503, 504}


def _post_with_retries(session, url: str, payload: dict, headers: dict,
                       timeout: float, policy: RetryPolicy,
                       sleep: Callable[[float], None],
                       fingerprint: str) -> dict:
    last_error = "no attempts made"
    for attempt in range(policy.max_attempts):
        try:
            response = session.post(url, json=payload, headers=headers,
                                    timeout=timeout)
        except requests.RequestException as exc:
            last_error = str(exc)
        else:
            if response.status_code == 200:
                return response.json()
            last_error = f"HTTP {response.status_code}: {response.text[:200]}"
            if response.status_code not in _RETRYABLE_STATUS:
                break
        if attempt + 1 < policy.max_attempts:
            sleep(policy.delay(attempt))
    raise ProviderError(
        f"request {fingerprint[:12]}… failed: {last_error}",
        fingerprint=fingerprint,
    )


class HttpChatProvider:
    """OpenAI-compatible chat-completions endpoint."""

    def __init__(self, base_url: str, model: str, api_key: str | None = None,
                 timeout: float = 120.0, retry: RetryPolicy | None = None,
                 session=None, sleep: Callable[[float], None] = time.sleep):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.retry = retry or RetryPolicy()
        self._session = session or requests.Session()
        self._sleep = sleep
        self.calls = 0

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def chat(self, request: ChatRequest) -> str:
        self.calls += 1
        payload = {
            "model": self.model,
            "messages": [
                {"role": role, "content": text} for role, text in request.messages
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        fingerprint = request_fingerprint(request.messages)
        body = _post_with_retries(
            self._session, f"{self.base_url}/chat/completions", payload,
            self._headers(), self.timeout, self.retry, self._sleep, fingerprint,
        )
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(
                f"malformed chat response for {fingerprint[:12]}…: {exc}",
                fingerprint=fingerprint,
            ) from exc


class HttpEmbeddingProvider:
    """OpenAI-compatible embeddings endpoint; vectors normalized on receipt."""

    def __init__(self, base_url: str, model: str, api_key: str | None = None,
                 timeout: float = 60.0, retry: RetryPolicy | None = None,
                 batch_size: int = 128, session=None,
                 sleep: Callable[[float], None] = time.sleep):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.retry = retry or RetryPolicy()
        self.batch_size = batch_size
        self._session = session or requests.Session()
        self._sleep = sleep
        self.calls = 0

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        self.calls += 1
        vectors: list[np.ndarray] = []
        for start in range(0, len(texts), self.batch_size):
            chunk = texts[start:start + self.batch_size]
            fingerprint = hashlib.sha256(
                "\x1f".join(chunk).encode("utf-8")
            ).hexdigest()
            body = _post_with_retries(
                self._session, f"{self.base_url}/embeddings",
                {"model": self.model, "input": chunk},
                self._headers(), self.timeout, self.retry, self._sleep,
                fingerprint,
            )
            try:
                data = sorted(body["data"], key=lambda d: d["index"])
                vectors.extend(
                    normalize_vector(np.array(d["embedding"], dtype=np.float64))
                    for d in data
                )
            except (KeyError, TypeError) as exc:
                raise ProviderError(
                    f"malformed embedding response: {exc}",
                    fingerprint=fingerprint,
                ) from exc
        if len(vectors) != len(texts):
            raise ProviderError(
                f"embedding endpoint returned {len(vectors)} vectors "
                f"for {len(texts)} inputs"
            )
        return vectors
