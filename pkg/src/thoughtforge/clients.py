"""Model-endpoint clients, the offline mock, rate limiting, and retries.

The live client speaks the widely used chat-completions JSON shape over
httpx. The mock client answers the same interface deterministically with no
network at all: identical request bodies always get identical responses, so
a resumed run reproduces its outputs byte for byte. Both are intentionally
small; everything above them (caching, retry policy, rate limiting) is
composed in this module rather than baked into a client.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from collections import deque
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence

import httpx

from .corpus import GenerationConfig
from .errors import AuthError, ConfigError, TransportError
from .fsutil import atomic_write_text

__all__ = [
    "ChatClient",
    "EmbedClient",
    "HttpChatClient",
    "HttpEmbedClient",
    "JsonCache",
    "MockChatClient",
    "MockEmbedClient",
    "RateLimiter",
    "call_with_retries",
]

Message = Mapping[str, str]


class ChatClient(Protocol):
    default_model: str

    def complete(
        self,
        messages: Sequence[Message],
        gen_config: GenerationConfig,
        *,
        model: str | None = None,
        extra: Mapping[str, Any] | None = None,
    ) -> str: ...

    def probe(self) -> None: ...


class EmbedClient(Protocol):
    def embed(self, texts: Sequence[str]) -> list[list[float]]: ...


def _request_body(
    messages: Sequence[Message],
    gen_config: GenerationConfig,
    model: str,
    extra: Mapping[str, Any] | None,
) -> dict[str, Any]:
    body: dict[str, Any] = {
        "model": model,
        "messages": [dict(m) for m in messages],
        "temperature": gen_config.temperature,
        "top_p": gen_config.top_p,
        "max_tokens": gen_config.max_new_tokens,
    }
    if extra:
        body.update(extra)
    return body


class HttpChatClient:
    """Chat-completions client for any endpoint speaking the standard shape.

    The bearer token is read from the named environment variable at call
    time, never stored in configs or logs.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        *,
        auth_env: str = "TEACHER_API_KEY",
        timeout: float = 120.0,
    ) -> None:
        self.endpoint = endpoint.rstrip("/")
        self.default_model = model
        self.auth_env = auth_env
        self._http = httpx.Client(timeout=timeout)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.auth_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _raise_for_status(self, response: httpx.Response) -> None:
        code = response.status_code
        if code in (401, 403):
            raise AuthError(
                f"endpoint rejected credentials from ${self.auth_env} (HTTP {code})"
            )
        if code == 429 or code >= 500:
            raise TransportError(f"HTTP {code} from {self.endpoint}", retryable=True)
        if code >= 400:
            raise TransportError(
                f"HTTP {code} from {self.endpoint}: {response.text[:500]}",
                retryable=False,
            )

    def complete(
        self,
        messages: Sequence[Message],
        gen_config: GenerationConfig,
        *,
        model: str | None = None,
        extra: Mapping[str, Any] | None = None,
    ) -> str:
        body = _request_body(messages, gen_config, model or self.default_model, extra)
        try:
            response = self._http.post(
                f"{self.endpoint}/chat/completions",
                json=body,
                headers=self._headers(),
            )
        except httpx.HTTPError as exc:
            raise TransportError(f"request to {self.endpoint} failed: {exc}") from exc
        self._raise_for_status(response)
        try:
            payload = response.json()
            return payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise TransportError(
                f"malformed completion payload from {self.endpoint}", retryable=False
            ) from exc

    def probe(self) -> None:
        """Cheap reachability and auth check before a long batch starts."""
        try:
            response = self._http.get(f"{self.endpoint}/models", headers=self._headers())
        except httpx.HTTPError as exc:
            raise TransportError(f"cannot reach {self.endpoint}: {exc}") from exc
        self._raise_for_status(response)


def _stable_digest(payload: Any) -> int:
    canon = json.dumps(payload, sort_keys=True, ensure_ascii=False)
    return int.from_bytes(
        hashlib.sha256(canon.encode("utf-8")).digest()[:8], "little"
    )


class MockChatClient:
    """Offline stand-in for a chat endpoint.

    Responses are a pure function of the request body, derived through
    sha256 rather than the process-seeded builtin hash, so two processes
    (or an interrupted run and its resume) agree exactly. A script of
    callables can be injected to fault specific calls in tests.
    """

    def __init__(
        self,
        *,
        script: Callable[[int, Mapping[str, Any]], str | None] | None = None,
        latency: float = 0.0,
        model: str = "mock-teacher",
    ) -> None:
        self.default_model = model
        self._script = script
        self._latency = latency
        self._lock = threading.Lock()
        self.requests: list[dict[str, Any]] = []

    def complete(
        self,
        messages: Sequence[Message],
        gen_config: GenerationConfig,
        *,
        model: str | None = None,
        extra: Mapping[str, Any] | None = None,
    ) -> str:
        body = _request_body(messages, gen_config, model or self.default_model, extra)
        with self._lock:
            call_index = len(self.requests)
            self.requests.append({"body": body, "at": time.monotonic()})
        if self._script is not None:
            scripted = self._script(call_index, body)
            if scripted is not None:
                return scripted
        if self._latency:
            time.sleep(self._latency)
        return self._default_response(body)

    def probe(self) -> None:
        return None

    def _default_response(self, body: Mapping[str, Any]) -> str:
        h = _stable_digest(body)
        content = " ".join(str(m.get("content", "")) for m in body["messages"])
        lowered = content.lower()
        if "grade the difficulty level from 1-10" in lowered:
            return json.dumps({"score": 1 + h % 10, "reasoning": "mock difficulty judgement"})
        if "between 1 and 100" in lowered:
            return json.dumps({"score": 1 + h % 100, "reasoning": "mock quality judgement"})
        if "candidate solutions" in lowered:
            # Count only the rendered solution blocks, which sit after the
            # last "candidate solutions" marker; the template's worked
            # example has Solution blocks of its own before it.
            tail = lowered.rsplit("candidate solutions", 1)[-1]
            count = len(re.findall(r"solution \d+:", tail))
            indices = list(range(max(1, count)))
            return f"The agreeing responses are {indices}."
        if lowered.startswith("yes or no") or "is the provided" in lowered or (
            "does the provided" in lowered
        ):
            return json.dumps(
                {"decision": h % 4 != 0, "reasoning": "mock yes/no judgement"}
            )
        if "extract the questions, answer choices, and solutions" in lowered:
            return (
                'QUESTION: "What is the sum of 2 and 3?"\n'
                'ANSWER CHOICES: free response\n'
                'SOLUTION: "5"\n'
                f'QUESTION: "Mock question {h % 1000}: state the identity element '
                'of addition."\n'
                'ANSWER CHOICES: free response\n'
                "SOLUTION: NO ANSWER DETECTED\n"
            )
        if "you are an instructor creating exam questions" in lowered:
            # Refinement: echo the question back, nothing lost, nothing added.
            marker = "here is the question: "
            pos = lowered.find(marker)
            if pos >= 0:
                rest = content[pos + len(marker) :]
                return rest.split("\n", 1)[0].strip()
            return content.strip()
        if "reform the following" in lowered or "generate a question or task" in lowered:
            return f"Mock generated question {h % 100000}: evaluate expression {h % 97} + {h % 89}."
        trace_len = 40 + h % 200
        trace = f"Considering the request step by step. seed={h % 10**8} " + (
            "step " * (trace_len // 5)
        )
        return f"<think>{trace.strip()}</think>The mock final answer is {h % 1000}."


class MockEmbedClient:
    """Deterministic embeddings: a unit vector seeded by the text's sha256.

    An explicit mapping can pin chosen texts to chosen vectors when a test
    needs controlled geometry.
    """

    def __init__(
        self,
        *,
        dim: int = 64,
        mapping: Mapping[str, Sequence[float]] | None = None,
    ) -> None:
        if dim <= 0:
            raise ConfigError(f"embedding dim must be positive, got {dim}")
        self.dim = dim
        self._mapping = {k: list(v) for k, v in (mapping or {}).items()}

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        import numpy as np

        out: list[list[float]] = []
        for text in texts:
            pinned = self._mapping.get(text)
            if pinned is not None:
                out.append(list(pinned))
                continue
            seed = _stable_digest({"embed": text}) % (2**32)
            rng = np.random.default_rng(seed)
            vec = rng.standard_normal(self.dim)
            norm = float(np.linalg.norm(vec))
            out.append((vec / norm).tolist() if norm else vec.tolist())
        return out


class HttpEmbedClient:
    """Thin client for an embeddings endpoint speaking the standard shape."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        *,
        auth_env: str = "TEACHER_API_KEY",
        timeout: float = 60.0,
    ) -> None:
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.auth_env = auth_env
        self._http = httpx.Client(timeout=timeout)

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.auth_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        try:
            response = self._http.post(
                f"{self.endpoint}/embeddings",
                json={"model": self.model, "input": list(texts)},
                headers=headers,
            )
        except httpx.HTTPError as exc:
            raise TransportError(f"request to {self.endpoint} failed: {exc}") from exc
        if response.status_code in (401, 403):
            raise AuthError(
                f"endpoint rejected credentials from ${self.auth_env} "
                f"(HTTP {response.status_code})"
            )
        if response.status_code >= 400:
            raise TransportError(
                f"HTTP {response.status_code} from {self.endpoint}",
                retryable=response.status_code == 429 or response.status_code >= 500,
            )
        payload = response.json()
        rows = sorted(payload["data"], key=lambda row: row["index"])
        return [row["embedding"] for row in rows]


class RateLimiter:
    """Sliding-window limiter: at most per_minute acquisitions in any 60s
    span, not merely per calendar minute. Thread-safe; clock and sleep are
    injectable so tests can drive it with a fake clock."""

    def __init__(
        self,
        per_minute: int,
        *,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        if per_minute <= 0:
            raise ConfigError(f"rate limit must be positive, got {per_minute}")
        self.per_minute = per_minute
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._stamps: deque[float] = deque()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                while self._stamps and now - self._stamps[0] >= 60.0:
                    self._stamps.popleft()
                if len(self._stamps) < self.per_minute:
                    self._stamps.append(now)
                    return
                wait = 60.0 - (now - self._stamps[0])
            # the floor keeps float rounding from producing a sub-resolution
            # wait that would spin without ever advancing the clock
            self._sleep(max(wait, 0.001))


def call_with_retries(
    fn: Callable[[], Any],
    *,
    max_retries: int = 5,
    base_delay: float = 0.5,
    max_delay: float = 30.0,
    sleep: Callable[[float], None] = time.sleep,
) -> Any:
    """Run fn, retrying retryable transport failures with exponential
    backoff (base_delay * 2^attempt, capped). Deliberately jitter-free so a
    replayed run waits the same amounts. Auth failures and non-retryable
    transport errors surface immediately."""
    attempt = 0
    while True:
        try:
            return fn()
        except AuthError:
            raise
        except TransportError as exc:
            if not exc.retryable or attempt >= max_retries:
                raise
            sleep(min(base_delay * (2**attempt), max_delay))
            attempt += 1


class JsonCache:
    """One JSON file per key under a root directory.

    Keys are hashed to file names, so any string is a valid key. A corrupt
    entry is quarantined (renamed aside) and treated as absent rather than
    poisoning the run.
    """

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)

    def _path(self, key: str) -> Path:
        digest = hashlib.sha256(key.encode("utf-8")).hexdigest()
        return self.root / digest[:2] / f"{digest}.json"

    def get(self, key: str) -> Any | None:
        path = self._path(key)
        if not path.exists():
            return None
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except (json.JSONDecodeError, OSError):
            quarantine = path.with_suffix(".quarantine")
            try:
                os.replace(path, quarantine)
            except OSError:
                pass
            return None

    def put(self, key: str, value: Any) -> None:
        path = self._path(key)
        atomic_write_text(
            path, json.dumps(value, ensure_ascii=False, sort_keys=True) + "\n"
        )
