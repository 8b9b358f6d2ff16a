"""Teacher annotation: k reasoning-trace completions per question.

Every (question, sample_index) pair is one cache file under
cache_root/<question_id>/<sample_index>.json, written atomically on
success. That single decision buys everything else: resume is "request
whatever has no file", interrupts lose at most the in-flight calls, and a
deterministic endpoint makes a resumed run byte-identical to an
uninterrupted one.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .clients import (
    ChatClient,
    HttpChatClient,
    MockChatClient,
    RateLimiter,
    call_with_retries,
)
from .corpus import CHAT_TEMPLATES, AnswerSample, GenerationConfig, QuestionRecord
from .errors import AuthError, ConfigError, TransportError
from .fsutil import atomic_write_json

__all__ = [
    "AnnotateReport",
    "TeacherSpec",
    "annotate",
    "resume",
    "split_completion",
]


@dataclass(frozen=True)
class TeacherSpec:
    endpoint: str
    model_id: str
    auth_env: str = "TEACHER_API_KEY"
    gen_config: GenerationConfig = GenerationConfig()
    max_retries: int = 5
    requests_per_minute: int = 600
    max_workers: int = 4

    def __post_init__(self) -> None:
        if not self.endpoint:
            raise ConfigError("teacher endpoint must be non-empty")
        if self.max_retries < 0:
            raise ConfigError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.requests_per_minute <= 0:
            raise ConfigError(
                f"requests_per_minute must be positive, got {self.requests_per_minute}"
            )
        if self.max_workers <= 0:
            raise ConfigError(f"max_workers must be positive, got {self.max_workers}")

    def to_dict(self) -> dict:
        return {
            "endpoint": self.endpoint,
            "model_id": self.model_id,
            "auth_env": self.auth_env,
            "gen_config": self.gen_config.to_dict(),
            "max_retries": self.max_retries,
            "requests_per_minute": self.requests_per_minute,
            "max_workers": self.max_workers,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "TeacherSpec":
        data = dict(payload)
        known = {
            "endpoint",
            "model_id",
            "auth_env",
            "gen_config",
            "max_retries",
            "requests_per_minute",
            "max_workers",
        }
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown teacher keys: {sorted(unknown)}")
        for required in ("endpoint", "model_id"):
            if required not in data:
                raise ConfigError(f"teacher spec missing {required!r}")
        gen_raw = data.pop("gen_config", None)
        if gen_raw is not None:
            data["gen_config"] = GenerationConfig.from_dict(gen_raw)
        return cls(**data)


def split_completion(text: str) -> tuple[str, str, bool]:
    """Split a completion into (reasoning_trace, final_text, delimited).

    Both known delimiter conventions are tried. Text before the opening
    delimiter is preamble and dropped. A completion with no recognizable
    delimiter pair comes back whole as the trace with an empty final and the
    flag cleared, so nothing is ever silently lost.
    """
    for opening, closing in CHAT_TEMPLATES.values():
        start = text.find(opening)
        if start < 0:
            continue
        end = text.find(closing, start + len(opening))
        if end < 0:
            continue
        trace = text[start + len(opening) : end]
        final = text[end + len(closing) :]
        return trace, final, True
    return text, "", False


@dataclass
class AnnotateReport:
    requested: int = 0
    cached: int = 0
    failures: list[tuple[str, int, str]] = field(default_factory=list)
    undelimited: int = 0
    unannotated_questions: list[str] = field(default_factory=list)


def _sample_path(cache_root: Path, question_id: str, sample_index: int) -> Path:
    return cache_root / question_id / f"{sample_index}.json"


def _load_cached(path: Path, question_id: str, sample_index: int) -> dict | None:
    """Read one cached sample; quarantine anything corrupt or mismatched."""
    if not path.exists():
        return None
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
        if (
            payload["question_id"] == question_id
            and payload["sample_index"] == sample_index
            and isinstance(payload["reasoning_trace"], str)
            and isinstance(payload["final_text"], str)
        ):
            return payload
    except (json.JSONDecodeError, KeyError, TypeError, OSError):
        pass
    try:
        os.replace(path, path.with_suffix(".quarantine"))
    except OSError:
        pass
    return None


def _default_client(teacher: TeacherSpec) -> ChatClient:
    if teacher.endpoint.startswith("mock://"):
        return MockChatClient(model=teacher.model_id)
    return HttpChatClient(
        teacher.endpoint, teacher.model_id, auth_env=teacher.auth_env
    )


def annotate(
    questions: Sequence[QuestionRecord],
    teacher: TeacherSpec,
    k: int,
    cache_root: str | Path,
    *,
    client: ChatClient | None = None,
    rate_limiter: RateLimiter | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[list[AnswerSample], AnnotateReport]:
    """Collect k samples per question, reusing every cached sample.

    Workers run in a bounded pool behind a shared sliding-window rate
    limiter. Auth failure aborts the whole batch immediately; a transport
    failure that survives all retries is recorded and leaves a gap. Results
    are re-read from the cache and sorted by (question_id, sample_index), so
    the output does not depend on worker scheduling.
    """
    if k <= 0:
        raise ConfigError(f"k must be positive, got {k}")
    root = Path(cache_root)
    root.mkdir(parents=True, exist_ok=True)

    unique: list[QuestionRecord] = []
    seen_ids: set[str] = set()
    for q in questions:
        if q.id not in seen_ids:
            seen_ids.add(q.id)
            unique.append(q)

    live = client if client is not None else _default_client(teacher)
    live.probe()
    limiter = rate_limiter or RateLimiter(teacher.requests_per_minute)

    work: list[tuple[QuestionRecord, int]] = []
    cached = 0
    for q in unique:
        for idx in range(k):
            if _load_cached(_sample_path(root, q.id, idx), q.id, idx) is None:
                work.append((q, idx))
            else:
                cached += 1

    report = AnnotateReport(requested=len(work), cached=cached)

    def run_one(q: QuestionRecord, idx: int) -> None:
        def attempt() -> str:
            limiter.acquire()  # retries count against the window too
            return live.complete(
                [{"role": "user", "content": q.text}],
                teacher.gen_config,
                model=teacher.model_id,
            )

        text = call_with_retries(
            attempt, max_retries=teacher.max_retries, sleep=sleep
        )
        trace, final, delimited = split_completion(text)
        atomic_write_json(
            _sample_path(root, q.id, idx),
            {
                "question_id": q.id,
                "sample_index": idx,
                "reasoning_trace": trace,
                "final_text": final,
                "teacher_id": teacher.model_id,
                "gen_config": teacher.gen_config.to_dict(),
                "delimited": delimited,
            },
        )

    if work:
        with ThreadPoolExecutor(max_workers=teacher.max_workers) as pool:
            futures = {pool.submit(run_one, q, idx): (q, idx) for q, idx in work}
            try:
                for fut in as_completed(futures):
                    q, idx = futures[fut]
                    exc = fut.exception()
                    if exc is None:
                        continue
                    if isinstance(exc, AuthError):
                        raise exc
                    if isinstance(exc, TransportError):
                        report.failures.append((q.id, idx, str(exc)))
                    else:
                        raise exc
            except AuthError:
                pool.shutdown(wait=False, cancel_futures=True)
                raise
        report.failures.sort(key=lambda f: (f[0], f[1]))

    samples: list[AnswerSample] = []
    annotated_ids: set[str] = set()
    for q in unique:
        for idx in range(k):
            payload = _load_cached(_sample_path(root, q.id, idx), q.id, idx)
            if payload is None:
                continue
            annotated_ids.add(q.id)
            if not payload.get("delimited", True):
                report.undelimited += 1
            samples.append(
                AnswerSample(
                    question_id=payload["question_id"],
                    sample_index=payload["sample_index"],
                    reasoning_trace=payload["reasoning_trace"],
                    final_text=payload["final_text"],
                    teacher_id=payload.get("teacher_id", teacher.model_id),
                    gen_config=GenerationConfig.from_dict(payload.get("gen_config", {})),
                )
            )
    report.unannotated_questions = [q.id for q in unique if q.id not in annotated_ids]
    samples.sort(key=lambda s: (s.question_id, s.sample_index))
    return samples, report


def resume(
    questions: Sequence[QuestionRecord],
    teacher: TeacherSpec,
    k: int,
    cache_root: str | Path,
    *,
    client: ChatClient | None = None,
    rate_limiter: RateLimiter | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[list[AnswerSample], AnnotateReport]:
    """Fill the gaps of a prior partial run. Identical to annotate except
    that a missing cache directory is an error rather than a fresh start."""
    root = Path(cache_root)
    if not root.exists():
        raise ConfigError(f"no annotation cache to resume at {root}")
    return annotate(
        questions,
        teacher,
        k,
        root,
        client=client,
        rate_limiter=rate_limiter,
        sleep=sleep,
    )
