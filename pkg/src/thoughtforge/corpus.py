"""Core record types, the run manifest, and JSONL shard I/O.

Questions and answers are plain frozen dataclasses with explicit dict
round-trips; nothing here depends on the network or on any model client.
The manifest is the accounting ledger every stage must write to, and its
validate() is what the report command leans on.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import random
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .errors import ConfigError, LedgerError
from .fsutil import atomic_write_json, atomic_write_text

__all__ = [
    "CHAT_TEMPLATES",
    "DOMAINS",
    "SOURCE_KINDS",
    "AnswerSample",
    "DatasetManifest",
    "GenerationConfig",
    "QuestionRecord",
    "ShardReadError",
    "StageEntry",
    "WriteResult",
    "format_chat",
    "read_shards",
    "record_id",
    "repeat_to_size",
    "sample_uniform",
    "write_shards",
]

DOMAINS = ("math", "code", "science")
SOURCE_KINDS = ("fully_synthetic", "semi_synthetic", "non_synthetic")

# template id -> (opening delimiter, closing delimiter) around the reasoning
# trace. The final answer text follows the closing delimiter with no marker
# of its own.
CHAT_TEMPLATES: dict[str, tuple[str, str]] = {
    "r1": ("<think>", "</think>"),
    "sky_t1": ("<|begin_of_thought|>", "<|end_of_thought|>"),
}


@dataclass(frozen=True)
class GenerationConfig:
    """Sampling parameters sent with every completion request."""

    temperature: float = 0.7
    top_p: float = 1.0
    max_new_tokens: int = 32_768
    n_samples: int = 1

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature}")
        if not (0 < self.top_p <= 1):
            raise ConfigError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.max_new_tokens <= 0:
            raise ConfigError(f"max_new_tokens must be positive, got {self.max_new_tokens}")
        if self.n_samples <= 0:
            raise ConfigError(f"n_samples must be positive, got {self.n_samples}")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "GenerationConfig":
        return cls(
            temperature=payload.get("temperature", 0.7),
            top_p=payload.get("top_p", 1.0),
            max_new_tokens=payload.get("max_new_tokens", 32_768),
            n_samples=payload.get("n_samples", 1),
        )


def record_id(text: str, source_id: str) -> str:
    """Stable content id: sha256 over the source id and NFC-normalized text.

    Two ingests of the same row from the same source always get the same id,
    which is what makes caching and resume idempotent.
    """
    norm = unicodedata.normalize("NFC", text)
    h = hashlib.sha256()
    h.update(source_id.encode("utf-8"))
    h.update(b"\x00")
    h.update(norm.encode("utf-8"))
    return h.hexdigest()


@dataclass(frozen=True)
class QuestionRecord:
    id: str
    text: str
    domain: str
    source_id: str
    source_kind: str
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.domain not in DOMAINS:
            raise ConfigError(f"unknown domain {self.domain!r}; expected one of {DOMAINS}")
        if self.source_kind not in SOURCE_KINDS:
            raise ConfigError(
                f"unknown source_kind {self.source_kind!r}; expected one of {SOURCE_KINDS}"
            )
        if not self.text.strip():
            raise ConfigError("question text must be non-empty")

    @classmethod
    def create(
        cls,
        text: str,
        domain: str,
        source_id: str,
        source_kind: str,
        metadata: Mapping[str, str] | None = None,
    ) -> "QuestionRecord":
        return cls(
            id=record_id(text, source_id),
            text=text,
            domain=domain,
            source_id=source_id,
            source_kind=source_kind,
            metadata=dict(metadata or {}),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "text": self.text,
            "domain": self.domain,
            "source_id": self.source_id,
            "source_kind": self.source_kind,
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "QuestionRecord":
        try:
            return cls(
                id=payload["id"],
                text=payload["text"],
                domain=payload["domain"],
                source_id=payload["source_id"],
                source_kind=payload["source_kind"],
                metadata=dict(payload.get("metadata", {})),
            )
        except KeyError as exc:
            raise ConfigError(f"question record missing field {exc.args[0]!r}") from exc


@dataclass(frozen=True)
class AnswerSample:
    question_id: str
    sample_index: int
    reasoning_trace: str
    final_text: str
    teacher_id: str
    gen_config: GenerationConfig

    def __post_init__(self) -> None:
        if self.sample_index < 0:
            raise ConfigError(f"sample_index must be >= 0, got {self.sample_index}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "question_id": self.question_id,
            "sample_index": self.sample_index,
            "reasoning_trace": self.reasoning_trace,
            "final_text": self.final_text,
            "teacher_id": self.teacher_id,
            "gen_config": self.gen_config.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "AnswerSample":
        try:
            return cls(
                question_id=payload["question_id"],
                sample_index=payload["sample_index"],
                reasoning_trace=payload["reasoning_trace"],
                final_text=payload["final_text"],
                teacher_id=payload["teacher_id"],
                gen_config=GenerationConfig.from_dict(payload.get("gen_config", {})),
            )
        except KeyError as exc:
            raise ConfigError(f"answer sample missing field {exc.args[0]!r}") from exc


def format_chat(
    question: QuestionRecord,
    sample: AnswerSample,
    template_id: str = "r1",
) -> tuple[str, str]:
    """Render (prompt, completion) for one question/answer pair.

    The completion wraps the reasoning trace in the template's delimiters and
    appends the final answer directly after the closing delimiter.
    """
    try:
        opening, closing = CHAT_TEMPLATES[template_id]
    except KeyError:
        raise ConfigError(
            f"unknown chat template {template_id!r}; expected one of {sorted(CHAT_TEMPLATES)}"
        ) from None
    completion = f"{opening}{sample.reasoning_trace}{closing}{sample.final_text}"
    return question.text, completion


# ---------------------------------------------------------------------------
# Manifest ledger


@dataclass(frozen=True)
class StageEntry:
    """One row of the accounting ledger: a stage consumed input_count items
    of one unit and split them exactly into kept plus removed."""

    stage_name: str
    input_count: int
    kept_count: int
    removed_count: int
    by_domain: Mapping[str, int] = field(default_factory=dict)
    unit: str = "questions"
    detail: Mapping[str, Any] = field(default_factory=dict)

    def validate(self) -> None:
        if min(self.input_count, self.kept_count, self.removed_count) < 0:
            raise LedgerError(f"stage {self.stage_name!r} has a negative count")
        if self.input_count != self.kept_count + self.removed_count:
            raise LedgerError(
                f"stage {self.stage_name!r} does not conserve items: "
                f"input {self.input_count} != kept {self.kept_count} "
                f"+ removed {self.removed_count}"
            )
        if self.unit not in ("questions", "answers"):
            raise LedgerError(f"stage {self.stage_name!r} has unknown unit {self.unit!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "stage_name": self.stage_name,
            "input_count": self.input_count,
            "kept_count": self.kept_count,
            "removed_count": self.removed_count,
            "by_domain": dict(self.by_domain),
            "unit": self.unit,
            "detail": dict(self.detail),
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "StageEntry":
        return cls(
            stage_name=payload["stage_name"],
            input_count=payload["input_count"],
            kept_count=payload["kept_count"],
            removed_count=payload["removed_count"],
            by_domain=dict(payload.get("by_domain", {})),
            unit=payload.get("unit", "questions"),
            detail=dict(payload.get("detail", {})),
        )


@dataclass
class DatasetManifest:
    run_id: str
    config_hash: str
    stages: list[StageEntry] = field(default_factory=list)
    seeds: dict[str, int] = field(default_factory=dict)

    def add_stage(self, entry: StageEntry) -> None:
        """Append a stage after checking conservation and chain continuity.

        Chain continuity only binds consecutive stages that count the same
        unit: an answer-level stage between two question-level stages does
        not break the question chain.
        """
        entry.validate()
        prev = next(
            (s for s in reversed(self.stages) if s.unit == entry.unit),
            None,
        )
        if prev is not None and entry.input_count != prev.kept_count:
            raise LedgerError(
                f"stage {entry.stage_name!r} consumed {entry.input_count} "
                f"{entry.unit} but the previous {entry.unit} stage "
                f"{prev.stage_name!r} kept {prev.kept_count}"
            )
        self.stages.append(entry)

    def validate(self) -> None:
        seen: dict[str, StageEntry] = {}
        for entry in self.stages:
            entry.validate()
            prev = seen.get(entry.unit)
            if prev is not None and entry.input_count != prev.kept_count:
                raise LedgerError(
                    f"stage {entry.stage_name!r} consumed {entry.input_count} "
                    f"{entry.unit} but the previous {entry.unit} stage "
                    f"{prev.stage_name!r} kept {prev.kept_count}"
                )
            seen[entry.unit] = entry

    def final_count(self, unit: str = "questions") -> int:
        for entry in reversed(self.stages):
            if entry.unit == unit:
                return entry.kept_count
        return 0

    def to_json(self) -> str:
        payload = {
            "run_id": self.run_id,
            "config_hash": self.config_hash,
            "stages": [s.to_dict() for s in self.stages],
            "seeds": dict(self.seeds),
        }
        return json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        payload = json.loads(text)
        return cls(
            run_id=payload["run_id"],
            config_hash=payload["config_hash"],
            stages=[StageEntry.from_dict(s) for s in payload.get("stages", [])],
            seeds={k: int(v) for k, v in payload.get("seeds", {}).items()},
        )

    def save(self, path: Path) -> None:
        atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path: Path) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Shard I/O


class ShardReadError(ConfigError):
    """A JSONL line failed to parse or to validate as a record."""

    def __init__(self, path: Path, line_no: int, message: str) -> None:
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


@dataclass(frozen=True)
class WriteResult:
    record_count: int
    shard_paths: tuple[Path, ...]


def _resolve_shard_paths(path_glob: str | Path) -> list[Path]:
    path = Path(path_glob)
    if path.is_file():
        return [path]
    if path.is_dir():
        return sorted(path.glob("*.jsonl"))
    parent = path.parent if path.parent != Path("") else Path(".")
    matches = sorted(parent.glob(path.name))
    return [p for p in matches if p.is_file()]


def read_shards(
    path_glob: str | Path,
    record_type: Callable[[Mapping[str, Any]], Any] = QuestionRecord.from_dict,
    on_error: Callable[[ShardReadError], None] | None = None,
) -> list[Any]:
    """Read records from a JSONL file, a directory of *.jsonl, or a glob.

    Files are read in lexicographic path order so results are reproducible.
    Blank lines are skipped. A malformed line raises ShardReadError unless
    on_error is given, in which case the error is reported and the line
    dropped.
    """
    paths = _resolve_shard_paths(path_glob)
    if not paths:
        raise ConfigError(f"no shard files match {path_glob}")
    records: list[Any] = []
    for path in paths:
        with path.open("r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    payload = json.loads(line)
                    records.append(record_type(payload))
                except (json.JSONDecodeError, ConfigError, TypeError) as exc:
                    err = ShardReadError(path, line_no, str(exc))
                    if on_error is None:
                        raise err from exc
                    on_error(err)
    return records


def write_shards(
    records: Sequence[Any],
    out_dir: str | Path,
    *,
    shard_size: int = 10_000,
    prefix: str = "part",
) -> WriteResult:
    """Write records as JSONL shards of at most shard_size lines each.

    Shards are named {prefix}-00000.jsonl onward and written atomically, so a
    crash mid-write never leaves a truncated shard behind.
    """
    if shard_size <= 0:
        raise ConfigError(f"shard_size must be positive, got {shard_size}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: list[Path] = []
    for shard_index in range(0, max(1, (len(records) + shard_size - 1) // shard_size)):
        chunk = records[shard_index * shard_size : (shard_index + 1) * shard_size]
        if not chunk and shard_index > 0:
            break
        lines = [
            json.dumps(rec.to_dict(), ensure_ascii=False, sort_keys=True) for rec in chunk
        ]
        path = out / f"{prefix}-{shard_index:05d}.jsonl"
        atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))
        paths.append(path)
    return WriteResult(record_count=len(records), shard_paths=tuple(paths))


# ---------------------------------------------------------------------------
# Seeded sampling helpers


def sample_uniform(records: Sequence[Any], n: int, seed: int) -> list[Any]:
    """Uniform sample of n records without replacement, order-stable in seed."""
    if n < 0:
        raise ConfigError(f"sample size must be >= 0, got {n}")
    if n > len(records):
        raise ConfigError(
            f"cannot sample {n} from {len(records)} records without replacement; "
            "use repeat_to_size for oversampling"
        )
    rng = random.Random(seed)
    return rng.sample(list(records), n)


def repeat_to_size(records: Sequence[Any], n: int, seed: int) -> list[Any]:
    """Grow records to exactly n by whole-corpus repetition plus a sampled
    remainder. Repeated copies keep their original id and get a metadata
    marker with the repetition pass they came from."""
    if not records:
        raise ConfigError("cannot repeat an empty record list")
    if n < 0:
        raise ConfigError(f"target size must be >= 0, got {n}")
    whole, rest = divmod(n, len(records))
    out: list[Any] = []
    for rep in range(whole):
        out.extend(_mark_repetition(rec, rep) for rec in records)
    if rest:
        sampled = sample_uniform(records, rest, seed)
        out.extend(_mark_repetition(rec, whole) for rec in sampled)
    return out


def _mark_repetition(record: Any, rep_index: int) -> Any:
    if rep_index == 0:
        return record
    meta = dict(getattr(record, "metadata", {}) or {})
    meta["repetition"] = str(rep_index)
    return dataclasses.replace(record, metadata=meta)
