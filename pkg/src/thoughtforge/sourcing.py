"""Question sourcing: ingest existing corpora, generate from seed text, and
run the page-extraction chain.

Three ways questions enter the system, mirroring the three source kinds:
rows copied from an existing file (non-synthetic), questions an LLM writes
from seed text through a registry template (fully/semi-synthetic), and the
four-stage page chain (extract, refine, answerability filter, topic filter)
for scanned material.
"""

from __future__ import annotations

import json
import random
import re
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from .clients import ChatClient, JsonCache, call_with_retries
from .corpus import SOURCE_KINDS, GenerationConfig, QuestionRecord
from .errors import AuthError, ConfigError, StageError, TransportError
from .prompts import render, template_slots

__all__ = [
    "ExtractionResult",
    "GenerateResult",
    "IngestResult",
    "PageExtractionConfig",
    "QUESTION_GEN_CONFIG",
    "SourceSpec",
    "extract_questions_from_pages",
    "generate_from_seed",
    "ingest_existing",
    "load_source_spec",
]

# Question generation temperature is a config default, not a sourced value:
# the upstream recipe fixes judge temperatures but never states one for
# generation, so 1.0 is this engine's documented assumption.
QUESTION_GEN_CONFIG = GenerationConfig(temperature=1.0, top_p=1.0, max_new_tokens=2048)


@dataclass(frozen=True)
class SourceSpec:
    """Declarative description of one question source."""

    source_id: str
    kind: str
    domain: str
    input_path: str | None = None
    seed_corpus_path: str | None = None
    prompt_template_id: str | None = None
    field_mapping: Mapping[str, str] = field(default_factory=dict)
    n: int | None = None  # generation budget for synthetic kinds

    def __post_init__(self) -> None:
        if self.kind not in SOURCE_KINDS:
            raise ConfigError(
                f"source {self.source_id!r}: unknown kind {self.kind!r}; "
                f"expected one of {SOURCE_KINDS}"
            )
        if self.kind == "non_synthetic":
            if not self.input_path or self.seed_corpus_path:
                raise ConfigError(
                    f"source {self.source_id!r}: non_synthetic sources take "
                    "input_path and no seed_corpus_path"
                )
            if self.prompt_template_id:
                raise ConfigError(
                    f"source {self.source_id!r}: non_synthetic sources do not "
                    "use a prompt template"
                )
            if "text" not in self.field_mapping.values():
                raise ConfigError(
                    f"source {self.source_id!r}: field_mapping must map some "
                    "input field to 'text'"
                )
        else:
            if not self.seed_corpus_path or self.input_path:
                raise ConfigError(
                    f"source {self.source_id!r}: synthetic sources take "
                    "seed_corpus_path and no input_path"
                )
            if not self.prompt_template_id:
                raise ConfigError(
                    f"source {self.source_id!r}: synthetic sources need "
                    "prompt_template_id"
                )


def load_source_spec(path: str | Path) -> list[SourceSpec]:
    """Read one spec or a list of specs from a JSON file."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    entries = payload if isinstance(payload, list) else [payload]
    specs = []
    for entry in entries:
        if not isinstance(entry, dict):
            raise ConfigError(f"{path}: each source spec must be an object")
        try:
            specs.append(
                SourceSpec(
                    source_id=entry["source_id"],
                    kind=entry["kind"],
                    domain=entry["domain"],
                    input_path=entry.get("input_path"),
                    seed_corpus_path=entry.get("seed_corpus_path"),
                    prompt_template_id=entry.get("prompt_template_id"),
                    field_mapping=dict(entry.get("field_mapping", {})),
                    n=entry.get("n"),
                )
            )
        except KeyError as exc:
            raise ConfigError(f"{path}: source spec missing {exc.args[0]!r}") from exc
    return specs


@dataclass(frozen=True)
class IngestResult:
    records: tuple[QuestionRecord, ...]
    skipped_empty: int


def ingest_existing(spec: SourceSpec) -> IngestResult:
    """One QuestionRecord per input row.

    field_mapping maps input field names to schema targets: exactly one
    input field must map to "text"; every other mapped field is carried into
    metadata under its target name. Rows whose text is empty or whitespace
    are skipped and counted; duplicates pass through untouched because
    dedup is its own stage.
    """
    if spec.kind != "non_synthetic":
        raise ConfigError(f"source {spec.source_id!r} is not an ingest source")
    text_fields = [src for src, dst in spec.field_mapping.items() if dst == "text"]
    if len(text_fields) != 1:
        raise ConfigError(
            f"source {spec.source_id!r}: exactly one input field must map to 'text'"
        )
    text_field = text_fields[0]
    path = Path(spec.input_path or "")
    if not path.exists():
        raise ConfigError(f"source {spec.source_id!r}: input file {path} not found")

    records: list[QuestionRecord] = []
    skipped = 0
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise StageError(f"{path}:{line_no}: bad JSON row ({exc})") from exc
            if text_field not in row:
                raise StageError(
                    f"{path}:{line_no}: row lacks mapped text field {text_field!r}"
                )
            text = str(row[text_field])
            if not text.strip():
                skipped += 1
                continue
            metadata = {"row": str(line_no)}
            for src, dst in spec.field_mapping.items():
                if dst != "text" and src in row:
                    metadata[dst] = str(row[src])
            records.append(
                QuestionRecord.create(
                    text=text,
                    domain=spec.domain,
                    source_id=spec.source_id,
                    source_kind=spec.kind,
                    metadata=metadata,
                )
            )
    return IngestResult(records=tuple(records), skipped_empty=skipped)


@dataclass(frozen=True)
class GenerateResult:
    records: tuple[QuestionRecord, ...]
    failures: tuple[tuple[str, str], ...]  # (seed_id, reason)


SeedItem = tuple[str, "str | Mapping[str, str]"]


def _slot_values(
    template_id: str, seed_value: str | Mapping[str, str]
) -> dict[str, str]:
    slots = template_slots(template_id)
    if isinstance(seed_value, str):
        if len(slots) != 1:
            raise ConfigError(
                f"template {template_id!r} has slots {slots}; plain-text seeds "
                "fit only single-slot templates - provide per-slot mappings"
            )
        return {slots[0]: seed_value}
    values = {name: str(seed_value[name]) for name in slots if name in seed_value}
    if len(values) != len(slots):
        missing = [name for name in slots if name not in values]
        raise ConfigError(
            f"seed row is missing values for template {template_id!r} slots {missing}"
        )
    return values


def generate_from_seed(
    seed_items: Sequence[SeedItem],
    template_id: str,
    client: ChatClient,
    n: int,
    seed: int,
    *,
    source_id: str,
    domain: str,
    kind: str = "fully_synthetic",
    cache: JsonCache | None = None,
    gen_config: GenerationConfig = QUESTION_GEN_CONFIG,
    max_retries: int = 2,
    max_workers: int = 4,
) -> GenerateResult:
    """Write up to n questions from seed texts through a registry template.

    Each seed item is (seed_id, value) where value is the raw seed text for
    single-slot templates or a field mapping for multi-slot ones. When n is
    below the seed count, a seeded uniform sample of seeds is used. Failed
    or empty generations are dropped and counted; if every seed fails, the
    stage fails. Output order is normalized to (seed_id, template_id), so a
    rerun against the same cache is byte-stable and issues no client calls.
    """
    if n <= 0:
        raise ConfigError(f"generation budget n must be positive, got {n}")
    if not seed_items:
        raise ConfigError(f"source {source_id!r}: no seed items")
    chosen = list(seed_items)
    if n < len(chosen):
        chosen = random.Random(seed).sample(chosen, n)

    prompts: dict[str, str] = {}
    for seed_id, value in chosen:
        prompts[seed_id] = render(template_id, _slot_values(template_id, value))

    results: dict[str, str] = {}
    failures: list[tuple[str, str]] = []

    def run_one(seed_id: str) -> tuple[str, str | None, str]:
        cache_key = f"gen:{source_id}:{template_id}:{seed_id}"
        if cache is not None:
            cached = cache.get(cache_key)
            if cached is not None:
                return seed_id, cached.get("text"), "cached"
        try:
            response = call_with_retries(
                lambda: client.complete(
                    [{"role": "user", "content": prompts[seed_id]}], gen_config
                ),
                max_retries=max_retries,
            )
        except AuthError:
            raise
        except TransportError as exc:
            return seed_id, None, str(exc)
        text = response.strip()
        if cache is not None:
            cache.put(cache_key, {"text": text or None})
        return seed_id, text or None, "generated"

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = [pool.submit(run_one, seed_id) for seed_id in prompts]
        for fut in as_completed(futures):
            seed_id, text, status = fut.result()
            if text:
                results[seed_id] = text
            elif status in ("generated", "cached"):
                failures.append((seed_id, "empty response"))
            else:
                failures.append((seed_id, status))

    if not results:
        raise StageError(
            f"source {source_id!r}: every generation failed ({len(failures)} seeds)"
        )

    records = [
        QuestionRecord.create(
            text=results[seed_id],
            domain=domain,
            source_id=source_id,
            source_kind=kind,
            metadata={"seed_id": seed_id, "template_id": template_id},
        )
        for seed_id in sorted(results)
    ]
    failures.sort()
    return GenerateResult(records=tuple(records), failures=tuple(failures))


# ---------------------------------------------------------------------------
# Page extraction chain


@dataclass(frozen=True)
class PageExtractionConfig:
    source_id: str
    domain: str
    kind: str = "non_synthetic"
    extract_template: str = "extract_page_questions"
    refine_template: str = "refine_extracted_question"
    answerable_template: str = "filter_answerable"
    topic_template: str | None = None  # e.g. the organic-chemistry gate


@dataclass(frozen=True)
class ExtractionResult:
    records: tuple[QuestionRecord, ...]
    stage_counts: Mapping[str, int]
    page_failures: tuple[tuple[str, str], ...]  # (page_id, reason)


_ENTRY_MARKERS = ("QUESTION:", "ANSWER CHOICES:", "SOLUTION:")


def _strip_wrapping_quotes(text: str) -> str:
    text = text.strip()
    if len(text) >= 2 and text[0] == '"' and text[-1] == '"':
        return text[1:-1].strip()
    return text


def _parse_extraction(text: str) -> list[dict[str, str]]:
    """Parse the QUESTION:/ANSWER CHOICES:/SOLUTION: line protocol.

    A marker starts a field; unmarked lines continue the current field, so
    multi-line questions survive. Entries begin at each QUESTION: marker.
    """
    entries: list[dict[str, str]] = []
    current: dict[str, str] | None = None
    open_field: str | None = None
    for line in text.splitlines():
        stripped = line.strip()
        marker = next((m for m in _ENTRY_MARKERS if stripped.startswith(m)), None)
        if marker == "QUESTION:":
            current = {"question": stripped[len(marker) :].strip()}
            entries.append(current)
            open_field = "question"
            continue
        if marker is not None:
            if current is None:
                continue
            fname = "answer_choices" if marker == "ANSWER CHOICES:" else "solution"
            current[fname] = stripped[len(marker) :].strip()
            open_field = fname
            continue
        if current is not None and open_field and stripped:
            current[open_field] = f"{current[open_field]} {stripped}".strip()
    for entry in entries:
        for key in list(entry):
            entry[key] = _strip_wrapping_quotes(entry[key])
    return [e for e in entries if e.get("question")]


def _bool_judge(
    client: ChatClient,
    template: str,
    values: Mapping[str, str],
    cache: JsonCache | None,
    cache_key: str,
) -> bool:
    """Boolean filter with one retry; an undecidable answer drops the
    record, the conservative direction for question intake."""
    cached = cache.get(cache_key) if cache else None
    if cached is not None:
        return bool(cached.get("decision"))
    prompt = render(template, values)
    gen = GenerationConfig(temperature=1.0, top_p=1.0, max_new_tokens=512)
    extra = {"response_format": {"type": "json_object"}}
    decision: bool | None = None
    for _ in range(2):
        response = client.complete(
            [{"role": "user", "content": prompt}], gen, extra=extra
        )
        for blob in re.findall(r"\{.*?\}", response, re.DOTALL):
            try:
                payload = json.loads(blob)
            except json.JSONDecodeError:
                continue
            if isinstance(payload, dict) and isinstance(payload.get("decision"), bool):
                decision = payload["decision"]
                break
        if decision is not None:
            break
    result = bool(decision)  # None -> False: drop when the judge cannot say
    if cache:
        cache.put(cache_key, {"decision": result})
    return result


def extract_questions_from_pages(
    pages: Sequence[tuple[str, str]],
    config: PageExtractionConfig,
    client: ChatClient,
    *,
    cache: JsonCache | None = None,
) -> ExtractionResult:
    """Run the extract -> refine -> answerability -> topic chain.

    Empty pages are skipped outright. A page whose extraction call fails is
    a page-level failure; later judges act per question. "NO ANSWER
    DETECTED" in the solution keeps the question (only the solution is
    unknown). Output is sorted by (page_id, position in page).
    """
    gen = GenerationConfig(temperature=1.0, top_p=1.0, max_new_tokens=4096)
    counts = {
        "pages": 0,
        "extracted": 0,
        "refined": 0,
        "answerable": 0,
        "on_topic": 0,
    }
    page_failures: list[tuple[str, str]] = []
    records: list[QuestionRecord] = []

    for page_id, page_text in pages:
        if not page_text.strip():
            continue
        counts["pages"] += 1
        cache_key = f"extract:{config.source_id}:{page_id}"
        cached = cache.get(cache_key) if cache else None
        if cached is not None:
            extraction = cached["response"]
        else:
            try:
                extraction = call_with_retries(
                    lambda: client.complete(
                        [
                            {
                                "role": "user",
                                "content": render(
                                    config.extract_template,
                                    {"output_extraction": page_text},
                                ),
                            }
                        ],
                        gen,
                    ),
                    max_retries=2,
                )
            except AuthError:
                raise
            except TransportError as exc:
                page_failures.append((page_id, str(exc)))
                continue
            if cache:
                cache.put(cache_key, {"response": extraction})

        for position, entry in enumerate(_parse_extraction(extraction)):
            counts["extracted"] += 1
            refine_key = f"refine:{config.source_id}:{page_id}:{position}"
            cached = cache.get(refine_key) if cache else None
            if cached is not None:
                refined = cached["text"]
            else:
                try:
                    refined = call_with_retries(
                        lambda: client.complete(
                            [
                                {
                                    "role": "user",
                                    "content": render(
                                        config.refine_template,
                                        {
                                            "extracted_question": entry["question"],
                                            "output_extraction": page_text,
                                        },
                                    ),
                                }
                            ],
                            gen,
                        ),
                        max_retries=2,
                    ).strip()
                except AuthError:
                    raise
                except TransportError as exc:
                    page_failures.append((f"{page_id}#{position}", str(exc)))
                    continue
                if cache:
                    cache.put(refine_key, {"text": refined})
            if not refined:
                continue
            counts["refined"] += 1

            if not _bool_judge(
                client,
                config.answerable_template,
                {"improved_question_solution": refined},
                cache,
                f"answerable:{config.source_id}:{page_id}:{position}",
            ):
                continue
            counts["answerable"] += 1

            if config.topic_template is not None:
                if not _bool_judge(
                    client,
                    config.topic_template,
                    {"problem": refined},
                    cache,
                    f"topic:{config.source_id}:{page_id}:{position}",
                ):
                    continue
            counts["on_topic"] += 1

            metadata = {
                "page_id": page_id,
                "position": str(position),
                "extract_template": config.extract_template,
                "refine_template": config.refine_template,
            }
            if entry.get("answer_choices"):
                metadata["answer_choices"] = entry["answer_choices"]
            if entry.get("solution"):
                metadata["solution"] = entry["solution"]
            records.append(
                QuestionRecord.create(
                    text=refined,
                    domain=config.domain,
                    source_id=config.source_id,
                    source_kind=config.kind,
                    metadata=metadata,
                )
            )

    records.sort(key=lambda r: (r.metadata["page_id"], int(r.metadata["position"])))
    return ExtractionResult(
        records=tuple(records),
        stage_counts=counts,
        page_failures=tuple(page_failures),
    )
