"""Answer-level filters and reasoning-trace transforms.

These operate on the sample groups produced by annotation: length-based
selection, judge-mediated consensus and verification, structural checks,
and the trace-compression helpers. Judge-backed filters fail open (keep and
flag) because dropping good teacher samples on a judge hiccup is the more
expensive mistake.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Sequence

from .clients import ChatClient, JsonCache
from .corpus import AnswerSample, GenerationConfig, QuestionRecord
from .errors import ConfigError
from .prompts import render
from .textsim import TokenizerSpec, tokenize

__all__ = [
    "ConsensusOutcome",
    "filter_by_answer_length",
    "filter_trace_length",
    "llm_verify",
    "majority_consensus",
    "strip_self_reflection",
    "structural_filter",
]

# Verification judges are deterministic on purpose: temperature 0, and the
# repetition penalty pinned via the extra-params channel since the core
# GenerationConfig carries only the always-sent fields.
_VERIFY_GEN = GenerationConfig(temperature=0.0, top_p=1.0, max_new_tokens=1024)
_VERIFY_EXTRA = {"presence_penalty": 1.0, "response_format": {"type": "json_object"}}

_CONSENSUS_GEN = GenerationConfig(temperature=1.0, top_p=1.0, max_new_tokens=1024)

# Math and science consensus judges see only each solution's tail; code is
# compared functionally on full text.
_CONSENSUS_TAIL_CHARS = 1000

_SELF_REFLECTION_KEYWORDS = ("wait", "but wait", "but the question")

TRACE_LENGTH_GRID = (2048, 4096, 8192)


def filter_by_answer_length(
    group: Sequence[AnswerSample],
    keep: int,
    direction: str = "shortest",
) -> list[AnswerSample]:
    """Keep the samples with extreme total length (trace plus final).

    Ties break toward the lower sample_index. The result is returned in
    sample_index order regardless of the length ordering used to pick it.
    """
    if direction not in ("shortest", "longest"):
        raise ConfigError(f"direction must be shortest or longest, got {direction!r}")
    if keep < 0:
        raise ConfigError(f"keep must be >= 0, got {keep}")

    def total(sample: AnswerSample) -> int:
        return len(sample.reasoning_trace) + len(sample.final_text)

    sign = 1 if direction == "shortest" else -1
    ranked = sorted(group, key=lambda s: (sign * total(s), s.sample_index))
    chosen = ranked[: min(keep, len(group))]
    return sorted(chosen, key=lambda s: s.sample_index)


@dataclass(frozen=True)
class ConsensusOutcome:
    kept_indices: tuple[int, ...]
    discarded_indices: tuple[int, ...]  # judge answers outside the group
    flagged: bool


_INT_LIST_RE = re.compile(r"\[[^\[\]]*\]")


def _parse_index_list(text: str) -> list[int] | None:
    """First bracketed integer list in the response, or None."""
    for blob in _INT_LIST_RE.findall(text):
        try:
            payload = json.loads(blob)
        except json.JSONDecodeError:
            continue
        if isinstance(payload, list) and all(
            isinstance(v, int) and not isinstance(v, bool) for v in payload
        ):
            return payload
    return None


def _solution_block(sample: AnswerSample, domain: str) -> str:
    text = f"{sample.reasoning_trace}{sample.final_text}"
    if domain == "code":
        return text
    return text[-_CONSENSUS_TAIL_CHARS:]


def majority_consensus(
    question: QuestionRecord,
    group: Sequence[AnswerSample],
    judge_client: ChatClient,
    domain: str,
    *,
    cache: JsonCache | None = None,
) -> ConsensusOutcome:
    """Ask the judge which samples agree with the plurality answer.

    The judge sees zero-indexed "Solution {i}:" blocks in sample_index
    order and must answer with a list of indices. Indices outside the group
    are discarded and flag the group; an unparseable answer after one retry
    keeps everything, flagged.
    """
    ordered = sorted(group, key=lambda s: s.sample_index)
    if len(ordered) <= 1:
        # A single sample is its own majority; no call spent.
        return ConsensusOutcome(
            kept_indices=tuple(s.sample_index for s in ordered),
            discarded_indices=(),
            flagged=False,
        )
    template = f"consensus_{domain}"
    blocks = "\n\n".join(
        f"Solution {i}:\n{_solution_block(sample, domain)}"
        for i, sample in enumerate(ordered)
    )
    prompt = render(
        template, {"question": question.text, "list of all solutions": blocks}
    )
    cache_key = f"consensus:{domain}:{judge_client.default_model}:{question.id}:{len(ordered)}"
    cached = cache.get(cache_key) if cache else None
    if cached is not None:
        raw = cached.get("indices")
    else:
        raw = None
        for _ in range(2):  # one retry on an unparseable list
            response = judge_client.complete(
                [{"role": "user", "content": prompt}], _CONSENSUS_GEN
            )
            raw = _parse_index_list(response)
            if raw is not None:
                break
        if cache:
            cache.put(cache_key, {"indices": raw})
    if raw is None:
        return ConsensusOutcome(
            kept_indices=tuple(s.sample_index for s in ordered),
            discarded_indices=(),
            flagged=True,
        )
    in_range = [i for i in raw if 0 <= i < len(ordered)]
    discarded = tuple(sorted(set(raw) - set(in_range)))
    kept = tuple(ordered[i].sample_index for i in sorted(set(in_range)))
    return ConsensusOutcome(
        kept_indices=kept,
        discarded_indices=discarded,
        flagged=bool(discarded),
    )


def _parse_decision(text: str) -> tuple[bool | None, str]:
    for blob in re.findall(r"\{.*?\}", text, re.DOTALL):
        try:
            payload = json.loads(blob)
        except json.JSONDecodeError:
            continue
        if isinstance(payload, dict) and isinstance(payload.get("decision"), bool):
            return payload["decision"], str(payload.get("reasoning", ""))
    return None, ""


def _ask_decision(
    judge_client: ChatClient,
    prompt: str,
    cache: JsonCache | None,
    cache_key: str,
) -> tuple[bool | None, str]:
    cached = cache.get(cache_key) if cache else None
    if cached is not None:
        return cached.get("decision"), cached.get("reasoning", "")
    decision: bool | None = None
    reasoning = ""
    for _ in range(2):
        response = judge_client.complete(
            [{"role": "user", "content": prompt}], _VERIFY_GEN, extra=_VERIFY_EXTRA
        )
        decision, reasoning = _parse_decision(response)
        if decision is not None:
            break
    if cache:
        cache.put(cache_key, {"decision": decision, "reasoning": reasoning})
    return decision, reasoning


def llm_verify(
    question: QuestionRecord,
    sample: AnswerSample,
    judge_client: ChatClient,
    domain: str,
    *,
    cache: JsonCache | None = None,
) -> tuple[bool, str, bool]:
    """Judge whether the sample answers the question. Returns (keep,
    reasoning, flagged); a judge that cannot produce a decision keeps the
    sample and flags it."""
    template = "verify_answer_code" if domain == "code" else "verify_answer"
    answer = f"{sample.reasoning_trace}{sample.final_text}"
    prompt = render(template, {"question": question.text, "answer": answer})
    key = (
        f"verify:{domain}:{judge_client.default_model}:"
        f"{sample.question_id}:{sample.sample_index}"
    )
    decision, reasoning = _ask_decision(judge_client, prompt, cache, key)
    if decision is None:
        return True, reasoning, True
    return decision, reasoning, False


_STRUCTURAL_TEMPLATES = {
    "english_only": "verify_english_only",
    "no_long_paragraph": "verify_paragraph_length",
}


def structural_filter(
    sample: AnswerSample,
    rule: str,
    *,
    question: QuestionRecord | None = None,
    judge_client: ChatClient | None = None,
    cache: JsonCache | None = None,
) -> tuple[bool, bool]:
    """Apply one structural rule; returns (keep, flagged).

    python_tag is a pure substring check on the completion. The other two
    rules delegate to the judge with their registry prompts and fail open.
    """
    text = f"{sample.reasoning_trace}{sample.final_text}"
    if rule == "python_tag":
        return "```python" in text, False
    template = _STRUCTURAL_TEMPLATES.get(rule)
    if template is None:
        raise ConfigError(
            f"unknown structural rule {rule!r}; expected python_tag, "
            "english_only, or no_long_paragraph"
        )
    if judge_client is None or question is None:
        raise ConfigError(f"rule {rule!r} needs a question and a judge client")
    prompt = render(template, {"question": question.text, "answer": text})
    key = (
        f"structural:{rule}:{judge_client.default_model}:"
        f"{sample.question_id}:{sample.sample_index}"
    )
    decision, _ = _ask_decision(judge_client, prompt, cache, key)
    if decision is None:
        return True, True
    return decision, False


_SEGMENT_RE = re.compile(r"[.?!]+\s+")


def _segments(text: str) -> list[str]:
    """Split into sentence segments, each keeping its own terminator and
    trailing whitespace, so that "".join(segments) == text."""
    out: list[str] = []
    start = 0
    for match in _SEGMENT_RE.finditer(text):
        out.append(text[start : match.end()])
        start = match.end()
    if start < len(text):
        out.append(text[start:])
    return out


def strip_self_reflection(
    trace: str,
    keywords: Sequence[str] = _SELF_REFLECTION_KEYWORDS,
) -> str:
    """Remove sentences that open with a self-reflection keyword.

    Keyword matching is case-insensitive and whole-word (so "waiting" is
    not "wait"). Joining the surviving segments unchanged makes the
    transform the identity on keyword-free text and a fixpoint on its own
    output.
    """
    lowered_keywords = sorted((kw.lower() for kw in keywords), key=len, reverse=True)
    kept: list[str] = []
    for segment in _segments(trace):
        head = segment.lstrip().lower()
        drop = any(
            head.startswith(kw) and not head[len(kw) : len(kw) + 1].isalnum()
            for kw in lowered_keywords
        )
        if not drop:
            kept.append(segment)
    return "".join(kept)


def filter_trace_length(
    samples: Sequence[AnswerSample],
    max_tokens: int,
    tokenizer: TokenizerSpec = TokenizerSpec(),
) -> list[AnswerSample]:
    """Keep samples whose reasoning trace has at most max_tokens tokens."""
    if max_tokens < 0:
        raise ConfigError(f"max_tokens must be >= 0, got {max_tokens}")
    return [
        s for s in samples if len(tokenize(tokenizer, s.reasoning_trace)) <= max_tokens
    ]
