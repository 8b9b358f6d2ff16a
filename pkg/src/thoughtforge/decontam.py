"""Benchmark contamination detection and the labeled testbed generator.

A training record is contaminated when it shares any 13-token window with an
evaluation question, or when its indel similarity to one reaches 75. The
n-gram path is hash-indexed with every hit re-verified against the actual
token windows, so a hash collision can never flag a clean record. The indel
path prunes candidates with two exact upper bounds (length ratio and
per-character multiset overlap) evaluated vectorized across the whole eval
index before any quadratic comparison runs.
"""

from __future__ import annotations

import json
import random
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import ConfigError
from .textsim import (
    DEFAULT_HASH_SEED,
    DEFAULT_LCS_CAP,
    TokenizerSpec,
    indel_similarity,
    ngram_hash_list,
    tokenize,
)

__all__ = [
    "ContaminationVerdict",
    "DecontamConfig",
    "DecontamReport",
    "DetectorMetrics",
    "EvalIndex",
    "TestbedRecord",
    "build_eval_index",
    "check_contamination",
    "check_text",
    "decontaminate",
    "load_eval_sets",
    "make_testbed",
    "score_detector",
]

_HIST_BUCKETS = 64


@dataclass(frozen=True)
class DecontamConfig:
    ngram_size: int = 13
    indel_threshold: float = 75.0
    tokenizer: TokenizerSpec = TokenizerSpec()
    hash_seed: int = DEFAULT_HASH_SEED
    lcs_cap: int = DEFAULT_LCS_CAP

    def __post_init__(self) -> None:
        if self.ngram_size <= 0:
            raise ConfigError(f"ngram_size must be positive, got {self.ngram_size}")
        if self.indel_threshold > 100:
            raise ConfigError(
                f"indel_threshold must be <= 100, got {self.indel_threshold}"
            )


@dataclass(frozen=True)
class _EvalRecord:
    eval_set: str
    eval_id: str
    text: str
    tokens: tuple[str, ...]


@dataclass
class EvalIndex:
    """Immutable once built; shared freely across worker threads."""

    config: DecontamConfig
    records: list[_EvalRecord]
    # hash -> [(record position, window start)], with collisions resolved at
    # query time by comparing the actual token windows.
    hash_windows: dict[int, list[tuple[int, int]]]
    lengths: np.ndarray  # capped character lengths, one per record
    histograms: np.ndarray  # (records, 64) capped character-bucket counts


def _char_histogram(text: str) -> np.ndarray:
    hist = np.zeros(_HIST_BUCKETS, dtype=np.int64)
    for ch in text:
        hist[ord(ch) & (_HIST_BUCKETS - 1)] += 1
    return hist


def build_eval_index(
    eval_sets: Mapping[str, Sequence[tuple[str, str]]],
    config: DecontamConfig = DecontamConfig(),
) -> EvalIndex:
    """Index every eval question for both detection paths.

    Questions shorter than ngram_size tokens contribute no n-grams but stay
    full candidates for the similarity path. Set names are walked in sorted
    order so a rebuild from equal inputs is structurally identical.
    """
    if not eval_sets:
        raise ConfigError("no eval sets given")
    records: list[_EvalRecord] = []
    hash_windows: dict[int, list[tuple[int, int]]] = {}
    lengths: list[int] = []
    hists: list[np.ndarray] = []
    seen_ids: dict[str, str] = {}
    for set_name in sorted(eval_sets):
        for eval_id, text in eval_sets[set_name]:
            # ids key the contamination report, so they must be unique even
            # across sets
            if eval_id in seen_ids:
                raise ConfigError(
                    f"duplicate eval id {eval_id!r} (in {seen_ids[eval_id]!r} "
                    f"and {set_name!r})"
                )
            seen_ids[eval_id] = set_name
            pos = len(records)
            toks = tuple(tokenize(config.tokenizer, text))
            records.append(
                _EvalRecord(eval_set=set_name, eval_id=eval_id, text=text, tokens=toks)
            )
            for start, h in enumerate(
                ngram_hash_list(toks, config.ngram_size, seed=config.hash_seed)
            ):
                hash_windows.setdefault(h, []).append((pos, start))
            capped = text[: config.lcs_cap]
            lengths.append(len(capped))
            hists.append(_char_histogram(capped))
    return EvalIndex(
        config=config,
        records=records,
        hash_windows=hash_windows,
        lengths=np.asarray(lengths, dtype=np.int64),
        histograms=np.vstack(hists) if hists else np.zeros((0, _HIST_BUCKETS), np.int64),
    )


@dataclass(frozen=True)
class ContaminationVerdict:
    record_id: str
    contaminated: bool
    method: str  # ngram | indel | both | none
    best_indel: float
    matched_eval_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.contaminated != (self.method != "none"):
            raise ConfigError("verdict method inconsistent with contaminated flag")


def _ngram_hits(tokens: tuple[str, ...], index: EvalIndex) -> set[int]:
    """Positions of eval records sharing a verified n-gram with tokens."""
    n = index.config.ngram_size
    hits: set[int] = set()
    for start, h in enumerate(
        ngram_hash_list(tokens, n, seed=index.config.hash_seed)
    ):
        for pos, win_start in index.hash_windows.get(h, ()):
            if pos in hits:
                continue
            if tokens[start : start + n] == index.records[pos].tokens[win_start : win_start + n]:
                hits.add(pos)
    return hits


def check_text(
    text: str,
    index: EvalIndex,
    record_id: str = "",
    indel_threshold: float | None = None,
) -> ContaminationVerdict:
    """Run both detection paths against the index for one text."""
    config = index.config
    threshold = config.indel_threshold if indel_threshold is None else indel_threshold
    tokens = tuple(tokenize(config.tokenizer, text))
    ngram_matched = _ngram_hits(tokens, index)

    capped = text[: config.lcs_cap]
    length = len(capped)
    hist = _char_histogram(capped)

    hi = np.maximum(index.lengths, length)
    lo = np.minimum(index.lengths, length)
    overlap = np.minimum(index.histograms, hist).sum(axis=1)
    safe_hi = np.where(hi > 0, hi, 1)
    # Both bounds are exact LCS upper bounds, so pruning cannot miss a true
    # indel hit: 100*bound/hi < threshold implies similarity < threshold.
    possible = (100.0 * lo >= threshold * safe_hi) & (
        100.0 * overlap >= threshold * safe_hi
    )
    possible |= hi == 0  # two empty strings are identical
    candidates = np.flatnonzero(possible).tolist()
    # Check n-gram-matched records first: near-verbatim copies sit there and
    # end the scan on the first similarity at or above the threshold.
    candidates.sort(key=lambda pos: (pos not in ngram_matched, abs(int(index.lengths[pos]) - length)))

    best_indel = 0.0
    indel_matched: set[int] = set()
    for pos in candidates:
        sim = indel_similarity(capped, index.records[pos].text[: config.lcs_cap], cap=config.lcs_cap)
        best_indel = max(best_indel, sim)
        if sim >= threshold:
            indel_matched.add(pos)
            break

    matched = ngram_matched | indel_matched
    if ngram_matched and indel_matched:
        method = "both"
    elif ngram_matched:
        method = "ngram"
    elif indel_matched:
        method = "indel"
    else:
        method = "none"
    matched_ids = tuple(sorted({index.records[pos].eval_id for pos in matched}))
    return ContaminationVerdict(
        record_id=record_id,
        contaminated=bool(matched),
        method=method,
        best_indel=best_indel,
        matched_eval_ids=matched_ids,
    )


def check_contamination(
    record: Any,
    index: EvalIndex,
    indel_threshold: float | None = None,
) -> ContaminationVerdict:
    return check_text(
        record.text, index, record_id=record.id, indel_threshold=indel_threshold
    )


@dataclass
class DecontamReport:
    input_count: int
    kept_count: int
    removed_count: int
    by_method: dict[str, int]
    by_eval_set: dict[str, int]
    removed_ids: list[str]

    def to_dict(self) -> dict[str, Any]:
        return {
            "input_count": self.input_count,
            "kept_count": self.kept_count,
            "removed_count": self.removed_count,
            "by_method": dict(self.by_method),
            "by_eval_set": dict(self.by_eval_set),
            "removed_ids": list(self.removed_ids),
        }


def decontaminate(
    records: Sequence[Any],
    eval_sets: Mapping[str, Sequence[tuple[str, str]]],
    config: DecontamConfig = DecontamConfig(),
) -> tuple[list[Any], DecontamReport]:
    """Drop every contaminated record, keeping input order."""
    index = build_eval_index(eval_sets, config)
    eval_set_of = {rec.eval_id: rec.eval_set for rec in index.records}
    clean: list[Any] = []
    by_method: Counter = Counter()
    by_eval_set: Counter = Counter()
    removed_ids: list[str] = []
    for rec in records:
        verdict = check_contamination(rec, index)
        if not verdict.contaminated:
            clean.append(rec)
            continue
        removed_ids.append(rec.id)
        by_method[verdict.method] += 1
        for eval_id in verdict.matched_eval_ids:
            by_eval_set[eval_set_of.get(eval_id, "?")] += 1
    report = DecontamReport(
        input_count=len(records),
        kept_count=len(clean),
        removed_count=len(removed_ids),
        by_method=dict(by_method),
        by_eval_set=dict(by_eval_set),
        removed_ids=removed_ids,
    )
    return clean, report


# ---------------------------------------------------------------------------
# Testbed construction

ALTERATIONS = ("exact", "context", "synonym", "formatting")


@dataclass(frozen=True)
class TestbedRecord:
    text: str
    contaminated: bool
    alteration: str  # one of ALTERATIONS for positives, "none" for negatives
    source_eval_id: str | None = None


_CONTEXT_WRAPPERS = (
    "Please help me solve this problem: {q}",
    "I came across this exercise while studying and got stuck. {q} Can you walk me through it?",
    "Here is a question from my problem set. {q} Explain your reasoning step by step.",
    "My teacher assigned the following. {q} What is the answer?",
    "{q} Please give a detailed solution with justification.",
)

# Word-level substitutions for the synonym alteration; both directions are
# meaning-preserving enough that a human would call the result the same
# question.
_SYNONYMS = {
    "find": "determine",
    "compute": "calculate",
    "prove": "show",
    "show": "demonstrate",
    "number": "quantity",
    "smallest": "least",
    "largest": "greatest",
    "each": "every",
    "choose": "select",
    "consider": "examine",
    "suppose": "assume",
    "contains": "holds",
    "value": "result",
}

_VARIABLE_SWAPS = {"x": "y", "n": "m", "k": "j", "t": "s", "p": "q"}


def _swap_words(text: str, table: Mapping[str, str], rng: random.Random, limit: int) -> str:
    applied = 0
    for src in sorted(table):
        if applied >= limit:
            break
        pattern = re.compile(rf"\b{re.escape(src)}\b")
        if pattern.search(text):
            text = pattern.sub(table[src], text, count=1)
            applied += 1
    return text


def _jitter_digits(text: str, rng: random.Random, limit: int = 2) -> str:
    runs = list(re.finditer(r"\d+", text))
    if not runs:
        return text
    chosen = rng.sample(runs, min(limit, len(runs)))
    out = list(text)
    for match in chosen:
        pos = match.start()
        out[pos] = str((int(out[pos]) + 1 + rng.randrange(8)) % 10)
    return "".join(out)


def _perturb_synonym(text: str, rng: random.Random) -> str:
    low = text  # substitutions target lowercase forms; questions mostly are
    low = _swap_words(low, _SYNONYMS, rng, limit=3)
    low = _jitter_digits(low, rng, limit=2)
    low = _swap_words(low, _VARIABLE_SWAPS, rng, limit=1)
    return low


_SENTENCE_SPLIT = re.compile(r"(?<=[.?!])\s+")


def _perturb_formatting(text: str, rng: random.Random) -> str:
    """One of three transforms, none of which touches any word token:
    paragraph breaks, punctuation jitter, or adjacent-sentence swap."""
    choice = rng.randrange(3)
    if choice == 0:
        return _SENTENCE_SPLIT.sub("\n\n", text, count=2)
    if choice == 1:
        jittered = text.replace(",", " ;", 2)
        if jittered == text:
            jittered = text.replace(".", " . ", 1).rstrip()
        if jittered == text:
            jittered = text + " ..."
        return jittered
    sentences = _SENTENCE_SPLIT.split(text)
    if len(sentences) < 2:
        return _SENTENCE_SPLIT.sub("\n\n", text, count=2)
    i = rng.randrange(len(sentences) - 1)
    sentences[i], sentences[i + 1] = sentences[i + 1], sentences[i]
    return " ".join(sentences)


def make_testbed(
    eval_sets: Mapping[str, Sequence[tuple[str, str]]],
    fresh_questions: Sequence[str],
    seed: int,
    *,
    positives: int = 1000,
    negatives: int = 1000,
) -> list[TestbedRecord]:
    """Labeled detector testbed: positives are eval questions altered four
    ways in equal shares (exact copy, context embedding, synonym and number
    perturbation, formatting perturbation); negatives are fresh questions
    assumed disjoint from the eval sets."""
    pool: list[tuple[str, str]] = []
    for set_name in sorted(eval_sets):
        pool.extend((eval_id, text) for eval_id, text in eval_sets[set_name])
    if not pool and positives:
        raise ConfigError("cannot build positives from empty eval sets")
    if len(fresh_questions) < negatives:
        raise ConfigError(
            f"need at least {negatives} fresh questions, got {len(fresh_questions)}"
        )
    rng = random.Random(seed)
    out: list[TestbedRecord] = []
    base, rem = divmod(positives, len(ALTERATIONS))
    for class_index, alteration in enumerate(ALTERATIONS):
        quota = base + (1 if class_index < rem else 0)
        for _ in range(quota):
            eval_id, text = pool[rng.randrange(len(pool))]
            if alteration == "exact":
                altered = text
            elif alteration == "context":
                altered = rng.choice(_CONTEXT_WRAPPERS).format(q=text)
            elif alteration == "synonym":
                altered = _perturb_synonym(text, rng)
            else:
                altered = _perturb_formatting(text, rng)
            out.append(
                TestbedRecord(
                    text=altered,
                    contaminated=True,
                    alteration=alteration,
                    source_eval_id=eval_id,
                )
            )
    for text in rng.sample(list(fresh_questions), negatives):
        out.append(TestbedRecord(text=text, contaminated=False, alteration="none"))
    rng.shuffle(out)
    return out


@dataclass(frozen=True)
class DetectorMetrics:
    """tnr names the detector's view: a contaminated record is a negative
    to be kept out, so tnr is the fraction of truly contaminated records
    caught (elsewhere called recall). fpr is the fraction of clean records
    wrongly flagged. Either is None when its class is empty."""

    tnr: float | None
    fpr: float | None
    per_alteration: Mapping[str, float]
    detected_positives: int
    total_positives: int
    flagged_negatives: int
    total_negatives: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "tnr": self.tnr,
            "fpr": self.fpr,
            "per_alteration": dict(self.per_alteration),
            "detected_positives": self.detected_positives,
            "total_positives": self.total_positives,
            "flagged_negatives": self.flagged_negatives,
            "total_negatives": self.total_negatives,
        }


def score_detector(
    testbed: Sequence[TestbedRecord],
    eval_sets: Mapping[str, Sequence[tuple[str, str]]],
    config: DecontamConfig = DecontamConfig(),
) -> DetectorMetrics:
    index = build_eval_index(eval_sets, config)
    detected = 0
    total_pos = 0
    flagged_neg = 0
    total_neg = 0
    per_alt_hit: Counter = Counter()
    per_alt_total: Counter = Counter()
    for rec in testbed:
        verdict = check_text(rec.text, index)
        if rec.contaminated:
            total_pos += 1
            per_alt_total[rec.alteration] += 1
            if verdict.contaminated:
                detected += 1
                per_alt_hit[rec.alteration] += 1
        else:
            total_neg += 1
            if verdict.contaminated:
                flagged_neg += 1
    per_alteration = {
        alt: per_alt_hit[alt] / per_alt_total[alt] for alt in per_alt_total
    }
    return DetectorMetrics(
        tnr=detected / total_pos if total_pos else None,
        fpr=flagged_neg / total_neg if total_neg else None,
        per_alteration=per_alteration,
        detected_positives=detected,
        total_positives=total_pos,
        flagged_negatives=flagged_neg,
        total_negatives=total_neg,
    )


def load_eval_sets(directory: str | Path) -> dict[str, list[tuple[str, str]]]:
    """Read every *.jsonl in the directory as one eval set named by stem.

    Rows need `id` and `text` fields; anything else in the row is ignored.
    """
    root = Path(directory)
    paths = sorted(root.glob("*.jsonl"))
    if not paths:
        raise ConfigError(f"no eval set files (*.jsonl) found in {root}")
    sets: dict[str, list[tuple[str, str]]] = {}
    for path in paths:
        rows: list[tuple[str, str]] = []
        with path.open("r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    payload = json.loads(line)
                    rows.append((str(payload["id"]), str(payload["text"])))
                except (json.JSONDecodeError, KeyError) as exc:
                    raise ConfigError(
                        f"{path}:{line_no}: bad eval row ({exc})"
                    ) from exc
        sets[path.stem] = rows
    return sets
