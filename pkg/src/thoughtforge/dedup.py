"""Exact and fuzzy question deduplication.

Both levels are greedy keep-first over the input order: a record survives
unless it matches an earlier survivor. Fuzzy matching runs on the same
normalized text as exact matching, which keeps the two levels nested: at
threshold 100 every exact duplicate is also a fuzzy duplicate.
"""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from .corpus import QuestionRecord, StageEntry
from .errors import ConfigError
from .textsim import TokenizerSpec, bounded_indel_at_least, tokenize

__all__ = [
    "DEFAULT_FUZZY_THRESHOLD",
    "dedup_stage",
    "exact_dedup",
    "fuzzy_dedup",
    "normalize_text",
]

DEFAULT_FUZZY_THRESHOLD = 90.0

# Records below this count get the exhaustive pairwise scan in auto mode;
# above it the banded index prunes candidates first.
_AUTO_EXHAUSTIVE_LIMIT = 10_000

_BAND_TOKENIZER = TokenizerSpec(kind="unicode_word", lowercase=True)

# How many of a record's rarest tokens key it into candidate buckets.
_RARE_TOKENS = 5


def normalize_text(text: str, *, lowercase: bool = False) -> str:
    """Canonical comparison form: NFC, trimmed, inner whitespace collapsed."""
    norm = unicodedata.normalize("NFC", text)
    if lowercase:
        norm = norm.lower()
    return " ".join(norm.split())


def exact_dedup(
    records: Sequence[QuestionRecord],
    *,
    lowercase: bool = False,
) -> list[QuestionRecord]:
    """Keep the first record of every normalized-text equivalence class."""
    seen: set[str] = set()
    out: list[QuestionRecord] = []
    for rec in records:
        key = normalize_text(rec.text, lowercase=lowercase)
        if key in seen:
            continue
        seen.add(key)
        out.append(rec)
    return out


@dataclass
class _BandedIndex:
    """Candidate pruning for fuzzy dedup.

    Survivors are posted under their rarest tokens (rarity by document
    frequency so far). A new record only compares against survivors that
    share one of its rare tokens and sit inside the length window the
    threshold allows. The length window is an exact bound (LCS cannot
    exceed the shorter length); the rare-token bucket is a heuristic that
    assumes near-duplicates share vocabulary, so a rewrite that replaces
    every rare token can slip past it.
    """

    threshold: float
    postings: dict[str, list[int]] = field(default_factory=dict)
    doc_freq: Counter = field(default_factory=Counter)
    lengths: list[int] = field(default_factory=list)
    tokens: list[list[str]] = field(default_factory=list)
    tokenless: list[int] = field(default_factory=list)

    def _length_ok(self, len_a: int, len_b: int) -> bool:
        if len_a == 0 or len_b == 0:
            return len_a == len_b
        lo, hi = sorted((len_a, len_b))
        # indel >= t needs LCS >= t*hi/100, and LCS <= lo.
        return 100.0 * lo / hi >= self.threshold

    def candidates(self, toks: list[str], length: int) -> list[int]:
        if not toks:
            pool: set[int] = set(self.tokenless)
            pool.update(
                idx for idx in range(len(self.lengths)) if self._length_ok(length, self.lengths[idx])
            )
            return sorted(pool)
        rare = sorted(set(toks), key=lambda t: (self.doc_freq[t], t))[:_RARE_TOKENS]
        pool = set()
        for tok in rare:
            pool.update(self.postings.get(tok, ()))
        pool.update(self.tokenless)
        return sorted(idx for idx in pool if self._length_ok(length, self.lengths[idx]))

    def add(self, toks: list[str], length: int) -> None:
        idx = len(self.lengths)
        self.lengths.append(length)
        self.tokens.append(toks)
        if not toks:
            self.tokenless.append(idx)
            return
        uniq = set(toks)
        for tok in uniq:
            self.doc_freq[tok] += 1
        rare = sorted(uniq, key=lambda t: (self.doc_freq[t], t))[:_RARE_TOKENS]
        for tok in rare:
            self.postings.setdefault(tok, []).append(idx)


def fuzzy_dedup(
    records: Sequence[QuestionRecord],
    threshold: float = DEFAULT_FUZZY_THRESHOLD,
    *,
    mode: str = "auto",
    lowercase: bool = False,
) -> list[QuestionRecord]:
    """Drop records whose similarity to an earlier survivor reaches the
    threshold (0 < threshold <= 100).

    mode "exhaustive" compares against every earlier survivor and is the
    correctness reference. "banded" prunes candidates to survivors that
    share a rare token and sit inside the length window; it matches
    exhaustive whenever near-duplicates keep some rare vocabulary in
    common, which real corpora do, but it is a candidate heuristic, not a
    guarantee. "auto" stays exhaustive until the input is large enough
    that the quadratic scan costs more than the heuristic risks.
    """
    if not (0 < threshold <= 100):
        raise ConfigError(f"fuzzy threshold must be in (0, 100], got {threshold}")
    if mode not in ("auto", "exhaustive", "banded"):
        raise ConfigError(f"unknown dedup mode {mode!r}")
    if mode == "auto":
        mode = "exhaustive" if len(records) < _AUTO_EXHAUSTIVE_LIMIT else "banded"

    survivors: list[QuestionRecord] = []
    texts: list[str] = []
    if mode == "exhaustive":
        for rec in records:
            norm = normalize_text(rec.text, lowercase=lowercase)
            if any(bounded_indel_at_least(norm, prev, threshold) for prev in texts):
                continue
            survivors.append(rec)
            texts.append(norm)
        return survivors

    index = _BandedIndex(threshold=threshold)
    for rec in records:
        norm = normalize_text(rec.text, lowercase=lowercase)
        toks = tokenize(_BAND_TOKENIZER, norm)
        dup = False
        for idx in index.candidates(toks, len(norm)):
            if bounded_indel_at_least(norm, texts[idx], threshold):
                dup = True
                break
        if dup:
            continue
        survivors.append(rec)
        texts.append(norm)
        index.add(toks, len(norm))
    return survivors


def dedup_stage(
    records: Sequence[QuestionRecord],
    level: str,
    threshold: float | None = None,
    *,
    mode: str = "auto",
    lowercase: bool = False,
    stage_name: str = "dedup",
) -> tuple[list[QuestionRecord], StageEntry]:
    """Run one dedup level and return survivors plus the ledger entry."""
    if level == "none":
        kept = list(records)
    elif level == "exact":
        kept = exact_dedup(records, lowercase=lowercase)
    elif level == "fuzzy":
        kept = fuzzy_dedup(
            records,
            DEFAULT_FUZZY_THRESHOLD if threshold is None else threshold,
            mode=mode,
            lowercase=lowercase,
        )
    else:
        raise ConfigError(f"unknown dedup level {level!r}; expected none, exact, or fuzzy")
    by_domain = Counter(rec.domain for rec in kept)
    entry = StageEntry(
        stage_name=stage_name,
        input_count=len(records),
        kept_count=len(kept),
        removed_count=len(records) - len(kept),
        by_domain=dict(by_domain),
        unit="questions",
        detail={"level": level} | ({"threshold": threshold} if threshold is not None else {}),
    )
    return kept, entry
