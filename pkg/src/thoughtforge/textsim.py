"""Character- and token-level similarity primitives.

Everything here is pure and deterministic: no I/O besides the optional
external vocab file, no global mutable state, no randomness. Similarity is
reported on a 0..100 scale where 100 means the (possibly capped) strings are
identical.
"""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

from .errors import ConfigError

__all__ = [
    "DEFAULT_HASH_SEED",
    "DEFAULT_LCS_CAP",
    "TokenizerSpec",
    "bounded_indel_at_least",
    "indel_similarity",
    "lcs_length",
    "ngram_hash_list",
    "ngram_hashes",
    "tokenize",
]

# Strings longer than this many unicode scalar values are compared on their
# first DEFAULT_LCS_CAP characters. Keeps worst-case DP cost bounded.
DEFAULT_LCS_CAP = 20_000

# Baked into every n-gram digest. Constant across runs and processes so that
# independently built indexes agree; change it and every stored index is
# invalidated at once.
DEFAULT_HASH_SEED = 0x7F4A_7C15_9E37_79B9

# Runs of letters and digits; underscore is punctuation here.
_WORD_RE = re.compile(r"[^\W_]+", re.UNICODE)

_NGRAM_SEP = b"\x1f"


@dataclass(frozen=True)
class TokenizerSpec:
    """How text splits into tokens for n-gram and token-count checks.

    kind "unicode_word" emits maximal runs of unicode letters and digits.
    kind "external_vocab" greedily matches the longest token from a vocab
    file (one token per line); characters the vocab does not cover become
    single-character tokens. Both are pure functions of (spec, text).
    """

    kind: str = "unicode_word"
    lowercase: bool = True
    vocab_path: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("unicode_word", "external_vocab"):
            raise ConfigError(f"unknown tokenizer kind {self.kind!r}")
        if self.kind == "external_vocab" and not self.vocab_path:
            raise ConfigError("external_vocab tokenizer needs vocab_path")


@lru_cache(maxsize=8)
def _load_vocab(vocab_path: str) -> tuple[frozenset[str], int]:
    path = Path(vocab_path)
    if not path.exists():
        raise ConfigError(f"tokenizer vocab file not found: {vocab_path}")
    entries = [line.rstrip("\n") for line in path.read_text(encoding="utf-8").splitlines()]
    vocab = frozenset(tok for tok in entries if tok)
    if not vocab:
        raise ConfigError(f"tokenizer vocab file is empty: {vocab_path}")
    return vocab, max(len(tok) for tok in vocab)


def tokenize(spec: TokenizerSpec, text: str) -> list[str]:
    """Split text into tokens according to spec. Deterministic, no state."""
    if spec.lowercase:
        text = text.lower()
    if spec.kind == "unicode_word":
        return _WORD_RE.findall(text)
    vocab, widest = _load_vocab(spec.vocab_path or "")
    tokens: list[str] = []
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        for width in range(min(widest, n - i), 0, -1):
            piece = text[i : i + width]
            if piece in vocab:
                tokens.append(piece)
                i += width
                break
        else:
            tokens.append(ch)
            i += 1
    return tokens


def lcs_length(s1: str, s2: str) -> int:
    """Length of the longest common subsequence over unicode scalar values.

    Symmetric in its arguments. Uses the bit-parallel column update (one big
    integer per column block) rather than the textbook row DP, which makes a
    pair of 200-char strings a few microseconds instead of tens of
    milliseconds. Shared prefixes and suffixes are counted directly first;
    both reductions are exact.
    """
    if not s1 or not s2:
        return 0
    # A shared prefix (and, after it, a shared suffix) is always part of some
    # maximum-length common subsequence, so strip and count it up front.
    limit = min(len(s1), len(s2))
    pre = 0
    while pre < limit and s1[pre] == s2[pre]:
        pre += 1
    suf = 0
    while suf < limit - pre and s1[len(s1) - 1 - suf] == s2[len(s2) - 1 - suf]:
        suf += 1
    affix = pre + suf
    s1 = s1[pre : len(s1) - suf]
    s2 = s2[pre : len(s2) - suf]
    if not s1 or not s2:
        return affix
    if len(s1) > len(s2):
        s1, s2 = s2, s1  # keep the bit vector on the shorter side
    masks: dict[str, int] = {}
    bit = 1
    for ch in s1:
        masks[ch] = masks.get(ch, 0) | bit
        bit <<= 1
    full = bit - 1
    v = full
    for ch in s2:
        m = masks.get(ch)
        if m is None:
            continue
        u = v & m
        v = ((v + u) | (v - u)) & full
    # Each cleared bit in v marks one matched position of s1.
    return affix + len(s1) - v.bit_count()


def indel_similarity(s1: str, s2: str, *, cap: int = DEFAULT_LCS_CAP) -> float:
    """Normalized indel similarity: 100 * LCS(s1, s2) / max(|s1|, |s2|).

    Equals 100.0 iff the strings are identical; two empty strings are defined
    as identical. Strings longer than cap scalar values are compared on their
    first cap characters, lengths included.
    """
    if cap > 0:
        s1 = s1[:cap]
        s2 = s2[:cap]
    if s1 == s2:
        return 100.0
    return 100.0 * lcs_length(s1, s2) / max(len(s1), len(s2))


def _char_overlap_bound(s1: str, s2: str) -> int:
    # Any common subsequence uses each character at most as often as it
    # occurs in either string, so the multiset intersection bounds the LCS.
    c1 = Counter(s1)
    c2 = Counter(s2)
    if len(c2) < len(c1):
        c1, c2 = c2, c1
    return sum(min(count, c2[ch]) for ch, count in c1.items() if ch in c2)


def bounded_indel_at_least(
    s1: str,
    s2: str,
    threshold: float,
    *,
    cap: int = DEFAULT_LCS_CAP,
) -> bool:
    """Decide indel_similarity(s1, s2) >= threshold, cheaply when possible.

    Two exact shortcuts run before the DP: the length bound (LCS cannot
    exceed the shorter length) and the per-character multiset bound. Either
    one proves the similarity short of the threshold without touching the
    quadratic core. Thresholds at or below zero are trivially satisfied.
    """
    if threshold <= 0:
        return True
    if cap > 0:
        s1 = s1[:cap]
        s2 = s2[:cap]
    if s1 == s2:
        return True
    longer = max(len(s1), len(s2))
    shorter = min(len(s1), len(s2))
    if longer == 0:
        return True  # both empty, similarity 100
    # 100 * bound / longer < threshold  =>  similarity < threshold.
    if 100.0 * shorter / longer < threshold:
        return False
    if 100.0 * _char_overlap_bound(s1, s2) / longer < threshold:
        return False
    return 100.0 * lcs_length(s1, s2) / longer >= threshold


def ngram_hash_list(
    tokens: Sequence[str],
    n: int,
    *,
    seed: int = DEFAULT_HASH_SEED,
) -> list[int]:
    """64-bit hash of every length-n token window, one entry per window.

    Window i covers tokens[i : i + n]; fewer than n tokens gives an empty
    list. Hashes are blake2b over the seed and the separator-joined window,
    so they are stable across processes and runs that share the seed.
    """
    if n <= 0:
        raise ConfigError(f"n-gram size must be positive, got {n}")
    count = len(tokens) - n + 1
    if count <= 0:
        return []
    prefix = seed.to_bytes(8, "little", signed=False)
    encoded = [tok.encode("utf-8") for tok in tokens]
    out: list[int] = []
    for i in range(count):
        digest = hashlib.blake2b(
            prefix + _NGRAM_SEP.join(encoded[i : i + n]),
            digest_size=8,
        ).digest()
        out.append(int.from_bytes(digest, "little"))
    return out


def ngram_hashes(
    tokens: Sequence[str],
    n: int,
    *,
    seed: int = DEFAULT_HASH_SEED,
) -> set[int]:
    """Set of 64-bit n-gram hashes; at most max(0, len(tokens) - n + 1) entries."""
    return set(ngram_hash_list(tokens, n, seed=seed))
