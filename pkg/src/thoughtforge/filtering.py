"""Question quality scoring and selection.

Five scorers produce QualityScore rows (classifier probability, embedding
contrast, two LLM judges, response length), and two pure selectors turn
score tables into subsets: select_top_k and the per-source mixing rule.
Scorers that call a model client all cache per record, so rescoring an
unchanged corpus issues zero client calls.
"""

from __future__ import annotations

import json
import random
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .clients import ChatClient, JsonCache
from .corpus import GenerationConfig, QuestionRecord, repeat_to_size, sample_uniform
from .errors import ConfigError
from .fsutil import atomic_write_bytes
from .prompts import render
from .textsim import TokenizerSpec, tokenize

__all__ = [
    "ClassifierHParams",
    "NgramClassifierModel",
    "QualityScore",
    "ScoreReport",
    "load_classifier",
    "mix_top_n",
    "save_classifier",
    "score_classifier",
    "score_embedding_contrast",
    "score_llm_judge",
    "score_response_length",
    "select_top_k",
    "train_classifier",
]

SCORE_METHODS = (
    "classifier",
    "embedding_contrast",
    "difficulty",
    "ask_llm",
    "response_length",
)

# Judges sample at temperature 1.0 with no other knobs changed.
_JUDGE_GEN = GenerationConfig(temperature=1.0, top_p=1.0, max_new_tokens=1024, n_samples=1)

_SCORE_TOKENIZER = TokenizerSpec(kind="unicode_word", lowercase=True)


@dataclass(frozen=True)
class QualityScore:
    record_id: str
    method: str
    score: float
    aux: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.method not in SCORE_METHODS:
            raise ConfigError(f"unknown score method {self.method!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "record_id": self.record_id,
            "method": self.method,
            "score": self.score,
            "aux": dict(self.aux),
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "QualityScore":
        return cls(
            record_id=payload["record_id"],
            method=payload["method"],
            score=float(payload["score"]),
            aux=dict(payload.get("aux", {})),
        )


@dataclass(frozen=True)
class ScoreReport:
    """Scores that succeeded plus a count of records dropped by failures."""

    scores: tuple[QualityScore, ...]
    dropped: int = 0


# ---------------------------------------------------------------------------
# Bag-of-ngrams classifier


@dataclass(frozen=True)
class ClassifierHParams:
    dim: int = 256
    epochs: int = 3
    learning_rate: float = 0.1
    min_count: int = 3
    word_ngrams: int = 2

    def __post_init__(self) -> None:
        if self.dim <= 0 or self.epochs <= 0 or self.min_count <= 0:
            raise ConfigError("classifier dim, epochs, and min_count must be positive")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.word_ngrams not in (1, 2):
            raise ConfigError(f"word_ngrams must be 1 or 2, got {self.word_ngrams}")


@dataclass
class NgramClassifierModel:
    hparams: ClassifierHParams
    vocab: dict[str, int]
    input_weights: np.ndarray  # (vocab, dim)
    output_weights: np.ndarray  # (dim, 2)
    epoch_losses: list[float]
    positive_prior: float
    tokenizer: TokenizerSpec = _SCORE_TOKENIZER


def _features(tokens: Sequence[str], word_ngrams: int) -> Iterable[str]:
    yield from tokens
    if word_ngrams >= 2:
        for a, b in zip(tokens, tokens[1:]):
            yield f"{a} {b}"


def _doc_feature_ids(model_vocab: Mapping[str, int], text: str, hp: ClassifierHParams,
                     tokenizer: TokenizerSpec) -> list[int]:
    toks = tokenize(tokenizer, text)
    ids = [model_vocab[f] for f in _features(toks, hp.word_ngrams) if f in model_vocab]
    return ids


def train_classifier(
    positives: Sequence[str],
    negatives: Sequence[str],
    hparams: ClassifierHParams = ClassifierHParams(),
    seed: int = 0,
    tokenizer: TokenizerSpec = _SCORE_TOKENIZER,
) -> NgramClassifierModel:
    """Train the averaged bag-of-(uni+bi)grams linear softmax classifier.

    Label 1 is the positive class. SGD visits one document per step with the
    learning rate decayed linearly to zero over all steps. Training is a
    pure function of (texts, hparams, seed): document order is shuffled by a
    seeded generator and all weights live in fixed-order numpy arrays.
    """
    if not positives or not negatives:
        raise ConfigError("classifier needs non-empty positive and negative sets")
    docs = [(text, 1) for text in positives] + [(text, 0) for text in negatives]

    counts: dict[str, int] = {}
    tokenized: list[tuple[list[str], int]] = []
    for text, label in docs:
        toks = tokenize(tokenizer, text)
        tokenized.append((toks, label))
        for feat in _features(toks, hparams.word_ngrams):
            counts[feat] = counts.get(feat, 0) + 1
    vocab = {
        feat: idx
        for idx, feat in enumerate(sorted(f for f, c in counts.items() if c >= hparams.min_count))
    }
    if not vocab:
        raise ConfigError(
            "classifier vocabulary is empty after the min-count cutoff; "
            "lower min_count or provide more training text"
        )

    rng = np.random.default_rng(seed)
    bound = 1.0 / hparams.dim
    emb = rng.uniform(-bound, bound, size=(len(vocab), hparams.dim)).astype(np.float64)
    out = np.zeros((hparams.dim, 2), dtype=np.float64)

    doc_ids = [
        (
            [vocab[f] for f in _features(toks, hparams.word_ngrams) if f in vocab],
            label,
        )
        for toks, label in tokenized
    ]
    total_steps = hparams.epochs * len(doc_ids)
    step = 0
    epoch_losses: list[float] = []
    order = np.arange(len(doc_ids))
    for _ in range(hparams.epochs):
        rng.shuffle(order)
        loss_sum = 0.0
        seen = 0
        for doc_index in order:
            ids, label = doc_ids[doc_index]
            lr = hparams.learning_rate * (1.0 - step / total_steps)
            step += 1
            if not ids:
                continue
            bag = emb[ids].mean(axis=0)
            logits = bag @ out
            logits -= logits.max()
            exp = np.exp(logits)
            probs = exp / exp.sum()
            loss_sum += -float(np.log(max(probs[label], 1e-12)))
            seen += 1
            dlogits = probs.copy()
            dlogits[label] -= 1.0
            # Gradients use the pre-update weights on both sides.
            dbag = out @ dlogits
            out -= lr * np.outer(bag, dlogits)
            emb[ids] -= lr * dbag / len(ids)
        epoch_losses.append(loss_sum / max(seen, 1))

    return NgramClassifierModel(
        hparams=hparams,
        vocab=vocab,
        input_weights=emb.astype(np.float32),
        output_weights=out.astype(np.float32),
        epoch_losses=epoch_losses,
        positive_prior=len(positives) / len(docs),
        tokenizer=tokenizer,
    )


def _positive_probability(model: NgramClassifierModel, text: str) -> tuple[float, bool]:
    ids = _doc_feature_ids(model.vocab, text, model.hparams, model.tokenizer)
    if not ids:
        return model.positive_prior, True
    bag = model.input_weights[ids].astype(np.float64).mean(axis=0)
    logits = bag @ model.output_weights.astype(np.float64)
    logits -= logits.max()
    exp = np.exp(logits)
    return float(exp[1] / exp.sum()), False


def score_classifier(
    model: NgramClassifierModel,
    questions: Sequence[QuestionRecord],
) -> list[QualityScore]:
    out: list[QualityScore] = []
    for q in questions:
        prob, empty_bag = _positive_probability(model, q.text)
        aux = {"empty_bag": True} if empty_bag else {}
        out.append(QualityScore(record_id=q.id, method="classifier", score=prob, aux=aux))
    return out


# Model file layout, all little-endian. Header carries the magic, a format
# version, dim, and vocab size so a reader can refuse anything it does not
# understand before touching the matrices.
_MODEL_MAGIC = b"TFQC"
_MODEL_VERSION = 1


def save_classifier(model: NgramClassifierModel, path: str | Path) -> None:
    hp = model.hparams
    parts: list[bytes] = [
        _MODEL_MAGIC,
        struct.pack(
            "<IIIIIdIdI",
            _MODEL_VERSION,
            hp.dim,
            len(model.vocab),
            hp.epochs,
            hp.min_count,
            hp.learning_rate,
            hp.word_ngrams,
            model.positive_prior,
            1 if model.tokenizer.lowercase else 0,
        ),
    ]
    kind = model.tokenizer.kind.encode("utf-8")
    parts.append(struct.pack("<I", len(kind)))
    parts.append(kind)
    ordered = sorted(model.vocab.items(), key=lambda kv: kv[1])
    for feat, _ in ordered:
        raw = feat.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    parts.append(np.ascontiguousarray(model.input_weights, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(model.output_weights, dtype="<f4").tobytes())
    parts.append(struct.pack("<I", len(model.epoch_losses)))
    parts.append(struct.pack(f"<{len(model.epoch_losses)}d", *model.epoch_losses))
    atomic_write_bytes(Path(path), b"".join(parts))


def load_classifier(path: str | Path) -> NgramClassifierModel:
    blob = Path(path).read_bytes()
    if blob[:4] != _MODEL_MAGIC:
        raise ConfigError(f"{path} is not a classifier model file")
    offset = 4
    header = struct.unpack_from("<IIIIIdIdI", blob, offset)
    offset += struct.calcsize("<IIIIIdIdI")
    version, dim, vocab_size, epochs, min_count, lr, word_ngrams, prior, lowercase = header
    if version != _MODEL_VERSION:
        raise ConfigError(f"unsupported classifier model version {version}")
    (kind_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    kind = blob[offset : offset + kind_len].decode("utf-8")
    offset += kind_len
    vocab: dict[str, int] = {}
    for idx in range(vocab_size):
        (feat_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        vocab[blob[offset : offset + feat_len].decode("utf-8")] = idx
        offset += feat_len
    emb_bytes = vocab_size * dim * 4
    emb = np.frombuffer(blob, dtype="<f4", count=vocab_size * dim, offset=offset).reshape(
        vocab_size, dim
    )
    offset += emb_bytes
    out = np.frombuffer(blob, dtype="<f4", count=dim * 2, offset=offset).reshape(dim, 2)
    offset += dim * 2 * 4
    (loss_count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    losses = list(struct.unpack_from(f"<{loss_count}d", blob, offset))
    return NgramClassifierModel(
        hparams=ClassifierHParams(
            dim=dim,
            epochs=epochs,
            learning_rate=lr,
            min_count=min_count,
            word_ngrams=word_ngrams,
        ),
        vocab=vocab,
        input_weights=emb.copy(),
        output_weights=out.copy(),
        epoch_losses=losses,
        positive_prior=prior,
        tokenizer=TokenizerSpec(kind=kind, lowercase=bool(lowercase)),
    )


# ---------------------------------------------------------------------------
# Embedding contrast


def _cosine_rows(matrix: np.ndarray, vec: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1) * np.linalg.norm(vec)
    dots = matrix @ vec
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(norms > 0, dots / np.where(norms > 0, norms, 1.0), 0.0)
    return out


def score_embedding_contrast(
    questions: Sequence[QuestionRecord],
    positives: Sequence[str],
    negatives: Sequence[str],
    embed_client: Any,
) -> list[QualityScore]:
    """Score = mean cosine to positive anchors minus mean cosine to negative
    anchors. Anchors are embedded once for the whole batch."""
    if not positives or not negatives:
        raise ConfigError("embedding contrast needs non-empty anchor sets")
    pos = np.asarray(embed_client.embed(list(positives)), dtype=np.float64)
    neg = np.asarray(embed_client.embed(list(negatives)), dtype=np.float64)
    out: list[QualityScore] = []
    for q in questions:
        vec = np.asarray(embed_client.embed([q.text])[0], dtype=np.float64)
        score = float(_cosine_rows(pos, vec).mean() - _cosine_rows(neg, vec).mean())
        out.append(QualityScore(record_id=q.id, method="embedding_contrast", score=score))
    return out


# ---------------------------------------------------------------------------
# LLM judges

_JSON_BLOB_RE = re.compile(r"\{.*?\}", re.DOTALL)


def _parse_int_score(text: str, low: int, high: int) -> tuple[int | None, str]:
    """Pull {score: int, reasoning: str} out of a judge response.

    Accepts surrounding prose around the JSON object. Booleans are not
    scores, and out-of-range values are rejected rather than clamped.
    """
    for blob in _JSON_BLOB_RE.findall(text):
        try:
            payload = json.loads(blob)
        except json.JSONDecodeError:
            continue
        if not isinstance(payload, dict):
            continue
        score = payload.get("score")
        if isinstance(score, bool) or not isinstance(score, int):
            continue
        if low <= score <= high:
            return score, str(payload.get("reasoning", ""))
    return None, ""


_JUDGE_RANGES = {"difficulty": (1, 10), "ask_llm": (1, 100)}


def _judge_template(judge: str, domain: str) -> str:
    if judge == "ask_llm":
        return "judge_ask_llm"
    return f"judge_difficulty_{domain}"


def score_llm_judge(
    questions: Sequence[QuestionRecord],
    judge: str,
    judge_client: ChatClient,
    domain: str,
    *,
    cache: JsonCache | None = None,
) -> ScoreReport:
    """Judge-scored quality: difficulty (1..10) or exemplar likeness (1..100).

    Each question gets one structured-decoding call; an unparseable or
    out-of-range response is retried once, then the record is dropped from
    the score table and counted.
    """
    if judge not in _JUDGE_RANGES:
        raise ConfigError(f"unknown judge {judge!r}; expected difficulty or ask_llm")
    low, high = _JUDGE_RANGES[judge]
    template = _judge_template(judge, domain)
    extra = {"response_format": {"type": "json_object"}}
    scores: list[QualityScore] = []
    dropped = 0
    for q in questions:
        cache_key = f"judge:{judge}:{domain}:{judge_client.default_model}:{q.id}"
        cached = cache.get(cache_key) if cache else None
        if cached is not None:
            if cached.get("score") is None:
                dropped += 1
            else:
                scores.append(
                    QualityScore(
                        record_id=q.id,
                        method=judge,
                        score=float(cached["score"]),
                        aux={"reasoning": cached.get("reasoning", "")},
                    )
                )
            continue
        prompt = render(template, {"question": q.text})
        score: int | None = None
        reasoning = ""
        for _ in range(2):  # one retry on bad structure
            response = judge_client.complete(
                [{"role": "user", "content": prompt}], _JUDGE_GEN, extra=extra
            )
            score, reasoning = _parse_int_score(response, low, high)
            if score is not None:
                break
        if cache:
            cache.put(cache_key, {"score": score, "reasoning": reasoning})
        if score is None:
            dropped += 1
            continue
        scores.append(
            QualityScore(
                record_id=q.id, method=judge, score=float(score), aux={"reasoning": reasoning}
            )
        )
    return ScoreReport(scores=tuple(scores), dropped=dropped)


def score_response_length(
    questions: Sequence[QuestionRecord],
    annotate_client: ChatClient,
    proxy_model_id: str,
    *,
    cache: JsonCache | None = None,
    gen_config: GenerationConfig = GenerationConfig(),
) -> ScoreReport:
    """Score = length of a proxy model's answer in unicode scalar values.

    The proxy response itself is discarded; only its length is cached, so
    the cache stays small even for verbose proxies.
    """
    scores: list[QualityScore] = []
    dropped = 0
    for q in questions:
        cache_key = f"resplen:{proxy_model_id}:{q.id}"
        cached = cache.get(cache_key) if cache else None
        if cached is not None:
            scores.append(
                QualityScore(
                    record_id=q.id, method="response_length", score=float(cached["length"])
                )
            )
            continue
        try:
            response = annotate_client.complete(
                [{"role": "user", "content": q.text}], gen_config, model=proxy_model_id
            )
        except Exception:
            dropped += 1
            continue
        length = len(response)
        if cache:
            cache.put(cache_key, {"length": length})
        scores.append(
            QualityScore(record_id=q.id, method="response_length", score=float(length))
        )
    return ScoreReport(scores=tuple(scores), dropped=dropped)


# ---------------------------------------------------------------------------
# Selection and mixing


def select_top_k(
    scores: Sequence[QualityScore],
    k: int,
    tie_seed: int = 0,
) -> list[str]:
    """Record ids of the k highest scores.

    Ties are broken by a seeded shuffle over a record-id-sorted base order,
    so the result is a deterministic function of (scores, k, tie_seed) and
    independent of input order.
    """
    if k < 0:
        raise ConfigError(f"k must be >= 0, got {k}")
    if k > len(scores):
        raise ConfigError(f"cannot select top {k} from {len(scores)} scores")
    ordered = sorted(scores, key=lambda s: s.record_id)
    random.Random(tie_seed).shuffle(ordered)
    ordered.sort(key=lambda s: -s.score)  # stable: shuffle decides ties
    return [s.record_id for s in ordered[:k]]


def mix_top_n(
    ranked_sources: Sequence[tuple[str, Sequence[QuestionRecord]]],
    n: int,
    target: int,
    seed: int = 0,
    *,
    oversample: bool = False,
) -> tuple[list[QuestionRecord], dict[str, int]]:
    """Draw target records from the first n ranked pools.

    Each of the n pools contributes floor(target/n); when n does not divide
    target, the first (target mod n) pools contribute one extra. A pool too
    small for its quota is an error unless oversample is set, in which case
    it is repeated to size first. Returns the mixed records plus the
    per-pool contribution counts.
    """
    if n <= 0:
        raise ConfigError(f"n must be positive, got {n}")
    if n > len(ranked_sources):
        raise ConfigError(f"asked for top {n} of {len(ranked_sources)} sources")
    if target < 0:
        raise ConfigError(f"target must be >= 0, got {target}")
    base, remainder = divmod(target, n)
    rng = np.random.default_rng(seed)
    pool_seeds = [int(rng.integers(0, 2**31)) for _ in range(n)]
    mixed: list[QuestionRecord] = []
    counts: dict[str, int] = {}
    for pool_index, (pool_id, records) in enumerate(ranked_sources[:n]):
        quota = base + (1 if pool_index < remainder else 0)
        if len(records) < quota:
            if not oversample:
                raise ConfigError(
                    f"pool {pool_id!r} has {len(records)} records but owes {quota}; "
                    "enable oversampling to repeat records"
                )
            drawn = repeat_to_size(list(records), quota, pool_seeds[pool_index])
        else:
            drawn = sample_uniform(list(records), quota, pool_seeds[pool_index])
        mixed.extend(drawn)
        counts[pool_id] = quota
    return mixed, counts
