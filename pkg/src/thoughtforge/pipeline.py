"""Declarative recipe runner: composes stages into a run directory with a
conserving ledger, then builds the final mixed dataset.

A recipe is one JSON document listing stages in pipeline order. Running it
produces runs/<run_id>/ with a manifest updated after every stage, so a
halted run keeps a usable partial manifest, and a rerun with the same
caches replays byte-identically without new client calls.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from .annotate import TeacherSpec, annotate
from .clients import (
    ChatClient,
    EmbedClient,
    HttpChatClient,
    HttpEmbedClient,
    JsonCache,
    MockChatClient,
    MockEmbedClient,
)
from .corpus import (
    AnswerSample,
    DatasetManifest,
    QuestionRecord,
    StageEntry,
    format_chat,
    read_shards,
    write_shards,
)
from .dedup import dedup_stage
from .decontam import DecontamConfig, decontaminate, load_eval_sets
from .errors import ConfigError, StageError
from .fsutil import atomic_write_json, atomic_write_text
from .filtering import (
    SCORE_METHODS,
    QualityScore,
    ScoreReport,
    load_classifier,
    mix_top_n,
    score_classifier,
    score_embedding_contrast,
    score_llm_judge,
    score_response_length,
    select_top_k,
)
from .sourcing import (
    SourceSpec,
    generate_from_seed,
    ingest_existing,
    load_source_spec,
)
from .verify import (
    filter_by_answer_length,
    filter_trace_length,
    majority_consensus,
    strip_self_reflection,
    structural_filter,
)

__all__ = [
    "PipelineConfig",
    "RunResult",
    "StageSpec",
    "STAGE_KINDS",
    "backsolve_targets",
    "report",
    "run",
]

# Legal pipeline order; stage kinds must appear with non-decreasing rank.
STAGE_KINDS = ("source", "filter", "dedup", "annotate", "verify", "decontam", "mix")
_STAGE_RANK = {kind: i for i, kind in enumerate(STAGE_KINDS)}

_DEFAULT_OPS = {
    "source": "source",
    "filter": "score_select",
    "dedup": "dedup",
    "annotate": "annotate",
    "verify": "verify_ops",
    "decontam": "decontaminate",
    "mix": "mix_top_n",
}


@dataclass(frozen=True)
class StageSpec:
    kind: str
    op: str = ""
    params: Mapping[str, Any] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in _STAGE_RANK:
            raise ConfigError(
                f"unknown stage kind {self.kind!r}; expected one of {STAGE_KINDS}"
            )
        if not self.op:
            object.__setattr__(self, "op", _DEFAULT_OPS[self.kind])

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "op": self.op,
            "params": dict(self.params),
            "seed": self.seed,
        }


_CONFIG_KEYS = {
    "stages",
    "domain_targets",
    "teacher",
    "eval_set_dir",
    "cache_root",
    "run_root",
}


@dataclass(frozen=True)
class PipelineConfig:
    stages: tuple[StageSpec, ...]
    domain_targets: Mapping[str, int] = field(default_factory=dict)
    teacher: TeacherSpec = field(
        default_factory=lambda: TeacherSpec(endpoint="mock://teacher", model_id="mock-teacher")
    )
    eval_set_dir: str | None = None
    cache_root: str = "cache"
    run_root: str = "runs"

    def __post_init__(self) -> None:
        last = -1
        for stage in self.stages:
            rank = _STAGE_RANK[stage.kind]
            if rank < last:
                raise ConfigError(
                    f"stage {stage.kind!r} appears after a later-pipeline stage; "
                    f"legal order is {' -> '.join(STAGE_KINDS)}"
                )
            last = rank
        for domain, target in self.domain_targets.items():
            if target < 0:
                raise ConfigError(f"domain target {domain!r} is negative")

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "PipelineConfig":
        unknown = set(payload) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown recipe keys: {sorted(unknown)}")
        if "stages" not in payload:
            raise ConfigError("recipe must list stages")
        stages = []
        for i, raw in enumerate(payload["stages"]):
            if not isinstance(raw, Mapping) or "kind" not in raw:
                raise ConfigError(f"stage {i} must be an object with a 'kind'")
            extra = set(raw) - {"kind", "op", "params", "seed"}
            if extra:
                raise ConfigError(f"stage {i} has unknown keys: {sorted(extra)}")
            stages.append(
                StageSpec(
                    kind=raw["kind"],
                    op=raw.get("op", ""),
                    params=dict(raw.get("params", {})),
                    seed=int(raw.get("seed", 0)),
                )
            )
        teacher_raw = dict(payload.get("teacher", {}))
        teacher = TeacherSpec.from_dict(teacher_raw) if teacher_raw else cls.__dataclass_fields__["teacher"].default_factory()  # type: ignore[misc]
        return cls(
            stages=tuple(stages),
            domain_targets=dict(payload.get("domain_targets", {})),
            teacher=teacher,
            eval_set_dir=payload.get("eval_set_dir"),
            cache_root=payload.get("cache_root", "cache"),
            run_root=payload.get("run_root", "runs"),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"recipe file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"recipe file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(payload)

    def to_dict(self) -> dict[str, Any]:
        return {
            "stages": [s.to_dict() for s in self.stages],
            "domain_targets": dict(self.domain_targets),
            "teacher": self.teacher.to_dict(),
            "eval_set_dir": self.eval_set_dir,
            "cache_root": self.cache_root,
            "run_root": self.run_root,
        }

    def config_hash(self) -> str:
        canonical = json.dumps(
            self.to_dict(), ensure_ascii=False, sort_keys=True, separators=(",", ":")
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def run_id(self) -> str:
        return f"run-{self.config_hash()[:12]}"


@dataclass(frozen=True)
class RunResult:
    run_id: str
    run_dir: Path
    manifest: DatasetManifest


@dataclass(frozen=True)
class _SftRow:
    prompt: str
    completion: str
    question_id: str
    sample_index: int
    domain: str

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _by_domain(records: Sequence[QuestionRecord]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for rec in records:
        counts[rec.domain] = counts.get(rec.domain, 0) + 1
    return dict(sorted(counts.items()))


def _load_seed_items(spec: SourceSpec) -> list[tuple[str, Any]]:
    path = Path(spec.seed_corpus_path or "")
    if not path.exists():
        raise ConfigError(f"source {spec.source_id!r}: seed corpus {path} not found")
    items: list[tuple[str, Any]] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            row = json.loads(line)
            seed_id = str(row.get("id", f"row{line_no:06d}"))
            if spec.field_mapping:
                value: Any = {
                    slot: str(row[src])
                    for src, slot in spec.field_mapping.items()
                    if src in row
                }
            else:
                if "text" not in row:
                    raise StageError(f"{path}:{line_no}: seed row lacks 'text'")
                value = str(row["text"])
            items.append((seed_id, value))
    return items


class _Runner:
    """Holds the evolving question/answer streams while stages execute."""

    def __init__(
        self,
        config: PipelineConfig,
        *,
        mock: bool,
        client: ChatClient | None,
        embed_client: EmbedClient | None,
    ) -> None:
        self.config = config
        self.mock = mock
        self.questions: list[QuestionRecord] = []
        self.answers: list[AnswerSample] = []
        self.last_scores: dict[str, float] = {}
        self._mixed: list[QuestionRecord] | None = None
        self.cache = JsonCache(Path(config.cache_root) / "llm")
        if client is not None:
            self.client = client
        elif mock or config.teacher.endpoint.startswith("mock://"):
            self.client = MockChatClient(model=config.teacher.model_id)
        else:
            self.client = HttpChatClient(
                config.teacher.endpoint,
                config.teacher.model_id,
                auth_env=config.teacher.auth_env,
            )
        if embed_client is not None:
            self.embed_client: EmbedClient | None = embed_client
        elif mock:
            self.embed_client = MockEmbedClient()
        else:
            self.embed_client = None  # a live endpoint comes from stage params

    # -- stage handlers ----------------------------------------------------

    def stage_source(self, stage: StageSpec) -> list[StageEntry]:
        params = dict(stage.params)
        if "spec_path" in params:
            specs = load_source_spec(params["spec_path"])
        elif "specs" in params:
            specs = load_source_spec_entries(params["specs"])
        else:
            raise ConfigError("source stage needs 'spec_path' or inline 'specs'")
        total_in = 0
        kept: list[QuestionRecord] = []
        detail: dict[str, Any] = {}
        for spec in specs:
            if spec.kind == "non_synthetic":
                result = ingest_existing(spec)
                records = list(result.records)
                attempted = len(records) + result.skipped_empty
                detail[spec.source_id] = {
                    "kind": spec.kind,
                    "ingested": len(records),
                    "skipped_empty": result.skipped_empty,
                }
            else:
                seed_items = _load_seed_items(spec)
                budget = spec.n if spec.n is not None else len(seed_items)
                gen = generate_from_seed(
                    seed_items,
                    spec.prompt_template_id or "",
                    self.client,
                    budget,
                    stage.seed,
                    source_id=spec.source_id,
                    domain=spec.domain,
                    kind=spec.kind,
                    cache=self.cache,
                )
                records = list(gen.records)
                attempted = len(records) + len(gen.failures)
                detail[spec.source_id] = {
                    "kind": spec.kind,
                    "generated": len(records),
                    "failures": len(gen.failures),
                }
            total_in += attempted
            kept.extend(records)
        self.questions = kept
        return [
            StageEntry(
                stage_name="source",
                input_count=total_in,
                kept_count=len(kept),
                removed_count=total_in - len(kept),
                by_domain=_by_domain(kept),
                detail=detail,
            )
        ]

    def _score(self, stage: StageSpec, method: str) -> ScoreReport:
        params = dict(stage.params)
        if method == "classifier":
            model = load_classifier(params["model_path"])
            return ScoreReport(scores=tuple(score_classifier(model, self.questions)))
        if method == "embedding_contrast":
            positives = [q.text for q in read_shards(params["positive_path"])]
            negatives = [q.text for q in read_shards(params["negative_path"])]
            embedder = self.embed_client
            if embedder is None and "embed_endpoint" in params:
                embedder = HttpEmbedClient(
                    params["embed_endpoint"], params.get("embed_model", "embed")
                )
            if embedder is None:
                raise ConfigError(
                    "embedding_contrast needs --mock, an embed client, or an "
                    "'embed_endpoint' parameter"
                )
            scores = score_embedding_contrast(
                self.questions, positives, negatives, embedder
            )
            return ScoreReport(scores=tuple(scores))
        if method in ("difficulty", "ask_llm"):
            merged: list[QualityScore] = []
            dropped = 0
            domains = sorted({q.domain for q in self.questions})
            for domain in domains:
                group = [q for q in self.questions if q.domain == domain]
                rep = score_llm_judge(
                    group, method, self.client, domain, cache=self.cache
                )
                merged.extend(rep.scores)
                dropped += rep.dropped
            return ScoreReport(scores=tuple(merged), dropped=dropped)
        if method == "response_length":
            return score_response_length(
                self.questions,
                self.client,
                params.get("proxy_model_id", self.config.teacher.model_id),
                cache=self.cache,
            )
        raise ConfigError(
            f"unknown scoring method {method!r}; expected one of {sorted(SCORE_METHODS)}"
        )

    def stage_filter(self, stage: StageSpec) -> list[StageEntry]:
        params = dict(stage.params)
        method = params.get("method")
        if method not in SCORE_METHODS:
            raise ConfigError(
                f"filter stage needs a 'method' in {sorted(SCORE_METHODS)}, got {method!r}"
            )
        report_ = self._score(stage, method)
        if "k" in params:
            k = int(params["k"])
        elif "keep_fraction" in params:
            frac = float(params["keep_fraction"])
            if not 0 < frac <= 1:
                raise ConfigError(f"keep_fraction must be in (0,1], got {frac}")
            k = math.ceil(frac * len(report_.scores))
        else:
            raise ConfigError("filter stage needs 'k' or 'keep_fraction'")
        k = min(k, len(report_.scores))
        keep_ids = set(select_top_k(list(report_.scores), k, tie_seed=stage.seed))
        self.last_scores = {s.record_id: s.score for s in report_.scores}
        before = len(self.questions)
        self.questions = [q for q in self.questions if q.id in keep_ids]
        return [
            StageEntry(
                stage_name=f"filter:{method}",
                input_count=before,
                kept_count=len(self.questions),
                removed_count=before - len(self.questions),
                by_domain=_by_domain(self.questions),
                detail={"method": method, "k": k, "dropped_by_scorer": report_.dropped},
            )
        ]

    def stage_dedup(self, stage: StageSpec) -> list[StageEntry]:
        params = dict(stage.params)
        survivors, entry = dedup_stage(
            self.questions,
            params.get("level", "exact"),
            threshold=params.get("threshold"),
            mode=params.get("mode", "auto"),
            lowercase=bool(params.get("lowercase", False)),
        )
        self.questions = list(survivors)
        return [entry]

    def stage_annotate(self, stage: StageSpec) -> list[StageEntry]:
        params = dict(stage.params)
        k = int(params.get("k", 1))
        cache_root = Path(self.config.cache_root) / "annotate"
        samples, rep = annotate(
            self.questions,
            self.config.teacher,
            k,
            cache_root,
            client=self.client,
        )
        self.answers = samples
        slots = k * len({q.id for q in self.questions})
        return [
            StageEntry(
                stage_name="annotate",
                input_count=slots,
                kept_count=len(samples),
                removed_count=slots - len(samples),
                unit="answers",
                detail={
                    "k": k,
                    "cached": rep.cached,
                    "failures": len(rep.failures),
                    "undelimited": rep.undelimited,
                    "unannotated_questions": len(rep.unannotated_questions),
                },
            )
        ]

    def stage_verify(self, stage: StageSpec) -> list[StageEntry]:
        params = dict(stage.params)
        ops = params.get("ops")
        if not isinstance(ops, list) or not ops:
            raise ConfigError("verify stage needs a non-empty 'ops' list")
        question_of = {q.id: q for q in self.questions}
        groups: dict[str, list[AnswerSample]] = {q.id: [] for q in self.questions}
        for sample in self.answers:
            groups.setdefault(sample.question_id, []).append(sample)

        answers_in = len(self.answers)
        flagged = 0
        stripped = 0
        for qid in sorted(groups):
            group = sorted(groups[qid], key=lambda s: s.sample_index)
            question = question_of.get(qid)
            for op in ops:
                if not group:
                    break
                name = op.get("op")
                if name == "filter_by_answer_length":
                    group = filter_by_answer_length(
                        group,
                        int(op.get("keep", 8)),
                        direction=op.get("direction", "shortest"),
                    )
                elif name == "majority_consensus":
                    if question is None:
                        continue
                    outcome = majority_consensus(
                        question, group, self.client, question.domain, cache=self.cache
                    )
                    keep_idx = set(outcome.kept_indices)
                    group = [s for s in group if s.sample_index in keep_idx]
                    flagged += int(outcome.flagged)
                elif name == "strip_self_reflection":
                    new_group = []
                    for s in group:
                        trace = strip_self_reflection(s.reasoning_trace)
                        if trace != s.reasoning_trace:
                            stripped += 1
                        new_group.append(dataclasses.replace(s, reasoning_trace=trace))
                    group = new_group
                elif name == "filter_trace_length":
                    group = filter_trace_length(group, int(op["max_tokens"]))
                elif name == "structural":
                    kept_g = []
                    for s in group:
                        keep, was_flagged = structural_filter(
                            s,
                            op["rule"],
                            question=question,
                            judge_client=self.client,
                            cache=self.cache,
                        )
                        flagged += int(was_flagged)
                        if keep:
                            kept_g.append(s)
                    group = kept_g
                else:
                    raise ConfigError(f"unknown verify op {name!r}")
            groups[qid] = group

        self.answers = [
            s for qid in sorted(groups) for s in sorted(groups[qid], key=lambda x: x.sample_index)
        ]
        survivors = {qid for qid, group in groups.items() if group}
        q_before = len(self.questions)
        self.questions = [q for q in self.questions if q.id in survivors]
        pruned = q_before - len(self.questions)
        entries = [
            StageEntry(
                stage_name="verify",
                input_count=answers_in,
                kept_count=len(self.answers),
                removed_count=answers_in - len(self.answers),
                unit="answers",
                detail={
                    "ops": [op.get("op") for op in ops],
                    "flagged": flagged,
                    "stripped_traces": stripped,
                    "questions_pruned": pruned,
                },
            ),
            StageEntry(
                stage_name="verify:questions",
                input_count=q_before,
                kept_count=len(self.questions),
                removed_count=pruned,
                by_domain=_by_domain(self.questions),
            ),
        ]
        return entries

    def _prune_answers(self, stage_name: str) -> StageEntry | None:
        """Companion answer-ledger entry after a question stage removed
        questions; only emitted once answers exist."""
        if not self.answers:
            return None
        keep = {q.id for q in self.questions}
        before = len(self.answers)
        self.answers = [s for s in self.answers if s.question_id in keep]
        return StageEntry(
            stage_name=f"{stage_name}:answers",
            input_count=before,
            kept_count=len(self.answers),
            removed_count=before - len(self.answers),
            unit="answers",
        )

    def stage_decontam(self, stage: StageSpec) -> list[StageEntry]:
        params = dict(stage.params)
        eval_dir = params.get("evals", self.config.eval_set_dir)
        if not eval_dir:
            raise ConfigError("decontam stage needs eval sets: set 'evals' or eval_set_dir")
        eval_sets = load_eval_sets(eval_dir)
        dconfig = DecontamConfig(
            ngram_size=int(params.get("ngram", 13)),
            indel_threshold=float(params.get("threshold", 75.0)),
        )
        before = len(self.questions)
        clean, rep = decontaminate(self.questions, eval_sets, dconfig)
        self.questions = list(clean)
        entries = [
            StageEntry(
                stage_name="decontam",
                input_count=before,
                kept_count=len(self.questions),
                removed_count=before - len(self.questions),
                by_domain=_by_domain(self.questions),
                detail={
                    "by_method": dict(rep.by_method),
                    "by_eval_set": dict(rep.by_eval_set),
                    "threshold": dconfig.indel_threshold,
                    "ngram": dconfig.ngram_size,
                },
            )
        ]
        prune = self._prune_answers("decontam")
        if prune is not None:
            entries.append(prune)
        return entries

    def _rank_sources(
        self, pools: Mapping[str, list[QuestionRecord]], explicit: Sequence[str] | None
    ) -> list[str]:
        if explicit:
            missing = [s for s in explicit if s not in pools]
            if missing:
                raise ConfigError(f"mix ranking names unknown sources: {missing}")
            return list(explicit)
        if self.last_scores:
            def mean_score(source: str) -> float:
                vals = [
                    self.last_scores[q.id] for q in pools[source] if q.id in self.last_scores
                ]
                return sum(vals) / len(vals) if vals else float("-inf")

            return sorted(pools, key=lambda s: (-mean_score(s), s))
        return sorted(pools, key=lambda s: (-len(pools[s]), s))

    def stage_mix(self, stage: StageSpec) -> list[StageEntry]:
        params = dict(stage.params)
        n = int(params.get("n", 1))
        oversample = bool(params.get("oversample", False))
        targets = dict(params.get("targets", self.config.domain_targets))
        if not targets:
            raise ConfigError("mix stage needs 'targets' or config domain_targets")
        before = len(self.questions)
        mixed: list[QuestionRecord] = []
        counts: dict[str, Any] = {}
        for domain in sorted(targets):
            target = int(targets[domain])
            domain_questions = [q for q in self.questions if q.domain == domain]
            pools: dict[str, list[QuestionRecord]] = {}
            for q in domain_questions:
                pools.setdefault(q.source_id, []).append(q)
            if not pools:
                raise ConfigError(f"mix: no questions for domain {domain!r}")
            ranking = self._rank_sources(pools, params.get("ranking"))
            ranked = [(sid, pools[sid]) for sid in ranking]
            picked, per_source = mix_top_n(
                ranked, n, target, seed=stage.seed, oversample=oversample
            )
            mixed.extend(picked)
            counts[domain] = per_source
        keep_ids = {q.id for q in mixed}
        # the stream keeps unique questions; oversampled repeats live only in
        # the emitted list that final question shards are written from
        self.questions = [q for q in self.questions if q.id in keep_ids]
        self._mixed = mixed
        entries = [
            StageEntry(
                stage_name="mix",
                input_count=before,
                kept_count=len(self.questions),
                removed_count=before - len(self.questions),
                by_domain=_by_domain(self.questions),
                detail={"n": n, "per_domain": counts, "emitted": len(mixed)},
            )
        ]
        prune = self._prune_answers("mix")
        if prune is not None:
            entries.append(prune)
        return entries

    def dispatch(self, stage: StageSpec) -> list[StageEntry]:
        handler = {
            "source": self.stage_source,
            "filter": self.stage_filter,
            "dedup": self.stage_dedup,
            "annotate": self.stage_annotate,
            "verify": self.stage_verify,
            "decontam": self.stage_decontam,
            "mix": self.stage_mix,
        }[stage.kind]
        return handler(stage)

    @property
    def mixed(self) -> list[QuestionRecord] | None:
        return self._mixed


def load_source_spec_entries(entries: Sequence[Mapping[str, Any]]) -> list[SourceSpec]:
    specs = []
    for entry in entries:
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
    return specs


def run(
    config: PipelineConfig,
    *,
    mock: bool = False,
    resume_run_id: str | None = None,
    client: ChatClient | None = None,
    embed_client: EmbedClient | None = None,
) -> RunResult:
    """Execute every stage in order and write the final dataset.

    The manifest is rewritten atomically after each stage, so a failed run
    leaves the completed prefix on disk. Resuming re-executes stages against
    the same caches: deterministic stages plus cached client calls make the
    replay byte-identical with zero new requests.
    """
    run_id = config.run_id()
    if resume_run_id is not None and resume_run_id != run_id:
        raise ConfigError(
            f"resume id {resume_run_id!r} does not match this recipe ({run_id}); "
            "the recipe content must be unchanged to resume"
        )
    run_dir = Path(config.run_root) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_json(run_dir / "config.json", config.to_dict())

    manifest = DatasetManifest(run_id=run_id, config_hash=config.config_hash())
    runner = _Runner(config, mock=mock, client=client, embed_client=embed_client)

    for i, stage in enumerate(config.stages):
        manifest.seeds[f"{i}:{stage.kind}"] = stage.seed
        try:
            entries = runner.dispatch(stage)
        except (ConfigError, StageError):
            manifest.save(run_dir / "manifest.json")
            raise
        for entry in entries:
            manifest.add_stage(entry)
        manifest.save(run_dir / "manifest.json")

    final_dir = run_dir / "final"
    final_dir.mkdir(parents=True, exist_ok=True)
    emitted = runner.mixed if runner.mixed is not None else runner.questions
    write_shards(emitted, final_dir, prefix="questions")
    if runner.answers:
        write_shards(runner.answers, final_dir, prefix="answers")
        question_of = {q.id: q for q in runner.questions}
        sft_rows = []
        for sample in runner.answers:
            q = question_of.get(sample.question_id)
            if q is None:
                continue
            prompt, completion = format_chat(q, sample)
            sft_rows.append(
                _SftRow(
                    prompt=prompt,
                    completion=completion,
                    question_id=sample.question_id,
                    sample_index=sample.sample_index,
                    domain=q.domain,
                )
            )
        write_shards(sft_rows, final_dir, prefix="sft")
    manifest.validate()
    manifest.save(run_dir / "manifest.json")
    report(run_dir)
    return RunResult(run_id=run_id, run_dir=run_dir, manifest=manifest)


# ---------------------------------------------------------------------------
# Reporting


def _count_lines(paths: Sequence[Path]) -> int:
    total = 0
    for path in paths:
        with path.open("r", encoding="utf-8") as fh:
            total += sum(1 for line in fh if line.strip())
    return total


def report(run_dir: str | Path) -> tuple[str, dict[str, Any]]:
    """Validate the manifest and render the per-stage flow table.

    Writes report.txt and report.json next to the manifest and returns
    (text, payload). When final shards exist their recount must equal the
    manifest's final counts; a mismatch is a stage failure.
    """
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no manifest at {manifest_path}")
    manifest = DatasetManifest.load(manifest_path)
    manifest.validate()

    lines = [
        f"run {manifest.run_id}  (config {manifest.config_hash[:12]})",
        "",
        f"{'stage':<24} {'unit':<9} {'input':>8} {'kept':>8} {'removed':>8}  by_domain",
    ]
    stage_rows = []
    for entry in manifest.stages:
        domain_txt = ", ".join(f"{d}={c}" for d, c in sorted(entry.by_domain.items()))
        lines.append(
            f"{entry.stage_name:<24} {entry.unit:<9} {entry.input_count:>8} "
            f"{entry.kept_count:>8} {entry.removed_count:>8}  {domain_txt}"
        )
        stage_rows.append(entry.to_dict())

    payload: dict[str, Any] = {
        "run_id": manifest.run_id,
        "config_hash": manifest.config_hash,
        "stages": stage_rows,
        "final": {
            "questions": manifest.final_count("questions"),
            "answers": manifest.final_count("answers"),
        },
        "seeds": dict(manifest.seeds),
    }

    final_dir = run_dir / "final"
    if final_dir.is_dir():
        q_shards = sorted(final_dir.glob("questions-*.jsonl"))
        a_shards = sorted(final_dir.glob("answers-*.jsonl"))
        recount = {
            "questions": _count_lines(q_shards),
            "answers": _count_lines(a_shards),
        }
        payload["recount"] = recount
        lines.append("")
        lines.append(
            f"final shards: {recount['questions']} questions, {recount['answers']} answers"
        )
        mix_detail = next(
            (dict(e.detail) for e in reversed(manifest.stages) if e.stage_name == "mix"),
            None,
        )
        expected_q = (
            int(mix_detail["emitted"])
            if mix_detail and "emitted" in mix_detail
            else manifest.final_count("questions")
        )
        if recount["questions"] != expected_q:
            raise StageError(
                f"shard recount mismatch: {recount['questions']} question rows "
                f"on disk but the manifest accounts for {expected_q}"
            )
        if a_shards and recount["answers"] != manifest.final_count("answers"):
            raise StageError(
                f"shard recount mismatch: {recount['answers']} answer rows "
                f"on disk but the manifest accounts for {manifest.final_count('answers')}"
            )

    lines.append("")
    lines.append(
        f"final: {payload['final']['questions']} questions, "
        f"{payload['final']['answers']} answers"
    )
    text = "\n".join(lines) + "\n"
    atomic_write_text(run_dir / "report.txt", text)
    atomic_write_json(run_dir / "report.json", payload)
    return text, payload


def backsolve_targets(
    final_target: int, retentions: Sequence[tuple[str, float]]
) -> dict[str, int]:
    """Input target per stage, chained right to left.

    Each stage needs ceil(downstream / retention) inputs; the last stage's
    downstream is the final target.
    """
    if final_target < 0:
        raise ConfigError(f"final target must be >= 0, got {final_target}")
    needed = final_target
    out: dict[str, int] = {}
    for name, rate in reversed(list(retentions)):
        if not 0 < rate <= 1:
            raise ConfigError(f"stage {name!r} retention must be in (0,1], got {rate}")
        needed = math.ceil(needed / rate)
        out[name] = needed
    return dict(reversed(list(out.items())))
