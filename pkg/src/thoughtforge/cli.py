"""Command-line interface.

Every verb maps configuration mistakes to exit code 2 and runtime stage
failures to exit code 3, so shell pipelines can tell "fix the recipe" from
"rerun the stage".
"""

from __future__ import annotations

import dataclasses
import functools
import json
import sys
from pathlib import Path

import click

from .clients import HttpChatClient, JsonCache, MockChatClient
from .corpus import AnswerSample, read_shards, write_shards
from .decontam import DecontamConfig, decontaminate, load_eval_sets
from .dedup import dedup_stage
from .errors import EXIT_CONFIG_ERROR, EXIT_STAGE_FAILURE, ConfigError, StageError
from .filtering import (
    SCORE_METHODS,
    QualityScore,
    load_classifier,
    mix_top_n,
    score_classifier,
    score_llm_judge,
    score_response_length,
    select_top_k,
)
from .fsutil import atomic_write_json
from .pipeline import PipelineConfig
from .pipeline import report as pipeline_report
from .pipeline import run as pipeline_run
from .sourcing import generate_from_seed, ingest_existing, load_source_spec
from .verify import (
    filter_by_answer_length,
    filter_trace_length,
    majority_consensus,
    strip_self_reflection,
    structural_filter,
)


def _handled(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG_ERROR)
        except StageError as exc:
            click.echo(f"stage failure: {exc}", err=True)
            sys.exit(EXIT_STAGE_FAILURE)

    return wrapper


def _chat_client(mock: bool, endpoint: str | None, model: str):
    if mock or endpoint is None or endpoint.startswith("mock://"):
        return MockChatClient(model=model)
    return HttpChatClient(endpoint, model)


@click.group()
def main() -> None:
    """Reasoning-dataset pipeline: source, filter, dedup, annotate, verify,
    decontaminate, and mix question corpora."""


@main.command()
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--mock", is_flag=True, help="Use the in-process mock teacher.")
@click.option("--endpoint", default=None, help="Chat endpoint for generation.")
@click.option("--model", default="mock-teacher", show_default=True)
@click.option("--seed", default=0, show_default=True)
@_handled
def source(spec_path: str, out_dir: str, mock: bool, endpoint: str | None, model: str, seed: int) -> None:
    """Materialize question records from one or more source specs."""
    specs = load_source_spec(spec_path)
    client = _chat_client(mock, endpoint, model)
    cache = JsonCache(Path(out_dir) / ".cache")
    records = []
    for spec in specs:
        if spec.kind == "non_synthetic":
            result = ingest_existing(spec)
            records.extend(result.records)
            click.echo(
                f"{spec.source_id}: ingested {len(result.records)} "
                f"(skipped {result.skipped_empty} empty)"
            )
        else:
            rows = read_shards(spec.seed_corpus_path or "", record_type=dict)
            seed_items = [
                (str(row.get("id", f"row{i:06d}")), str(row.get("text", "")))
                for i, row in enumerate(rows, start=1)
            ]
            budget = spec.n if spec.n is not None else len(seed_items)
            gen = generate_from_seed(
                seed_items,
                spec.prompt_template_id or "",
                client,
                budget,
                seed,
                source_id=spec.source_id,
                domain=spec.domain,
                kind=spec.kind,
                cache=cache,
            )
            records.extend(gen.records)
            click.echo(
                f"{spec.source_id}: generated {len(gen.records)} "
                f"({len(gen.failures)} failures)"
            )
    result = write_shards(records, out_dir, prefix="questions")
    click.echo(f"wrote {result.record_count} questions to {out_dir}")


@main.group(name="filter")
def filter_group() -> None:
    """Quality scoring, top-k selection, and source mixing."""


@filter_group.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--method", required=True, type=click.Choice(sorted(SCORE_METHODS)))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--model-path", default=None, type=click.Path(), help="Classifier model file.")
@click.option("--mock", is_flag=True)
@click.option("--endpoint", default=None)
@click.option("--model", default="mock-teacher", show_default=True)
@click.option("--cache", "cache_dir", default=None, type=click.Path())
@_handled
def score(
    in_path: str,
    method: str,
    out_path: str,
    model_path: str | None,
    mock: bool,
    endpoint: str | None,
    model: str,
    cache_dir: str | None,
) -> None:
    """Score questions by one quality method; write scores as JSON."""
    questions = read_shards(in_path)
    cache = JsonCache(cache_dir) if cache_dir else None
    if method == "classifier":
        if not model_path:
            raise ConfigError("--model-path is required for the classifier method")
        scores = score_classifier(load_classifier(model_path), questions)
        dropped = 0
    elif method in ("difficulty", "ask_llm"):
        client = _chat_client(mock, endpoint, model)
        scores = []
        dropped = 0
        for domain in sorted({q.domain for q in questions}):
            group = [q for q in questions if q.domain == domain]
            rep = score_llm_judge(group, method, client, domain, cache=cache)
            scores.extend(rep.scores)
            dropped += rep.dropped
    elif method == "response_length":
        client = _chat_client(mock, endpoint, model)
        rep = score_response_length(questions, client, model, cache=cache)
        scores = list(rep.scores)
        dropped = rep.dropped
    else:
        raise ConfigError(
            "embedding_contrast scoring runs inside a recipe where anchor "
            "corpora are configured; use `thoughtforge run`"
        )
    atomic_write_json(Path(out_path), [s.to_dict() for s in scores])
    click.echo(f"scored {len(scores)} questions ({dropped} dropped) -> {out_path}")


@filter_group.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--scores", "scores_path", required=True, type=click.Path(exists=True))
@click.option("--top-k", "top_k", required=True, type=int)
@click.option("--tie-seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@_handled
def select(in_path: str, scores_path: str, top_k: int, tie_seed: int, out_dir: str) -> None:
    """Keep the k highest-scored questions."""
    questions = read_shards(in_path)
    raw = json.loads(Path(scores_path).read_text(encoding="utf-8"))
    scores = [QualityScore.from_dict(entry) for entry in raw]
    keep = set(select_top_k(scores, min(top_k, len(scores)), tie_seed=tie_seed))
    kept = [q for q in questions if q.id in keep]
    result = write_shards(kept, out_dir, prefix="questions")
    click.echo(f"kept {result.record_count} of {len(questions)} questions -> {out_dir}")


@filter_group.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--n", required=True, type=int, help="How many top-ranked sources to draw from.")
@click.option("--target", required=True, type=int)
@click.option("--seed", default=0, show_default=True)
@click.option("--oversample", is_flag=True)
@click.option(
    "--ranking",
    default=None,
    help="Comma-separated source ids, best first; defaults to size order.",
)
@click.option("--out", "out_dir", required=True, type=click.Path())
@_handled
def mix(
    in_path: str,
    n: int,
    target: int,
    seed: int,
    oversample: bool,
    ranking: str | None,
    out_dir: str,
) -> None:
    """Draw the target count evenly from the top n sources."""
    questions = read_shards(in_path)
    pools: dict[str, list] = {}
    for q in questions:
        pools.setdefault(q.source_id, []).append(q)
    if ranking:
        order = [s.strip() for s in ranking.split(",") if s.strip()]
        missing = [s for s in order if s not in pools]
        if missing:
            raise ConfigError(f"ranking names unknown sources: {missing}")
    else:
        order = sorted(pools, key=lambda s: (-len(pools[s]), s))
    mixed, counts = mix_top_n(
        [(sid, pools[sid]) for sid in order], n, target, seed=seed, oversample=oversample
    )
    result = write_shards(mixed, out_dir, prefix="questions")
    click.echo(f"mixed {result.record_count} questions -> {out_dir}")
    for sid, count in counts.items():
        click.echo(f"  {sid}: {count}")


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--level", required=True, type=click.Choice(["none", "exact", "fuzzy"]))
@click.option("--threshold", default=None, type=float, help="Fuzzy similarity threshold.")
@click.option("--mode", default="auto", type=click.Choice(["auto", "exhaustive", "banded"]), show_default=True)
@click.option("--lowercase", is_flag=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@_handled
def dedup(
    in_path: str,
    level: str,
    threshold: float | None,
    mode: str,
    lowercase: bool,
    out_dir: str,
) -> None:
    """Drop duplicate questions, keeping the first occurrence."""
    questions = read_shards(in_path)
    survivors, entry = dedup_stage(
        questions, level, threshold=threshold, mode=mode, lowercase=lowercase
    )
    result = write_shards(list(survivors), out_dir, prefix="questions")
    click.echo(
        f"dedup level={level}: kept {entry.kept_count} of {entry.input_count} "
        f"-> {out_dir} ({result.record_count} records)"
    )


_STRATEGIES = (
    "shortest",
    "longest",
    "consensus",
    "trace-length",
    "strip-reflection",
    "python-tag",
)


@main.command()
@click.option("--questions", "questions_path", required=True, type=click.Path(exists=True))
@click.option("--answers", "answers_path", required=True, type=click.Path(exists=True))
@click.option("--strategy", required=True, type=click.Choice(_STRATEGIES))
@click.option("--keep", default=8, show_default=True, help="Samples kept per question (length strategies).")
@click.option("--max-tokens", default=8192, show_default=True, help="Trace budget (trace-length strategy).")
@click.option("--mock", is_flag=True)
@click.option("--endpoint", default=None)
@click.option("--model", default="mock-teacher", show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@_handled
def verify(
    questions_path: str,
    answers_path: str,
    strategy: str,
    keep: int,
    max_tokens: int,
    mock: bool,
    endpoint: str | None,
    model: str,
    out_dir: str,
) -> None:
    """Filter or rewrite answer samples, grouped per question."""
    questions = {q.id: q for q in read_shards(questions_path)}
    answers = read_shards(answers_path, record_type=AnswerSample.from_dict)
    groups: dict[str, list[AnswerSample]] = {}
    for sample in answers:
        groups.setdefault(sample.question_id, []).append(sample)
    client = _chat_client(mock, endpoint, model)

    surviving: list[AnswerSample] = []
    for qid in sorted(groups):
        group = sorted(groups[qid], key=lambda s: s.sample_index)
        if strategy in ("shortest", "longest"):
            group = filter_by_answer_length(group, keep, direction=strategy)
        elif strategy == "consensus":
            question = questions.get(qid)
            if question is None:
                raise ConfigError(f"answers reference unknown question {qid!r}")
            outcome = majority_consensus(question, group, client, question.domain)
            keep_idx = set(outcome.kept_indices)
            group = [s for s in group if s.sample_index in keep_idx]
        elif strategy == "trace-length":
            group = filter_trace_length(group, max_tokens)
        elif strategy == "strip-reflection":
            group = [
                dataclasses.replace(s, reasoning_trace=strip_self_reflection(s.reasoning_trace))
                for s in group
            ]
        elif strategy == "python-tag":
            group = [s for s in group if structural_filter(s, "python_tag")[0]]
        surviving.extend(group)

    result = write_shards(surviving, out_dir, prefix="answers")
    click.echo(
        f"verify strategy={strategy}: kept {result.record_count} of {len(answers)} "
        f"answers -> {out_dir}"
    )


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--evals", "evals_dir", required=True, type=click.Path(exists=True))
@click.option("--threshold", default=75.0, show_default=True)
@click.option("--ngram", default=13, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@_handled
def decontam(in_path: str, evals_dir: str, threshold: float, ngram: int, out_dir: str) -> None:
    """Drop questions that overlap the eval sets; write a method report."""
    questions = read_shards(in_path)
    eval_sets = load_eval_sets(evals_dir)
    config = DecontamConfig(ngram_size=ngram, indel_threshold=threshold)
    clean, rep = decontaminate(questions, eval_sets, config)
    result = write_shards(clean, out_dir, prefix="questions")
    atomic_write_json(Path(out_dir) / "decontam-report.json", rep.to_dict())
    click.echo(
        f"decontam: kept {rep.kept_count} of {rep.input_count} "
        f"(removed {rep.removed_count}) -> {out_dir} ({result.record_count} records)"
    )


@main.command()
@click.option("-c", "--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--mock", is_flag=True, help="Run with in-process deterministic clients.")
@click.option("--resume", "resume_run_id", default=None, help="Resume a halted run by id.")
@_handled
def run(config_path: str, mock: bool, resume_run_id: str | None) -> None:
    """Execute a recipe end to end and write runs/<run_id>/."""
    config = PipelineConfig.from_file(config_path)
    result = pipeline_run(config, mock=mock, resume_run_id=resume_run_id)
    click.echo(f"run {result.run_id} complete -> {result.run_dir}")
    click.echo(
        f"final: {result.manifest.final_count('questions')} questions, "
        f"{result.manifest.final_count('answers')} answers"
    )


@main.command()
@click.argument("run_id")
@click.option("--run-root", default="runs", show_default=True, type=click.Path())
@_handled
def report(run_id: str, run_root: str) -> None:
    """Validate a run's ledger and print the per-stage flow table."""
    text, _ = pipeline_report(Path(run_root) / run_id)
    click.echo(text, nl=False)


if __name__ == "__main__":
    main()
