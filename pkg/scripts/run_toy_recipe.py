#!/usr/bin/env python3
"""Build a small question bank on disk and push it through the full recipe
under the mock teacher: source, difficulty filter, exact dedup, annotation,
answer-length verify, decontamination, and mixing. Prints the per-stage flow
table at the end. Everything lands under --workdir, so a rerun against the
same directory replays from cache with zero new mock calls."""

from __future__ import annotations

import argparse
import json
import random
import sys
from pathlib import Path

from thoughtforge.pipeline import PipelineConfig, StageSpec, report, run

# Question shapes are deliberately varied so the bank is not one template
# with different digits; near-identical phrasing would make every question
# look like a fuzzy duplicate of the planted eval row.
SHAPES = [
    "Work out {a} plus {b} and explain every carry you perform along the way.",
    "A tank drains {a} liters each hour for {b} hours. How much water is gone?",
    "Let f(x) = {a}x + {b}. State f(10) and justify the arithmetic briefly.",
    "Split {a} marbles among {b} children as evenly as possible. Who gets extra?",
]


def build_bank(path: Path, count: int, duplicates: int, rng: random.Random) -> None:
    rows = []
    for i in range(count):
        shape = SHAPES[i % len(SHAPES)]
        rows.append(
            {
                "problem": shape.format(a=rng.randrange(10, 500), b=rng.randrange(2, 90))
                + f" (item {i})",
                "level": str(i % 5),
            }
        )
    rows += rng.sample(rows, min(duplicates, len(rows)))
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")


def build_evals(directory: Path, bank_path: Path) -> None:
    """One eval file with an unrelated question plus a verbatim copy of a
    bank row, so the decontam stage visibly removes something."""
    directory.mkdir(parents=True, exist_ok=True)
    first_bank_text = json.loads(bank_path.read_text(encoding="utf-8").splitlines()[0])["problem"]
    rows = [
        {"id": "toy-eval-0", "text": "Name the smallest prime whose digits sum to a square and defend the claim."},
        {"id": "toy-eval-1", "text": first_bank_text},
    ]
    (directory / "toybench.jsonl").write_text(
        "".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8"
    )


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", type=Path, default=Path("toy_run"))
    ap.add_argument("--questions", type=int, default=60)
    ap.add_argument("--duplicates", type=int, default=6)
    ap.add_argument("--target", type=int, default=20, help="mix target for the math domain")
    ap.add_argument("--k", type=int, default=2, help="annotation samples per question")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    args.workdir.mkdir(parents=True, exist_ok=True)
    rng = random.Random(args.seed)
    bank = args.workdir / "bank.jsonl"
    evals = args.workdir / "evals"
    build_bank(bank, args.questions, args.duplicates, rng)
    build_evals(evals, bank)

    config = PipelineConfig(
        stages=(
            StageSpec(
                kind="source",
                params={
                    "specs": [
                        {
                            "source_id": "toybank",
                            "kind": "non_synthetic",
                            "domain": "math",
                            "input_path": str(bank),
                            "field_mapping": {"problem": "text", "level": "level"},
                        }
                    ]
                },
            ),
            StageSpec(kind="filter", params={"method": "difficulty", "keep_fraction": 0.9}),
            StageSpec(kind="dedup", params={"level": "exact"}),
            StageSpec(kind="annotate", params={"k": args.k}),
            StageSpec(kind="verify", params={"ops": [{"op": "filter_by_answer_length", "keep": 1}]}),
            StageSpec(kind="decontam", params={"evals": str(evals)}),
            StageSpec(kind="mix", params={"n": 1, "targets": {"math": args.target}}),
        ),
        cache_root=str(args.workdir / "cache"),
        run_root=str(args.workdir / "runs"),
    )
    recipe_path = args.workdir / "recipe.json"
    recipe_path.write_text(json.dumps(config.to_dict(), indent=2) + "\n", encoding="utf-8")
    print(f"recipe written to {recipe_path}")

    result = run(config, mock=True)
    text, payload = report(result.run_dir)
    print()
    print(text)
    print()
    print(f"final shards under {result.run_dir / 'final'}")
    print(f"final questions: {payload['final']['questions']}, answers: {payload['final']['answers']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
