#!/usr/bin/env python3
"""Measure the contamination detector on a generated testbed.

Builds synthetic eval sets plus a pool of fresh questions with disjoint
vocabulary, derives labeled positives from the eval questions through the
four alteration classes (exact copy, context embedding, synonym and number
perturbation, formatting perturbation), and scores the two-path detector.
Optionally sweeps the similarity threshold to show the detection/FPR
trade-off."""

from __future__ import annotations

import argparse
import sys
import time

from thoughtforge.decontam import DecontamConfig, make_testbed, score_detector


def eval_question(i: int) -> str:
    # Two sentences and well over 13 tokens, so a context embedding always
    # shares a full n-gram window with the original.
    return (
        f"Determine how many ways benchset{i} objects can be arranged when "
        f"{i + 11} positions are fixed and piece{i % 23} repeats {i % 7} times. "
        f"Walk through the counting argument and state the final value plainly."
    )


def fresh_question(i: int) -> str:
    # Entirely different vocabulary from the eval pool, so a flagged one is
    # a genuine false positive and not an accidental overlap.
    return (
        f"Sketch why ore sample novel{i} melts before alloy window{i % 19} when "
        f"both sit at furnace grade {i % 31}. Keep the reasoning to a short "
        f"paragraph and cite the governing rule you rely on."
    )


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--eval-size", type=int, default=100, help="questions per eval set")
    ap.add_argument("--positives", type=int, default=1000)
    ap.add_argument("--negatives", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument(
        "--sweep",
        nargs="*",
        type=float,
        default=None,
        metavar="T",
        help="extra similarity thresholds to score beside the default 75",
    )
    args = ap.parse_args()

    eval_sets = {
        "bench_a": [(f"a{i}", eval_question(i)) for i in range(args.eval_size)],
        "bench_b": [(f"b{i}", eval_question(i + 1000)) for i in range(args.eval_size)],
    }
    fresh = [fresh_question(i) for i in range(args.negatives)]
    testbed = make_testbed(
        eval_sets, fresh, args.seed, positives=args.positives, negatives=args.negatives
    )
    print(f"testbed: {args.positives} positives across four alteration classes, "
          f"{args.negatives} fresh negatives")

    thresholds = [75.0] + list(args.sweep or [])
    for threshold in thresholds:
        config = DecontamConfig(indel_threshold=threshold)
        start = time.perf_counter()
        metrics = score_detector(testbed, eval_sets, config)
        elapsed = time.perf_counter() - start
        print()
        print(f"similarity threshold {threshold:g}  ({elapsed:.1f}s)")
        print(f"  detection rate: {metrics.tnr:.4f} "
              f"({metrics.detected_positives}/{metrics.total_positives})")
        print(f"  false positive rate: {metrics.fpr:.4f} "
              f"({metrics.flagged_negatives}/{metrics.total_negatives})")
        for alteration in sorted(metrics.per_alteration):
            print(f"  {alteration:<12} {metrics.per_alteration[alteration]:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
