from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# Acceptance tests register themselves here so the terminal summary can show
# one pass/fail line per criterion even when the suite is run as plain pytest.
_ACCEPTANCE: dict[str, tuple[bool, float]] = {}

_ACCEPTANCE_LABELS = {
    "test_c1_indel_formula_oracle": "C1 indel similarity vs quadratic DP oracle",
    "test_c2_decontamination_recipe": "C2 decontamination detector on generated testbed",
    "test_c3_dedup_correctness": "C3 dedup vs hash-set oracle, fuzzy + banded equivalence",
    "test_c4_classifier_quality": "C4 bag-of-ngrams classifier accuracy and determinism",
    "test_c5_mixing_arithmetic": "C5 mix_top_n per-source counts at target 31600",
    "test_c6_annotation_cache_resume": "C6 mock annotation, interrupt and resume",
    "test_c7_answer_filtering": "C7 answer-length filter oracle + consensus indexing",
    "test_c8_toy_recipe_end_to_end": "C8 toy recipe end-to-end under mock",
}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    base = item.name.split("[")[0]
    if base in _ACCEPTANCE_LABELS:
        if rep.when == "call":
            _ACCEPTANCE[base] = (rep.passed, rep.duration)
        elif rep.when == "setup" and rep.failed:
            _ACCEPTANCE[base] = (False, rep.duration)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, label in _ACCEPTANCE_LABELS.items():
        if name in _ACCEPTANCE:
            passed, duration = _ACCEPTANCE[name]
            status = "PASS" if passed else "FAIL"
            terminalreporter.write_line(f"[ACCEPTANCE] {label}: {status} ({duration:.1f}s)")
        else:
            terminalreporter.write_line(f"[ACCEPTANCE] {label}: NOT RUN")
