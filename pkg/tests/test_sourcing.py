from __future__ import annotations

import json

import pytest

from thoughtforge.clients import JsonCache, MockChatClient
from thoughtforge.errors import ConfigError, StageError, TransportError
from thoughtforge.sourcing import (
    PageExtractionConfig,
    SourceSpec,
    _parse_extraction,
    extract_questions_from_pages,
    generate_from_seed,
    ingest_existing,
    load_source_spec,
)


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")


class TestSourceSpec:
    def test_non_synthetic_needs_input_and_text_mapping(self):
        SourceSpec(
            source_id="s",
            kind="non_synthetic",
            domain="math",
            input_path="a.jsonl",
            field_mapping={"problem": "text"},
        )

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            SourceSpec(source_id="s", kind="organic", domain="math")

    def test_non_synthetic_without_text_mapping_rejected(self):
        with pytest.raises(ConfigError):
            SourceSpec(
                source_id="s",
                kind="non_synthetic",
                domain="math",
                input_path="a.jsonl",
                field_mapping={"problem": "title"},
            )

    def test_non_synthetic_with_template_rejected(self):
        with pytest.raises(ConfigError):
            SourceSpec(
                source_id="s",
                kind="non_synthetic",
                domain="math",
                input_path="a.jsonl",
                field_mapping={"problem": "text"},
                prompt_template_id="generate_math_from_text",
            )

    def test_synthetic_needs_seed_corpus_and_template(self):
        SourceSpec(
            source_id="s",
            kind="fully_synthetic",
            domain="math",
            seed_corpus_path="seeds.jsonl",
            prompt_template_id="generate_math_from_text",
        )
        with pytest.raises(ConfigError):
            SourceSpec(
                source_id="s",
                kind="fully_synthetic",
                domain="math",
                seed_corpus_path="seeds.jsonl",
            )

    def test_synthetic_with_input_path_rejected(self):
        with pytest.raises(ConfigError):
            SourceSpec(
                source_id="s",
                kind="semi_synthetic",
                domain="math",
                input_path="a.jsonl",
                seed_corpus_path="seeds.jsonl",
                prompt_template_id="generate_math_from_text",
            )


class TestLoadSourceSpec:
    def test_single_object(self, tmp_path):
        path = tmp_path / "spec.json"
        path.write_text(
            json.dumps(
                {
                    "source_id": "s1",
                    "kind": "non_synthetic",
                    "domain": "math",
                    "input_path": "rows.jsonl",
                    "field_mapping": {"q": "text"},
                }
            )
        )
        [spec] = load_source_spec(path)
        assert spec.source_id == "s1"

    def test_list_of_specs(self, tmp_path):
        path = tmp_path / "spec.json"
        path.write_text(
            json.dumps(
                [
                    {
                        "source_id": "a",
                        "kind": "non_synthetic",
                        "domain": "math",
                        "input_path": "r.jsonl",
                        "field_mapping": {"q": "text"},
                    },
                    {
                        "source_id": "b",
                        "kind": "fully_synthetic",
                        "domain": "code",
                        "seed_corpus_path": "s.jsonl",
                        "prompt_template_id": "generate_math_from_text",
                    },
                ]
            )
        )
        specs = load_source_spec(path)
        assert [s.source_id for s in specs] == ["a", "b"]

    def test_missing_required_key_named(self, tmp_path):
        path = tmp_path / "spec.json"
        path.write_text(json.dumps({"source_id": "s", "kind": "non_synthetic"}))
        with pytest.raises(ConfigError, match="domain"):
            load_source_spec(path)


class TestIngestExisting:
    def spec(self, tmp_path, mapping=None):
        return SourceSpec(
            source_id="bank",
            kind="non_synthetic",
            domain="math",
            input_path=str(tmp_path / "rows.jsonl"),
            field_mapping=mapping or {"problem": "text"},
        )

    def test_rows_become_records(self, tmp_path):
        write_jsonl(
            tmp_path / "rows.jsonl",
            [{"problem": "Solve 1+1."}, {"problem": "Solve 2+2."}],
        )
        result = ingest_existing(self.spec(tmp_path))
        assert [r.text for r in result.records] == ["Solve 1+1.", "Solve 2+2."]
        assert result.records[0].metadata["row"] == "1"
        assert result.records[1].metadata["row"] == "2"
        assert result.skipped_empty == 0

    def test_extra_mapped_fields_land_in_metadata(self, tmp_path):
        write_jsonl(
            tmp_path / "rows.jsonl",
            [{"problem": "Solve.", "ans": "42", "junk": "ignored"}],
        )
        result = ingest_existing(
            self.spec(tmp_path, {"problem": "text", "ans": "reference_answer"})
        )
        [record] = result.records
        assert record.metadata["reference_answer"] == "42"
        assert "junk" not in record.metadata

    def test_empty_text_skipped_and_counted(self, tmp_path):
        write_jsonl(
            tmp_path / "rows.jsonl",
            [{"problem": "Real."}, {"problem": "   "}, {"problem": ""}],
        )
        result = ingest_existing(self.spec(tmp_path))
        assert len(result.records) == 1
        assert result.skipped_empty == 2

    def test_missing_text_field_names_line(self, tmp_path):
        write_jsonl(tmp_path / "rows.jsonl", [{"problem": "ok"}, {"other": "x"}])
        with pytest.raises(StageError, match=":2"):
            ingest_existing(self.spec(tmp_path))

    def test_bad_json_row_fails_stage(self, tmp_path):
        (tmp_path / "rows.jsonl").write_text('{"problem": "ok"}\nnot json\n')
        with pytest.raises(StageError, match=":2"):
            ingest_existing(self.spec(tmp_path))

    def test_missing_file_is_config_error(self, tmp_path):
        with pytest.raises(ConfigError):
            ingest_existing(self.spec(tmp_path))


class TestGenerateFromSeed:
    SEEDS = [(f"seed-{i}", f"Seeds about topic {i}.") for i in range(6)]

    def test_generates_one_record_per_seed(self):
        result = generate_from_seed(
            self.SEEDS,
            "generate_math_from_text",
            MockChatClient(),
            n=6,
            seed=0,
            source_id="syn",
            domain="math",
        )
        assert len(result.records) == 6
        assert result.failures == ()
        assert [r.metadata["seed_id"] for r in result.records] == sorted(
            s for s, _ in self.SEEDS
        )
        assert all(r.source_kind == "fully_synthetic" for r in result.records)

    def test_budget_below_seed_count_samples_deterministically(self):
        kw = dict(n=3, seed=0, source_id="syn", domain="math")
        first = generate_from_seed(
            self.SEEDS, "generate_math_from_text", MockChatClient(), **kw
        )
        second = generate_from_seed(
            self.SEEDS, "generate_math_from_text", MockChatClient(), **kw
        )
        assert len(first.records) == 3
        assert [r.text for r in first.records] == [r.text for r in second.records]
        shifted = generate_from_seed(
            self.SEEDS, "generate_math_from_text", MockChatClient(), n=3, seed=1,
            source_id="syn", domain="math",
        )
        assert {r.metadata["seed_id"] for r in shifted.records} != {
            r.metadata["seed_id"] for r in first.records
        }

    def test_cache_makes_rerun_call_free(self, tmp_path):
        cache = JsonCache(tmp_path)
        kw = dict(n=6, seed=0, source_id="syn", domain="math", cache=cache)
        first = generate_from_seed(
            self.SEEDS, "generate_math_from_text", MockChatClient(), **kw
        )
        client = MockChatClient()
        second = generate_from_seed(self.SEEDS, "generate_math_from_text", client, **kw)
        assert client.requests == []
        assert [r.text for r in second.records] == [r.text for r in first.records]

    def test_mapping_seeds_fill_multi_slot_templates(self):
        seeds = [
            ("c1", {"message": "fix overflow", "old_contents": "x = a + b"}),
        ]
        result = generate_from_seed(
            seeds,
            "generate_code_from_commit",
            MockChatClient(),
            n=1,
            seed=0,
            source_id="commits",
            domain="code",
        )
        assert len(result.records) == 1

    def test_plain_string_seed_rejected_for_multi_slot_template(self):
        with pytest.raises(ConfigError, match="single-slot"):
            generate_from_seed(
                [("c1", "just text")],
                "generate_code_from_commit",
                MockChatClient(),
                n=1,
                seed=0,
                source_id="commits",
                domain="code",
            )

    def test_mapping_seed_missing_slot_rejected(self):
        with pytest.raises(ConfigError, match="old_contents"):
            generate_from_seed(
                [("c1", {"message": "fix overflow"})],
                "generate_code_from_commit",
                MockChatClient(),
                n=1,
                seed=0,
                source_id="commits",
                domain="code",
            )

    def test_transport_failures_recorded(self):
        def drop_even(call_index, body):
            if call_index % 2 == 0:
                raise TransportError("gone", retryable=False)
            return None

        result = generate_from_seed(
            self.SEEDS,
            "generate_math_from_text",
            MockChatClient(script=drop_even),
            n=6,
            seed=0,
            source_id="syn",
            domain="math",
            max_workers=1,
        )
        assert len(result.records) + len(result.failures) == 6
        assert list(result.failures) == sorted(result.failures)

    def test_empty_response_counted_as_failure(self):
        def one_blank(call_index, body):
            return "   " if call_index == 0 else None

        result = generate_from_seed(
            self.SEEDS,
            "generate_math_from_text",
            MockChatClient(script=one_blank),
            n=6,
            seed=0,
            source_id="syn",
            domain="math",
            max_workers=1,
        )
        assert len(result.records) == 5
        assert any(reason == "empty response" for _, reason in result.failures)

    def test_all_failures_fail_the_stage(self):
        def always_fail(call_index, body):
            raise TransportError("down", retryable=False)

        with pytest.raises(StageError):
            generate_from_seed(
                self.SEEDS,
                "generate_math_from_text",
                MockChatClient(script=always_fail),
                n=6,
                seed=0,
                source_id="syn",
                domain="math",
            )

    def test_nonpositive_budget_rejected(self):
        with pytest.raises(ConfigError):
            generate_from_seed(
                self.SEEDS,
                "generate_math_from_text",
                MockChatClient(),
                n=0,
                seed=0,
                source_id="syn",
                domain="math",
            )


class TestParseExtraction:
    def test_marker_protocol(self):
        text = (
            "QUESTION: What is acid?\n"
            "ANSWER CHOICES: A) sour B) sweet\n"
            "SOLUTION: A\n"
            "QUESTION: Name a base.\n"
            "SOLUTION: NaOH\n"
        )
        entries = _parse_extraction(text)
        assert len(entries) == 2
        assert entries[0]["question"] == "What is acid?"
        assert entries[0]["answer_choices"] == "A) sour B) sweet"
        assert entries[1] == {"question": "Name a base.", "solution": "NaOH"}

    def test_unmarked_lines_continue_current_field(self):
        text = "QUESTION: Part one\ncontinues here\nSOLUTION: short"
        [entry] = _parse_extraction(text)
        assert entry["question"] == "Part one continues here"

    def test_wrapping_quotes_stripped(self):
        text = 'QUESTION: "Quoted prompt?"'
        [entry] = _parse_extraction(text)
        assert entry["question"] == "Quoted prompt?"

    def test_markerless_text_yields_nothing(self):
        assert _parse_extraction("No markers anywhere on this page.") == []

    def test_entry_without_question_dropped(self):
        text = "SOLUTION: orphaned\nQUESTION: real one"
        entries = _parse_extraction(text)
        assert [e["question"] for e in entries] == ["real one"]


class TestExtractQuestionsFromPages:
    CONFIG = PageExtractionConfig(source_id="scans", domain="science")
    PAGES = [("page-1", "Pretend scanned chemistry text."), ("page-2", "More text.")]

    def test_chain_produces_sorted_records(self):
        result = extract_questions_from_pages(self.PAGES, self.CONFIG, MockChatClient())
        # the mock extraction protocol yields two questions per page
        assert result.stage_counts["pages"] == 2
        assert result.stage_counts["extracted"] == 4
        assert len(result.records) == result.stage_counts["on_topic"]
        keys = [(r.metadata["page_id"], int(r.metadata["position"])) for r in result.records]
        assert keys == sorted(keys)

    def test_no_answer_detected_kept(self):
        result = extract_questions_from_pages(self.PAGES, self.CONFIG, MockChatClient())
        solutions = [r.metadata.get("solution", "") for r in result.records]
        assert any(s == "NO ANSWER DETECTED" for s in solutions)

    def test_empty_pages_skipped(self):
        result = extract_questions_from_pages(
            [("blank", "   "), self.PAGES[0]], self.CONFIG, MockChatClient()
        )
        assert result.stage_counts["pages"] == 1

    def test_cache_resume_issues_no_calls(self, tmp_path):
        cache = JsonCache(tmp_path)
        first = extract_questions_from_pages(
            self.PAGES, self.CONFIG, MockChatClient(), cache=cache
        )
        client = MockChatClient()
        second = extract_questions_from_pages(
            self.PAGES, self.CONFIG, client, cache=cache
        )
        assert client.requests == []
        assert [r.text for r in second.records] == [r.text for r in first.records]

    def test_extraction_failure_is_page_failure(self):
        def fail_first(call_index, body):
            if call_index == 0:
                raise TransportError("scan service down", retryable=False)
            return None

        result = extract_questions_from_pages(
            self.PAGES, self.CONFIG, MockChatClient(script=fail_first)
        )
        assert len(result.page_failures) == 1
        assert result.page_failures[0][0] == "page-1"
        assert result.stage_counts["pages"] == 2

    def test_rejecting_judge_drops_questions(self):
        def deny_judges(call_index, body):
            content = body["messages"][0]["content"]
            if "answerable difficult" in content:
                return '{"decision": false, "reasoning": "content not visible"}'
            return None

        result = extract_questions_from_pages(
            self.PAGES, self.CONFIG, MockChatClient(script=deny_judges)
        )
        assert result.records == ()
        assert result.stage_counts["answerable"] == 0

    def test_topic_gate_filters(self):
        config = PageExtractionConfig(
            source_id="scans",
            domain="science",
            topic_template="filter_organic_chemistry",
        )
        def deny_topic(call_index, body):
            content = body["messages"][0]["content"]
            if "organic" in content.lower():
                return '{"decision": false, "reasoning": "off topic"}'
            return None

        result = extract_questions_from_pages(
            self.PAGES, config, MockChatClient(script=deny_topic)
        )
        assert result.stage_counts["on_topic"] == 0
        assert result.records == ()
