from __future__ import annotations

import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thoughtforge.clients import JsonCache, MockChatClient, MockEmbedClient
from thoughtforge.corpus import QuestionRecord
from thoughtforge.errors import ConfigError
from thoughtforge.filtering import (
    ClassifierHParams,
    QualityScore,
    load_classifier,
    mix_top_n,
    save_classifier,
    score_classifier,
    score_embedding_contrast,
    score_llm_judge,
    score_response_length,
    select_top_k,
    train_classifier,
)

from _oracles import is_valid_top_k


def question(text, source_id="src", domain="math"):
    return QuestionRecord.create(
        text=text, domain=domain, source_id=source_id, source_kind="non_synthetic"
    )


def two_class_corpus(rng, n_per_class, vocab_a, vocab_b):
    pos = [" ".join(rng.choices(vocab_a, k=rng.randint(5, 12))) for _ in range(n_per_class)]
    neg = [" ".join(rng.choices(vocab_b, k=rng.randint(5, 12))) for _ in range(n_per_class)]
    return pos, neg


VOCAB_A = [f"alpha{i}" for i in range(30)]
VOCAB_B = [f"beta{i}" for i in range(30)]


class TestClassifier:
    def test_separates_disjoint_vocabularies(self):
        rng = random.Random(0)
        train_pos, train_neg = two_class_corpus(rng, 150, VOCAB_A, VOCAB_B)
        test_pos, test_neg = two_class_corpus(rng, 50, VOCAB_A, VOCAB_B)
        model = train_classifier(train_pos, train_neg, seed=0)
        correct = 0
        for q in [question(t) for t in test_pos]:
            correct += score_classifier(model, [q])[0].score > 0.5
        for q in [question(t) for t in test_neg]:
            correct += score_classifier(model, [q])[0].score < 0.5
        assert correct / 100 >= 0.95

    def test_training_is_seed_deterministic(self):
        rng = random.Random(1)
        pos, neg = two_class_corpus(rng, 40, VOCAB_A, VOCAB_B)
        m1 = train_classifier(pos, neg, seed=5)
        m2 = train_classifier(pos, neg, seed=5)
        assert np.array_equal(m1.input_weights, m2.input_weights)
        assert np.array_equal(m1.output_weights, m2.output_weights)
        m3 = train_classifier(pos, neg, seed=6)
        assert not np.array_equal(m1.input_weights, m3.input_weights)

    def test_epoch_losses_do_not_increase(self):
        rng = random.Random(2)
        pos, neg = two_class_corpus(rng, 80, VOCAB_A, VOCAB_B)
        model = train_classifier(pos, neg, seed=0)
        losses = model.epoch_losses
        assert len(losses) == 3
        assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))

    def test_empty_class_rejected(self):
        with pytest.raises(ConfigError):
            train_classifier([], ["text here"])

    def test_unseen_vocabulary_falls_back_to_prior(self):
        rng = random.Random(3)
        pos, neg = two_class_corpus(rng, 30, VOCAB_A, VOCAB_B)
        model = train_classifier(pos, neg, seed=0)
        [score] = score_classifier(model, [question("zzz qqq www")])
        assert score.aux.get("empty_bag") is True
        assert score.score == pytest.approx(model.positive_prior)

    def test_hparams_validated(self):
        with pytest.raises(ConfigError):
            ClassifierHParams(dim=0)
        with pytest.raises(ConfigError):
            ClassifierHParams(learning_rate=0.0)
        with pytest.raises(ConfigError):
            ClassifierHParams(word_ngrams=0)

    def test_save_load_round_trip(self, tmp_path):
        rng = random.Random(4)
        pos, neg = two_class_corpus(rng, 40, VOCAB_A, VOCAB_B)
        model = train_classifier(pos, neg, seed=0)
        path = tmp_path / "model.bin"
        save_classifier(model, path)
        loaded = load_classifier(path)
        assert loaded.hparams == model.hparams
        assert loaded.vocab == model.vocab
        assert np.array_equal(loaded.input_weights, model.input_weights)
        assert np.array_equal(loaded.output_weights, model.output_weights)
        assert loaded.epoch_losses == model.epoch_losses
        probe = [question("alpha1 alpha2 alpha3 words")]
        assert score_classifier(loaded, probe) == score_classifier(model, probe)

    def test_reader_refuses_wrong_magic(self, tmp_path):
        path = tmp_path / "model.bin"
        path.write_bytes(b"XXXX" + b"\x00" * 64)
        with pytest.raises(ConfigError):
            load_classifier(path)


class TestSelectTopK:
    def test_selects_a_valid_top_k(self):
        scores = [
            QualityScore(record_id=f"id{i}", method="classifier", score=float(i % 7))
            for i in range(30)
        ]
        by_id = {s.record_id: s.score for s in scores}
        picked = select_top_k(scores, 10)
        assert is_valid_top_k(by_id, picked, 10)

    def test_deterministic_and_order_independent(self):
        scores = [
            QualityScore(record_id=f"id{i}", method="difficulty", score=float(i % 3))
            for i in range(20)
        ]
        shuffled = list(scores)
        random.Random(9).shuffle(shuffled)
        assert select_top_k(scores, 7, tie_seed=1) == select_top_k(shuffled, 7, tie_seed=1)

    def test_tie_seed_changes_tie_resolution(self):
        scores = [
            QualityScore(record_id=f"id{i}", method="difficulty", score=1.0)
            for i in range(12)
        ]
        assert select_top_k(scores, 4, tie_seed=0) != select_top_k(scores, 4, tie_seed=3)

    def test_k_larger_than_pool_rejected(self):
        scores = [QualityScore(record_id="a", method="difficulty", score=1.0)]
        with pytest.raises(ConfigError):
            select_top_k(scores, 2)

    @given(
        st.dictionaries(
            st.text(alphabet="abcdef", min_size=1, max_size=4),
            st.floats(0, 100),
            min_size=1,
            max_size=20,
        ),
        st.integers(0, 20),
        st.integers(0, 3),
    )
    def test_always_valid_top_k(self, by_id, k, tie_seed):
        k = min(k, len(by_id))
        scores = [
            QualityScore(record_id=rid, method="ask_llm", score=val)
            for rid, val in by_id.items()
        ]
        assert is_valid_top_k(by_id, select_top_k(scores, k, tie_seed=tie_seed), k)


def pools(sizes):
    out = []
    for name, size in sizes.items():
        out.append(
            (name, [question(f"{name} question number {i}", source_id=name) for i in range(size)])
        )
    return out


class TestMixTopN:
    def test_even_split(self):
        ranked = pools({"a": 50, "b": 50})
        mixed, counts = mix_top_n(ranked, 2, 40, seed=0)
        assert counts == {"a": 20, "b": 20}
        assert len(mixed) == 40

    def test_remainder_goes_to_first_pools(self):
        ranked = pools({"a": 50, "b": 50, "c": 50})
        _, counts = mix_top_n(ranked, 3, 10, seed=0)
        assert counts == {"a": 4, "b": 3, "c": 3}

    def test_only_first_n_pools_used(self):
        ranked = pools({"a": 50, "b": 50, "c": 50})
        _, counts = mix_top_n(ranked, 2, 10, seed=0)
        assert counts == {"a": 5, "b": 5}

    def test_undersized_pool_is_an_error_naming_it(self):
        ranked = pools({"a": 50, "tiny": 2})
        with pytest.raises(ConfigError) as err:
            mix_top_n(ranked, 2, 40, seed=0)
        assert "tiny" in str(err.value)

    def test_oversample_repeats_to_quota(self):
        ranked = pools({"a": 50, "tiny": 2})
        mixed, counts = mix_top_n(ranked, 2, 40, seed=0, oversample=True)
        assert counts == {"a": 20, "tiny": 20}
        assert len(mixed) == 40

    def test_more_pools_than_available_rejected(self):
        ranked = pools({"a": 10})
        with pytest.raises(ConfigError):
            mix_top_n(ranked, 2, 10, seed=0)

    def test_seed_determinism(self):
        ranked = pools({"a": 30, "b": 30})
        m1, _ = mix_top_n(ranked, 2, 20, seed=4)
        m2, _ = mix_top_n(ranked, 2, 20, seed=4)
        m3, _ = mix_top_n(ranked, 2, 20, seed=5)
        assert m1 == m2
        assert m1 != m3

    @given(st.integers(1, 5), st.integers(0, 60))
    def test_counts_sum_to_target(self, n, target):
        ranked = pools({f"p{i}": 80 for i in range(5)})
        mixed, counts = mix_top_n(ranked, n, target, seed=0)
        assert sum(counts.values()) == target
        assert len(mixed) == target
        quotas = sorted(counts.values(), reverse=True)
        assert quotas[0] - quotas[-1] <= 1


class TestJudgeScoring:
    def test_mock_scores_in_range_and_cached(self, tmp_path):
        cache = JsonCache(tmp_path)
        client = MockChatClient()
        qs = [question(f"judge question number {i}") for i in range(10)]
        report = score_llm_judge(qs, "difficulty", client, "math", cache=cache)
        assert len(report.scores) == 10
        assert all(1 <= s.score <= 10 for s in report.scores)
        first_calls = len(client.requests)
        report2 = score_llm_judge(qs, "difficulty", client, "math", cache=cache)
        assert len(client.requests) == first_calls  # all cache hits
        assert report2.scores == report.scores

    def test_ask_llm_range(self):
        client = MockChatClient()
        qs = [question(f"exam question number {i}") for i in range(5)]
        report = score_llm_judge(qs, "ask_llm", client, "science")
        assert all(1 <= s.score <= 100 for s in report.scores)

    def test_unparseable_judge_retried_once_then_dropped(self):
        calls = []

        def script(call_index, body):
            calls.append(call_index)
            return "no json here"

        client = MockChatClient(script=script)
        qs = [question("only question")]
        report = score_llm_judge(qs, "difficulty", client, "math")
        assert report.scores == ()
        assert report.dropped == 1
        assert len(calls) == 2  # one retry

    def test_out_of_range_score_dropped(self):
        def script(call_index, body):
            return json.dumps({"score": 99})

        client = MockChatClient(script=script)
        report = score_llm_judge([question("q text here")], "difficulty", client, "math")
        assert report.dropped == 1

    def test_unknown_judge_rejected(self):
        with pytest.raises(ConfigError):
            score_llm_judge([question("q text")], "vibes", MockChatClient(), "math")


class TestResponseLength:
    def test_lengths_positive_and_cached(self, tmp_path):
        cache = JsonCache(tmp_path)
        client = MockChatClient()
        qs = [question(f"length probe number {i}") for i in range(6)]
        report = score_response_length(qs, client, "proxy-model", cache=cache)
        assert len(report.scores) == 6
        assert all(s.score > 0 for s in report.scores)
        before = len(client.requests)
        report2 = score_response_length(qs, client, "proxy-model", cache=cache)
        assert len(client.requests) == before
        assert report2.scores == report.scores


class TestEmbeddingContrast:
    def test_positive_like_scores_higher(self):
        mapping = {
            "anchor positive": [1.0, 0.0],
            "anchor negative": [0.0, 1.0],
            "near positive text": [0.9, 0.1],
            "near negative text": [0.1, 0.9],
        }
        client = MockEmbedClient(dim=2, mapping=mapping)
        qs = [question("near positive text"), question("near negative text")]
        scores = score_embedding_contrast(qs, ["anchor positive"], ["anchor negative"], client)
        assert scores[0].score > scores[1].score

    def test_empty_anchor_sets_rejected(self):
        with pytest.raises(ConfigError):
            score_embedding_contrast([], [], ["x"], MockEmbedClient())


class TestQualityScore:
    def test_round_trip(self):
        score = QualityScore(record_id="r", method="ask_llm", score=42.0, aux={"note": "x"})
        assert QualityScore.from_dict(score.to_dict()) == score

    def test_unknown_method_rejected(self):
        with pytest.raises(ConfigError):
            QualityScore(record_id="r", method="guesswork", score=1.0)
