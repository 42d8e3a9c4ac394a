"""Tests for keyword generation, per-keyword ranking, and score fusion."""
import json

import numpy as np
import pytest

from trialmatch.bm25 import build_lexical_index
from trialmatch.corpus import PatientNote, build_trial
from trialmatch.embeddings import DenseIndex, EmbeddingError, HashEmbeddingProvider
from trialmatch.gateway import LlmGateway, MockBackend
from trialmatch.retrieval import (
    DENSE,
    FusionConfig,
    KeywordQuery,
    KeywordRanking,
    LEXICAL,
    MAX_KEYWORDS,
    RetrievalError,
    build_keyword_prompt,
    dense_rank,
    fuse,
    generate_keywords,
    lexical_rank,
    make_keyword_query,
    retrieve_patient,
)


def _gateway(fixtures=()):
    backend = MockBackend()
    for kwargs in fixtures:
        backend.add_fixture(**kwargs)
    return LlmGateway(backend), backend


def _brute_force_fusion(rankings, rrf_constant, cutoff):
    """Independent reference: sum 1/(i * (rank + C)) over every appearance."""
    totals = {}
    for ranking in rankings:
        for rank, (nct_id, _score) in enumerate(ranking.ranked_trials[:cutoff], 1):
            totals[nct_id] = totals.get(nct_id, 0.0) + 1.0 / (
                ranking.keyword_index * (rank + rrf_constant)
            )
    return totals


class TestKeywordQuery:
    def test_dedupe_case_insensitive_first_wins(self):
        query = make_keyword_query("p1", ["asthma", "Asthma", "copd"])
        assert query.keywords == ("asthma", "copd")

    def test_truncation_to_cap(self):
        query = make_keyword_query("p1", [f"kw{i}" for i in range(40)])
        assert len(query.keywords) == MAX_KEYWORDS
        assert query.keywords[0] == "kw0"
        assert query.keywords[-1] == "kw31"

    def test_empty_list_rejected(self):
        with pytest.raises(RetrievalError):
            make_keyword_query("p1", ["", "  "])

    def test_direct_construction_validates_bounds(self):
        with pytest.raises(RetrievalError):
            KeywordQuery("p1", ())
        with pytest.raises(RetrievalError):
            KeywordQuery("p1", tuple(f"kw{i}" for i in range(MAX_KEYWORDS + 1)))


class TestGenerateKeywords:
    def test_mock_fixture_round_trip(self):
        gateway, _ = _gateway(
            [{"fields": {"task": "keywords", "patient": "p1"},
              "response": '{"keywords": ["glioblastoma", "temozolomide"]}'}]
        )
        note = PatientNote.from_text("p1", "He has glioblastoma.")
        query = generate_keywords(note, gateway)
        assert query.keywords == ("glioblastoma", "temozolomide")

    def test_unparseable_response_carries_raw_text(self):
        gateway, _ = _gateway(
            [{"fields": {"task": "keywords"}, "response": "no json here"}]
        )
        note = PatientNote.from_text("p1", "text")
        with pytest.raises(RetrievalError) as exc_info:
            generate_keywords(note, gateway)
        assert exc_info.value.raw_response == "no json here"

    def test_empty_keyword_list_rejected(self):
        gateway, _ = _gateway(
            [{"fields": {"task": "keywords"}, "response": '{"keywords": []}'}]
        )
        note = PatientNote.from_text("p1", "text")
        with pytest.raises(RetrievalError):
            generate_keywords(note, gateway)

    def test_prompt_carries_patient_header_and_note(self):
        note = PatientNote.from_text("p1", "He has glioblastoma.")
        system_text, user_text = build_keyword_prompt(note)
        assert user_text.splitlines()[0] == "Request-Id: task=keywords;patient=p1"
        assert "He has glioblastoma." in user_text
        assert "32" in system_text


class TestPerKeywordRankings:
    def test_lexical_rank_orders_by_score(self):
        trials = [
            build_trial("NCT1", title="glioma glioma"),
            build_trial("NCT2", title="glioma melanoma"),
        ]
        index = build_lexical_index(trials)
        ranking = lexical_rank("glioma", index, cutoff=10, keyword_index=1)
        assert ranking.retriever == LEXICAL
        assert [nct for nct, _ in ranking.ranked_trials] == ["NCT1", "NCT2"]

    def test_lexical_rank_unknown_keyword_empty(self):
        index = build_lexical_index([build_trial("NCT1", title="glioma")])
        assert lexical_rank("asthma", index, cutoff=10).ranked_trials == ()

    def test_dense_rank_axis_vectors(self):
        vectors = {"NCT1": np.array([1.0, 0.0]), "NCT2": np.array([0.0, 1.0])}

        class AxisProvider:
            def embed(self, text):
                return np.array([1.0, 0.0])

        index = DenseIndex.from_vectors(vectors, AxisProvider())
        ranking = dense_rank("anything", index, cutoff=10, keyword_index=1)
        assert ranking.retriever == DENSE
        assert [nct for nct, _ in ranking.ranked_trials] == ["NCT1", "NCT2"]
        assert ranking.ranked_trials[0][1] == pytest.approx(1.0)
        assert ranking.ranked_trials[1][1] == pytest.approx(0.0)

    def test_dense_rank_provider_failure_is_embedding_error(self):
        class BrokenProvider:
            def embed(self, text):
                raise RuntimeError("provider offline")

        vectors = {"NCT1": np.array([1.0, 0.0])}
        index = DenseIndex.from_vectors(vectors, BrokenProvider())
        with pytest.raises(EmbeddingError, match="anything"):
            dense_rank("anything", index, cutoff=10)

    def test_ranking_rejects_increasing_scores(self):
        with pytest.raises(RetrievalError):
            KeywordRanking(LEXICAL, 1, (("NCT1", 0.1), ("NCT2", 0.2)))

    def test_cutoff_truncates(self):
        trials = [build_trial(f"NCT{i}", title="glioma") for i in range(5)]
        index = build_lexical_index(trials)
        ranking = lexical_rank("glioma", index, cutoff=3)
        assert len(ranking.ranked_trials) == 3


class TestFuse:
    def test_single_keyword_both_retrievers(self):
        rankings = [
            KeywordRanking(LEXICAL, 1, (("NCT1", 9.0),)),
            KeywordRanking(DENSE, 1, (("NCT0", 0.9), ("NCT1", 0.8))),
        ]
        result = fuse(rankings, FusionConfig(rrf_constant=20.0))
        scores = dict(result.scored)
        assert scores["NCT1"] == pytest.approx(1 / 21 + 1 / 22, abs=1e-12)
        assert scores["NCT1"] == pytest.approx(0.0930736, abs=1e-6)

    def test_second_keyword_contribution_halved(self):
        rankings = [
            KeywordRanking(LEXICAL, 1, (("NCT1", 9.0),)),
            KeywordRanking(DENSE, 1, (("NCT0", 0.9), ("NCT1", 0.8))),
            KeywordRanking(LEXICAL, 2, (("NCT7", 3.0), ("NCT8", 2.0), ("NCT1", 1.0))),
        ]
        result = fuse(rankings, FusionConfig(rrf_constant=20.0))
        scores = dict(result.scored)
        expected = 1 / 21 + 1 / 22 + 1 / (2 * 23)
        assert scores["NCT1"] == pytest.approx(expected, abs=1e-12)
        assert scores["NCT1"] == pytest.approx(0.1148127, abs=1e-6)

    def test_unranked_trial_absent_from_output(self):
        rankings = [KeywordRanking(LEXICAL, 1, (("NCT1", 1.0),))]
        result = fuse(rankings)
        assert "NCT2" not in dict(result.scored)

    def test_candidate_count_truncates(self):
        ranked = tuple((f"NCT{i:03d}", float(100 - i)) for i in range(100))
        rankings = [KeywordRanking(LEXICAL, 1, ranked)]
        result = fuse(rankings, FusionConfig(candidate_count=10))
        assert len(result.scored) == 10

    def test_per_keyword_cutoff_zeroes_deep_ranks(self):
        ranked = tuple((f"NCT{i:03d}", float(100 - i)) for i in range(100))
        rankings = [KeywordRanking(LEXICAL, 1, ranked)]
        result = fuse(rankings, FusionConfig(per_keyword_cutoff=5))
        assert len(result.scored) == 5

    def test_nonpositive_constant_rejected(self):
        with pytest.raises(RetrievalError):
            FusionConfig(rrf_constant=0.0)

    def test_ties_break_by_nct_id(self):
        rankings = [
            KeywordRanking(LEXICAL, 1, (("NCTB", 2.0),)),
            KeywordRanking(DENSE, 1, (("NCTA", 2.0),)),
        ]
        result = fuse(rankings)
        assert result.trial_ids() == ("NCTA", "NCTB")

    def test_matches_brute_force_on_random_rankings(self):
        rng = np.random.default_rng(53)
        trial_pool = [f"NCT{i:04d}" for i in range(50)]
        for _ in range(100):
            n_keywords = int(rng.integers(1, 6))
            rankings = []
            for i in range(1, n_keywords + 1):
                for retriever in (LEXICAL, DENSE):
                    if rng.random() < 0.2:
                        continue
                    size = int(rng.integers(0, 20))
                    chosen = rng.choice(len(trial_pool), size=size, replace=False)
                    scores = np.sort(rng.random(size))[::-1]
                    rankings.append(
                        KeywordRanking(
                            retriever,
                            i,
                            tuple(
                                (trial_pool[idx], float(s))
                                for idx, s in zip(chosen, scores)
                            ),
                        )
                    )
            config = FusionConfig(rrf_constant=20.0, per_keyword_cutoff=15)
            result = fuse(rankings, config)
            expected = _brute_force_fusion(rankings, 20.0, 15)
            order = sorted(expected.items(), key=lambda kv: (-kv[1], kv[0]))
            assert result.trial_ids() == tuple(nct for nct, _ in order[:500])
            for nct_id, score in result.scored:
                assert abs(score - expected[nct_id]) < 1e-12

    def test_rank_improvement_never_lowers_fused_score(self):
        """Moving a trial up one ranking, all else fixed, cannot hurt it."""
        rng = np.random.default_rng(59)
        pool = [f"NCT{i:02d}" for i in range(10)]
        for _ in range(100):
            size = int(rng.integers(2, 10))
            chosen = [pool[i] for i in rng.choice(len(pool), size=size, replace=False)]
            target = chosen[int(rng.integers(1, size))]
            base = tuple((nct, float(size - i)) for i, nct in enumerate(chosen))
            position = chosen.index(target)
            improved_ids = list(chosen)
            improved_ids[position - 1], improved_ids[position] = (
                improved_ids[position], improved_ids[position - 1],
            )
            improved = tuple((nct, float(size - i)) for i, nct in enumerate(improved_ids))
            extra = KeywordRanking(DENSE, 2, (("NCT00", 1.0), (target, 0.5)))
            before = dict(
                fuse([KeywordRanking(LEXICAL, 1, base), extra]).scored
            )[target]
            after = dict(
                fuse([KeywordRanking(LEXICAL, 1, improved), extra]).scored
            )[target]
            assert after >= before

    def test_keyword_decay_ordering(self):
        """Same rank under keyword 1 beats the same rank under keyword 2."""
        for rank_len in (1, 3, 7):
            ranked_a = tuple((f"NCTA{i}", float(rank_len - i)) for i in range(rank_len))
            ranked_b = tuple((f"NCTB{i}", float(rank_len - i)) for i in range(rank_len))
            result = fuse(
                [
                    KeywordRanking(LEXICAL, 1, ranked_a),
                    KeywordRanking(LEXICAL, 2, ranked_b),
                ]
            )
            scores = dict(result.scored)
            for i in range(rank_len):
                assert scores[f"NCTA{i}"] > scores[f"NCTB{i}"]

    def test_fuse_is_deterministic(self):
        rankings = [
            KeywordRanking(LEXICAL, 1, (("NCT1", 2.0), ("NCT2", 1.0))),
            KeywordRanking(DENSE, 1, (("NCT2", 0.8), ("NCT1", 0.7))),
        ]
        first = fuse(rankings, patient_id="p1")
        second = fuse(rankings, patient_id="p1")
        assert first == second


class TestRetrievePatient:
    def _corpus(self):
        return [
            build_trial("NCT1", title="glioblastoma temozolomide study"),
            build_trial("NCT2", title="asthma inhaler study"),
            build_trial("NCT3", title="glioblastoma surgery"),
        ]

    def _fixture(self):
        return [
            {"fields": {"task": "keywords", "patient": "p1"},
             "response": '{"keywords": ["glioblastoma", "temozolomide"]}'}
        ]

    def test_lexical_and_dense_fusion(self):
        trials = self._corpus()
        lexical = build_lexical_index(trials)
        dense = DenseIndex.build(trials, HashEmbeddingProvider(16))
        gateway, _ = _gateway(self._fixture())
        note = PatientNote.from_text("p1", "He has glioblastoma.")
        query, result = retrieve_patient(note, lexical, dense, gateway)
        assert query.keywords == ("glioblastoma", "temozolomide")
        assert not result.dense_skipped
        assert result.patient_id == "p1"
        # Dense ranks every trial, so all three trials earn fused score.
        assert set(result.trial_ids()) == {"NCT1", "NCT2", "NCT3"}

    def test_no_dense_index_flags_skip(self):
        trials = self._corpus()
        lexical = build_lexical_index(trials)
        gateway, _ = _gateway(self._fixture())
        note = PatientNote.from_text("p1", "He has glioblastoma.")
        _, result = retrieve_patient(note, lexical, None, gateway)
        assert result.dense_skipped
        assert set(result.trial_ids()) == {"NCT1", "NCT3"}

    def test_dense_failure_falls_back_to_lexical_only(self):
        trials = self._corpus()
        lexical = build_lexical_index(trials)

        class FlakyProvider:
            def embed(self, text):
                raise EmbeddingError("provider offline")

        dense = DenseIndex.from_vectors(
            {t.nct_id: np.zeros(4) for t in trials}, FlakyProvider()
        )
        gateway, _ = _gateway(self._fixture())
        note = PatientNote.from_text("p1", "He has glioblastoma.")
        _, with_failure = retrieve_patient(note, lexical, dense, gateway)
        _, lexical_only = retrieve_patient(note, lexical, None, gateway)
        assert with_failure.dense_skipped
        assert with_failure.scored == lexical_only.scored
