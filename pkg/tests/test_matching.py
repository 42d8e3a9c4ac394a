"""Tests for criterion-level matching prompts, parsing, and orchestration."""
import json

import numpy as np
import pytest

from trialmatch.corpus import Cohort, PatientNote, Side, build_trial
from trialmatch.gateway import (
    LlmGateway,
    MockBackend,
    TransportError,
    format_request_header,
)
from trialmatch.matching import (
    EXCLUSION_LABELS,
    INCLUSION_LABELS,
    MatchingConfig,
    MatchingError,
    NO_INFORMATION,
    PARSE_FAILED,
    PARSE_OK,
    PARSE_REPAIRED,
    CriterionPrediction,
    TrialMatchResult,
    build_matching_prompt,
    failed_prediction,
    load_match_results,
    match_cohort,
    match_pair,
    match_result_from_row,
    normalize_label,
    parse_matching_response,
    serialize_match_result,
    write_match_results,
)

NOTE = PatientNote.from_text(
    "p1", "He is 58 years old. He has glioblastoma. He takes aspirin."
)
TRIAL = build_trial(
    "NCT1",
    title="Glioblastoma study",
    conditions=["glioblastoma"],
    interventions=["temozolomide"],
    brief_summary="Phase 2 trial.",
    inclusion=["age 18 or older", "histologically confirmed glioblastoma"],
    exclusion=["pregnancy"],
)


def _prediction_json(label="included", sentences=(0,), explanation="evidence"):
    return {
        "explanation": explanation,
        "sentences": list(sentences),
        "label": label,
    }


class TestNormalizeLabel:
    def test_case_and_separator_insensitive(self):
        assert normalize_label("Not_Included", Side.INCLUSION) == "not included"
        assert normalize_label("NOT-EXCLUDED", Side.EXCLUSION) == "not excluded"
        assert normalize_label(" included ", Side.INCLUSION) == "included"

    def test_synonyms_collapse_to_no_information(self):
        assert normalize_label("no relevant information", Side.INCLUSION) == NO_INFORMATION
        assert normalize_label("not enough info", Side.EXCLUSION) == NO_INFORMATION

    def test_wrong_side_label_rejected(self):
        assert normalize_label("excluded", Side.INCLUSION) is None
        assert normalize_label("included", Side.EXCLUSION) is None

    def test_non_string_rejected(self):
        assert normalize_label(3, Side.INCLUSION) is None
        assert normalize_label(None, Side.INCLUSION) is None


class TestCriterionPrediction:
    def test_label_must_match_side(self):
        with pytest.raises(ValueError):
            CriterionPrediction(0, Side.INCLUSION, "e", frozenset(), "excluded", PARSE_OK)

    def test_failed_predictions_must_be_fallbacks(self):
        with pytest.raises(ValueError):
            CriterionPrediction(0, Side.INCLUSION, "e", frozenset(), "included", PARSE_FAILED)
        with pytest.raises(ValueError):
            CriterionPrediction(
                0, Side.INCLUSION, "", frozenset({1}), NO_INFORMATION, PARSE_FAILED
            )
        fallback = failed_prediction(0, Side.INCLUSION)
        assert fallback.label == NO_INFORMATION
        assert fallback.relevant_sentences == frozenset()

    def test_result_requires_contiguous_indices(self):
        good = failed_prediction(0, Side.INCLUSION)
        bad = failed_prediction(1, Side.INCLUSION)
        with pytest.raises(ValueError):
            TrialMatchResult("p1", "NCT1", (bad,), ())
        TrialMatchResult("p1", "NCT1", (good, bad), ())


class TestBuildMatchingPrompt:
    def test_inclusion_prompt_numbers_sentences_and_criteria(self):
        system_text, user_text = build_matching_prompt(NOTE, TRIAL, Side.INCLUSION)
        assert user_text.splitlines()[0] == (
            "Request-Id: task=matching;patient=p1;trial=NCT1;side=inclusion"
        )
        for i, sentence in enumerate(NOTE.sentences):
            assert f"{i}. {sentence}" in user_text
        assert "0. age 18 or older" in user_text
        assert "1. histologically confirmed glioblastoma" in user_text
        for label in INCLUSION_LABELS:
            assert f'"{label}"' in system_text
        assert '"excluded"' not in system_text

    def test_exclusion_prompt_uses_exclusion_vocabulary(self):
        system_text, user_text = build_matching_prompt(NOTE, TRIAL, Side.EXCLUSION)
        assert "side=exclusion" in user_text.splitlines()[0]
        assert "0. pregnancy" in user_text
        for label in EXCLUSION_LABELS:
            assert f'"{label}"' in system_text
        assert '"included"' not in system_text

    def test_background_fields_present(self):
        _, user_text = build_matching_prompt(NOTE, TRIAL, Side.INCLUSION)
        assert "Title: Glioblastoma study" in user_text
        assert "Conditions: glioblastoma" in user_text
        assert "Interventions: temozolomide" in user_text
        assert "Summary: Phase 2 trial." in user_text

    def test_deterministic(self):
        assert build_matching_prompt(NOTE, TRIAL, Side.INCLUSION) == build_matching_prompt(
            NOTE, TRIAL, Side.INCLUSION
        )

    def test_empty_side_rejected(self):
        trial = build_trial("NCT2", inclusion=["adult"])
        with pytest.raises(ValueError):
            build_matching_prompt(NOTE, trial, Side.EXCLUSION)


class TestParseMatchingResponse:
    def test_well_formed_single_criterion(self):
        text = json.dumps({"0": _prediction_json()})
        got = parse_matching_response(text, 1, Side.INCLUSION, 3)
        assert len(got) == 1
        assert got[0].label == "included"
        assert got[0].relevant_sentences == frozenset({0})
        assert got[0].parse_status == PARSE_OK

    def test_fenced_payload_marked_repaired(self):
        text = "```json\n" + json.dumps({"0": _prediction_json()}) + "\n```"
        got = parse_matching_response(text, 1, Side.INCLUSION, 3)
        assert got[0].label == "included"
        assert got[0].parse_status == PARSE_REPAIRED

    def test_refusal_text_falls_back(self):
        got = parse_matching_response("I cannot determine this.", 1, Side.INCLUSION, 3)
        assert len(got) == 1
        assert got[0].parse_status == PARSE_FAILED
        assert got[0].label == NO_INFORMATION

    def test_out_of_range_sentences_dropped_and_repaired(self):
        text = json.dumps({"0": _prediction_json(sentences=[0, 2, 7, -1])})
        got = parse_matching_response(text, 1, Side.INCLUSION, 3)
        assert got[0].relevant_sentences == frozenset({0, 2})
        assert got[0].parse_status == PARSE_REPAIRED

    def test_missing_criterion_entries_fail_individually(self):
        text = json.dumps({"0": _prediction_json()})
        got = parse_matching_response(text, 3, Side.INCLUSION, 3)
        assert [p.parse_status for p in got] == [PARSE_OK, PARSE_FAILED, PARSE_FAILED]

    def test_positional_list_payload_accepted(self):
        text = json.dumps([_prediction_json(), _prediction_json(label="not included")])
        got = parse_matching_response(text, 2, Side.INCLUSION, 3)
        assert [p.label for p in got] == ["included", "not included"]
        assert all(p.parse_status == PARSE_REPAIRED for p in got)

    def test_empty_explanation_fails_entry(self):
        text = json.dumps({"0": _prediction_json(explanation="  ")})
        got = parse_matching_response(text, 1, Side.INCLUSION, 3)
        assert got[0].parse_status == PARSE_FAILED

    def test_unknown_label_fails_entry(self):
        text = json.dumps({"0": _prediction_json(label="perhaps")})
        got = parse_matching_response(text, 1, Side.INCLUSION, 3)
        assert got[0].parse_status == PARSE_FAILED
        assert got[0].label == NO_INFORMATION

    def test_mutilated_responses_never_crash(self):
        """Arbitrary byte soup parses to the right cardinality with valid
        labels and in-range sentence ids."""
        rng = np.random.default_rng(61)
        snippets = [
            "{", "}", "[", "]", '"label"', '"included"', '"excluded"',
            '"sentences"', "[0,1,2]", "[999]", "null", "true", "3.7",
            '"explanation"', ":", ",", "I refuse.", "```", "\\u0000",
            '{"0": {"label": "included"}}', "NaN", '"0"',
        ]
        for _ in range(500):
            n = int(rng.integers(0, 12))
            text = " ".join(snippets[int(rng.integers(0, len(snippets)))] for _ in range(n))
            expected = int(rng.integers(1, 5))
            sentence_count = int(rng.integers(1, 6))
            side = Side.INCLUSION if rng.random() < 0.5 else Side.EXCLUSION
            got = parse_matching_response(text, expected, side, sentence_count)
            assert len(got) == expected
            for p in got:
                assert p.label in (
                    INCLUSION_LABELS if side is Side.INCLUSION else EXCLUSION_LABELS
                )
                assert all(0 <= s < sentence_count for s in p.relevant_sentences)


def _fixture_backend(inclusion_response=None, exclusion_response=None):
    backend = MockBackend()
    if inclusion_response is not None:
        backend.add_fixture(
            inclusion_response, fields={"task": "matching", "side": "inclusion"}
        )
    if exclusion_response is not None:
        backend.add_fixture(
            exclusion_response, fields={"task": "matching", "side": "exclusion"}
        )
    return backend


class TestMatchPair:
    def _responses(self):
        inclusion = json.dumps(
            {"0": _prediction_json(), "1": _prediction_json(sentences=[1])}
        )
        exclusion = json.dumps(
            {"0": _prediction_json(label="not excluded", sentences=[])}
        )
        return inclusion, exclusion

    def test_two_calls_three_predictions(self):
        inclusion, exclusion = self._responses()
        backend = _fixture_backend(inclusion, exclusion)
        result = match_pair(NOTE, TRIAL, LlmGateway(backend))
        assert backend.call_count == 2
        assert result.gateway_meta["calls"] == 2
        assert len(result.inclusion_predictions) == 2
        assert len(result.exclusion_predictions) == 1
        assert result.exclusion_predictions[0].label == "not excluded"

    def test_zero_criterion_side_skipped(self):
        trial = build_trial("NCT2", title="T", inclusion=["adult"])
        backend = _fixture_backend(json.dumps({"0": _prediction_json()}))
        result = match_pair(NOTE, trial, LlmGateway(backend))
        assert backend.call_count == 1
        assert result.exclusion_predictions == ()

    def test_deterministic_across_runs(self):
        inclusion, exclusion = self._responses()
        first = match_pair(NOTE, TRIAL, LlmGateway(_fixture_backend(inclusion, exclusion)))
        second = match_pair(NOTE, TRIAL, LlmGateway(_fixture_backend(inclusion, exclusion)))
        assert serialize_match_result(first) == serialize_match_result(second)

    def test_gateway_failure_tagged_with_pair(self):
        class DeadBackend:
            backend_id = "dead"
            default_model = "dead"

            def send(self, request):
                raise TransportError("socket closed")

        with pytest.raises(MatchingError) as exc_info:
            match_pair(NOTE, TRIAL, LlmGateway(DeadBackend()))
        assert exc_info.value.patient_id == "p1"
        assert exc_info.value.nct_id == "NCT1"
        assert exc_info.value.side is Side.INCLUSION

    def test_long_side_chunked_into_multiple_calls(self):
        criteria = [f"criterion number {i} with plenty of text" for i in range(8)]
        trial = build_trial("NCT3", title="T", inclusion=criteria)
        backend = MockBackend()
        backend.add_fixture(
            json.dumps({str(i): _prediction_json(sentences=[]) for i in range(4)}),
            fields={"task": "matching", "side": "inclusion"},
        )
        config = MatchingConfig(prompt_char_budget=400)
        result = match_pair(NOTE, trial, LlmGateway(backend), config)
        assert backend.call_count > 1
        assert len(result.inclusion_predictions) == 8
        assert [p.criterion_index for p in result.inclusion_predictions] == list(range(8))

    def test_reask_recovers_failures(self):
        backend = MockBackend()
        system_text, plain = build_matching_prompt(
            NOTE, build_trial("NCT4", title="T", inclusion=["adult"]), Side.INCLUSION
        )
        _, with_reminder = build_matching_prompt(
            NOTE,
            build_trial("NCT4", title="T", inclusion=["adult"]),
            Side.INCLUSION,
            reminder=True,
        )
        backend.add_fixture("garbage", user_text=plain)
        backend.add_fixture(json.dumps({"0": _prediction_json()}), user_text=with_reminder)
        trial = build_trial("NCT4", title="T", inclusion=["adult"])
        config = MatchingConfig(reask_on_failure=True)
        result = match_pair(NOTE, trial, LlmGateway(backend), config)
        assert backend.call_count == 2
        assert result.inclusion_predictions[0].label == "included"


class TestSerialization:
    def _result(self):
        inclusion, exclusion = (
            json.dumps({"0": _prediction_json(), "1": _prediction_json(sentences=[2, 1])}),
            json.dumps({"0": _prediction_json(label="excluded")}),
        )
        return match_pair(NOTE, TRIAL, LlmGateway(_fixture_backend(inclusion, exclusion)))

    def test_row_has_exactly_the_contract_keys(self):
        row = serialize_match_result(self._result())
        assert set(row) == {"patient_id", "nct_id", "inclusion", "exclusion"}
        assert set(row["inclusion"][0]) == {
            "index", "explanation", "sentences", "label", "parse_status",
        }
        assert row["inclusion"][1]["sentences"] == [1, 2]

    def test_round_trip_preserves_predictions(self):
        result = self._result()
        restored = match_result_from_row(serialize_match_result(result))
        assert serialize_match_result(restored) == serialize_match_result(result)

    def test_file_round_trip_sorted(self, tmp_path):
        result = self._result()
        other = TrialMatchResult("a-patient", "NCT0", (), ())
        path = tmp_path / "matches.jsonl"
        write_match_results(path, [result, other])
        loaded = load_match_results(path)
        assert [(r.patient_id, r.nct_id) for r in loaded] == [
            ("a-patient", "NCT0"), ("p1", "NCT1"),
        ]


class TestMatchCohort:
    def _setup(self, tmp_path):
        patients = tuple(
            PatientNote.from_text(pid, "He is 58. He has glioblastoma.")
            for pid in ("p1", "p2")
        )
        cohort = Cohort("demo", patients, ())
        trials = {
            f"NCT{i}": build_trial(
                f"NCT{i}", title=f"Trial {i}", inclusion=["adult"],
                exclusion=["pregnancy"] if i == 1 else [],
            )
            for i in range(1, 4)
        }
        backend = MockBackend()
        backend.add_fixture(
            json.dumps({"0": _prediction_json()}),
            fields={"task": "matching", "side": "inclusion"},
        )
        backend.add_fixture(
            json.dumps({"0": _prediction_json(label="not excluded")}),
            fields={"task": "matching", "side": "exclusion"},
        )
        candidates = {"p1": ["NCT1", "NCT2", "NCT3"], "p2": ["NCT1", "NCT2", "NCT3"]}
        return cohort, candidates, trials, backend, tmp_path / "matches.jsonl"

    def test_all_pairs_matched_and_sorted(self, tmp_path):
        cohort, candidates, trials, backend, out = self._setup(tmp_path)
        summary = match_cohort(cohort, candidates, trials, LlmGateway(backend), out)
        assert summary == {
            "pairs_total": 6, "completed": 6, "reused": 0, "failed": 0, "failures": [],
        }
        loaded = load_match_results(out)
        keys = [(r.patient_id, r.nct_id) for r in loaded]
        assert keys == sorted(keys)
        assert len(keys) == 6

    def test_resume_skips_existing_pairs(self, tmp_path):
        cohort, candidates, trials, backend, out = self._setup(tmp_path)
        partial = {"p1": candidates["p1"], "p2": ["NCT1"]}
        match_cohort(cohort, partial, trials, LlmGateway(backend), out)
        calls_before = backend.call_count
        summary = match_cohort(cohort, candidates, trials, LlmGateway(backend), out)
        assert summary["reused"] == 4
        assert summary["completed"] == 6
        # Only p2/NCT2 (one side) and p2/NCT3 (one side) remain: 2 calls.
        assert backend.call_count - calls_before == 2

    def test_unknown_candidate_trial_rejected(self, tmp_path):
        cohort, candidates, trials, backend, out = self._setup(tmp_path)
        candidates["p1"] = ["NCT999"]
        with pytest.raises(MatchingError, match="NCT999"):
            match_cohort(cohort, candidates, trials, LlmGateway(backend), out)

    def test_failing_pair_recorded_not_raised(self, tmp_path):
        cohort, candidates, trials, backend, out = self._setup(tmp_path)

        class FlakyGateway(LlmGateway):
            def complete(self, request):
                if "patient=p2;trial=NCT3" in request.user_text:
                    raise TransportError("permanent outage")
                return super().complete(request)

        summary = match_cohort(
            cohort, candidates, trials, FlakyGateway(backend), out
        )
        assert summary["completed"] == 5
        assert summary["failed"] == 1
        assert summary["failures"][0]["patient_id"] == "p2"
        assert summary["failures"][0]["nct_id"] == "NCT3"
        assert len(load_match_results(out)) == 5
