"""Criterion-level eligibility matching.

For each retrieved patient-trial pair the matcher issues at most one chat
call per criterion side (inclusion, exclusion), asking for a JSON object
keyed by criterion number whose entries carry an explanation, the ids of
supporting note sentences, and an eligibility label. Responses are parsed
defensively: any malformed piece degrades to a conservative fallback
prediction instead of crashing the run.
"""
from __future__ import annotations

import json
import logging
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .corpus import Cohort, PatientNote, Side, TrialRecord
from .gateway import ChatRequest, GatewayError, LlmGateway, format_request_header
from .parsing import coerce_int, extract_json

log = logging.getLogger(__name__)

INCLUDED = "included"
NOT_INCLUDED = "not included"
EXCLUDED = "excluded"
NOT_EXCLUDED = "not excluded"
NO_INFORMATION = "not enough information"
NOT_APPLICABLE = "not applicable"

INCLUSION_LABELS = (INCLUDED, NOT_INCLUDED, NO_INFORMATION, NOT_APPLICABLE)
EXCLUSION_LABELS = (EXCLUDED, NOT_EXCLUDED, NO_INFORMATION, NOT_APPLICABLE)
LABELS_BY_SIDE: Mapping[Side, frozenset[str]] = {
    Side.INCLUSION: frozenset(INCLUSION_LABELS),
    Side.EXCLUSION: frozenset(EXCLUSION_LABELS),
}

_LABEL_SYNONYMS = {
    "no relevant information": NO_INFORMATION,
    "not enough info": NO_INFORMATION,
}

PARSE_OK = "ok"
PARSE_REPAIRED = "repaired"
PARSE_FAILED = "failed"


class MatchingError(Exception):
    """A matching call that could not complete, tagged with its pair."""

    def __init__(self, message: str, patient_id: str, nct_id: str, side: Side) -> None:
        super().__init__(message)
        self.patient_id = patient_id
        self.nct_id = nct_id
        self.side = side


def normalize_label(raw: object, side: Side) -> str | None:
    """Map free-form label text onto the side's vocabulary, or None."""
    if not isinstance(raw, str):
        return None
    text = re.sub(r"[\s_\-]+", " ", raw.strip().lower())
    text = _LABEL_SYNONYMS.get(text, text)
    return text if text in LABELS_BY_SIDE[side] else None


@dataclass(frozen=True, slots=True)
class CriterionPrediction:
    """Model output for one criterion of one patient-trial pair."""

    criterion_index: int
    side: Side
    explanation: str
    relevant_sentences: frozenset[int]
    label: str
    parse_status: str

    def __post_init__(self) -> None:
        if self.label not in LABELS_BY_SIDE[self.side]:
            raise ValueError(
                f"label {self.label!r} is not valid for side {self.side.value}"
            )
        if self.parse_status not in (PARSE_OK, PARSE_REPAIRED, PARSE_FAILED):
            raise ValueError(f"unknown parse_status {self.parse_status!r}")
        if self.parse_status == PARSE_FAILED:
            if self.label != NO_INFORMATION or self.relevant_sentences:
                raise ValueError("failed predictions must be conservative fallbacks")

    def reindexed(self, criterion_index: int) -> "CriterionPrediction":
        return CriterionPrediction(
            criterion_index,
            self.side,
            self.explanation,
            self.relevant_sentences,
            self.label,
            self.parse_status,
        )


def failed_prediction(criterion_index: int, side: Side) -> CriterionPrediction:
    return CriterionPrediction(
        criterion_index=criterion_index,
        side=side,
        explanation="",
        relevant_sentences=frozenset(),
        label=NO_INFORMATION,
        parse_status=PARSE_FAILED,
    )


@dataclass(frozen=True, slots=True)
class TrialMatchResult:
    """All criterion predictions for one patient-trial pair."""

    patient_id: str
    nct_id: str
    inclusion_predictions: tuple[CriterionPrediction, ...]
    exclusion_predictions: tuple[CriterionPrediction, ...]
    gateway_meta: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for side, predictions in (
            (Side.INCLUSION, self.inclusion_predictions),
            (Side.EXCLUSION, self.exclusion_predictions),
        ):
            for position, prediction in enumerate(predictions):
                if prediction.side is not side or prediction.criterion_index != position:
                    raise ValueError(
                        f"{self.patient_id}/{self.nct_id}: predictions for "
                        f"{side.value} are not contiguously indexed"
                    )

    def predictions_for(self, side: Side) -> tuple[CriterionPrediction, ...]:
        return (
            self.inclusion_predictions
            if side is Side.INCLUSION
            else self.exclusion_predictions
        )


@dataclass(slots=True)
class MatchingConfig:
    model: str | None = None
    max_output_tokens: int = 2048
    prompt_char_budget: int = 24000
    reask_on_failure: bool = False


_SIDE_TASK = {
    Side.INCLUSION: (
        "inclusion",
        INCLUSION_LABELS,
        'Use "included" when the patient meets the criterion, "not included" '
        'when the patient clearly fails it, "not enough information" when the '
        'note cannot settle it, and "not applicable" when the criterion does '
        "not apply to this patient.",
    ),
    Side.EXCLUSION: (
        "exclusion",
        EXCLUSION_LABELS,
        'Use "excluded" when the criterion disqualifies the patient, '
        '"not excluded" when the patient clearly does not trigger it, '
        '"not enough information" when the note cannot settle it, and '
        '"not applicable" when the criterion does not apply.',
    ),
}


def build_matching_prompt(
    note: PatientNote,
    trial: TrialRecord,
    side: Side,
    criteria_texts: Sequence[str] | None = None,
    chunk_index: int | None = None,
    reminder: bool = False,
) -> tuple[str, str]:
    """Compose the system/user texts for one side of one pair.

    Sentences and criteria are numbered from 0; the response schema keys
    predictions by criterion number. ``criteria_texts`` overrides the
    trial's own list when a long side is split into chunks (numbering is
    then relative to the chunk).
    """
    if criteria_texts is None:
        criteria_texts = [c.text for c in trial.criteria_for(side)]
    if not criteria_texts:
        raise ValueError(f"trial {trial.nct_id} has no {side.value} criteria")
    side_name, labels, label_help = _SIDE_TASK[side]
    system_text = (
        "You assess clinical trial eligibility criteria against a patient "
        f"note. For every numbered {side_name} criterion, explain the "
        "relevant evidence, list the ids of note sentences that support your "
        "reasoning, and assign one label from: "
        + ", ".join(f'"{label}"' for label in labels)
        + ". "
        + label_help
        + " Respond with a single JSON object mapping each criterion number "
        'to {"explanation": "...", "sentences": [..], "label": "..."}. '
        "Cover every criterion number exactly once and output nothing else."
    )
    header_fields: dict[str, object] = {
        "task": "matching",
        "patient": note.patient_id,
        "trial": trial.nct_id,
        "side": side.value,
    }
    if chunk_index is not None:
        header_fields["chunk"] = chunk_index
    lines = [format_request_header(**header_fields), "", "Patient note sentences:"]
    lines.extend(f"{i}. {sentence}" for i, sentence in enumerate(note.sentences))
    background = [f"Title: {trial.title}"]
    if trial.conditions:
        background.append("Conditions: " + "; ".join(trial.conditions))
    if trial.interventions:
        background.append("Interventions: " + "; ".join(trial.interventions))
    if trial.brief_summary:
        background.append(f"Summary: {trial.brief_summary}")
    lines += ["", "Trial background:"] + background
    lines += ["", f"{side_name.capitalize()} criteria:"]
    lines.extend(f"{i}. {text}" for i, text in enumerate(criteria_texts))
    if reminder:
        lines += ["", "Return only the JSON object described above."]
    return system_text, "\n".join(lines) + "\n"


def _entry_for(payload: object, index: int) -> object:
    if isinstance(payload, dict):
        if str(index) in payload:
            return payload[str(index)]
        return payload.get(index)
    return None


def _parse_sentences(raw: object, sentence_count: int) -> tuple[frozenset[int], bool]:
    if raw is None:
        return frozenset(), True
    if not isinstance(raw, (list, tuple)):
        return frozenset(), True
    kept: set[int] = set()
    repaired = False
    for item in raw:
        value = coerce_int(item)
        if value is None:
            repaired = True
            continue
        if not isinstance(item, int) or isinstance(item, bool):
            repaired = True
        if 0 <= value < sentence_count:
            kept.add(value)
        else:
            repaired = True
    return frozenset(kept), repaired


def parse_matching_response(
    text: str, expected: int, side: Side, sentence_count: int
) -> list[CriterionPrediction]:
    """Parse one side's response into exactly ``expected`` predictions.

    Criteria whose entries are missing or unusable fall back to
    ("not enough information", no sentences, empty explanation) with
    parse_status="failed"; recoverable deviations (wrapped JSON, dropped
    sentence ids, positional lists) are marked "repaired". Never raises on
    response content.
    """
    payload, globally_repaired = extract_json(text)
    if isinstance(payload, list):
        payload = {str(i): entry for i, entry in enumerate(payload)}
        globally_repaired = True
    predictions: list[CriterionPrediction] = []
    for index in range(expected):
        entry = _entry_for(payload, index)
        if not isinstance(entry, dict):
            predictions.append(failed_prediction(index, side))
            continue
        label = normalize_label(entry.get("label"), side)
        explanation = entry.get("explanation")
        explanation = explanation.strip() if isinstance(explanation, str) else ""
        if label is None or not explanation:
            predictions.append(failed_prediction(index, side))
            continue
        sentences, sentences_repaired = _parse_sentences(
            entry.get("sentences"), sentence_count
        )
        status = (
            PARSE_REPAIRED if globally_repaired or sentences_repaired else PARSE_OK
        )
        predictions.append(
            CriterionPrediction(
                criterion_index=index,
                side=side,
                explanation=explanation,
                relevant_sentences=sentences,
                label=label,
                parse_status=status,
            )
        )
    return predictions


def _failure_count(predictions: Sequence[CriterionPrediction]) -> int:
    return sum(1 for p in predictions if p.parse_status == PARSE_FAILED)


def _split_chunks(
    note: PatientNote,
    trial: TrialRecord,
    side: Side,
    texts: list[str],
    budget: int,
) -> list[list[str]]:
    """Split a criterion list until each chunk's prompt fits the budget."""
    _, user_text = build_matching_prompt(note, trial, side, texts, chunk_index=0)
    if len(user_text) <= budget or len(texts) == 1:
        return [texts]
    middle = len(texts) // 2
    return _split_chunks(note, trial, side, texts[:middle], budget) + _split_chunks(
        note, trial, side, texts[middle:], budget
    )


def _match_side(
    note: PatientNote,
    trial: TrialRecord,
    side: Side,
    gateway: LlmGateway,
    config: MatchingConfig,
) -> tuple[tuple[CriterionPrediction, ...], int]:
    texts = [c.text for c in trial.criteria_for(side)]
    if not texts:
        return (), 0
    chunks = _split_chunks(note, trial, side, texts, config.prompt_char_budget)
    chunked = len(chunks) > 1
    predictions: list[CriterionPrediction] = []
    calls = 0
    offset = 0
    for chunk_position, chunk in enumerate(chunks):
        parsed, used = _ask_side(
            note, trial, side, chunk, gateway, config,
            chunk_index=chunk_position if chunked else None,
        )
        calls += used
        predictions.extend(p.reindexed(offset + p.criterion_index) for p in parsed)
        offset += len(chunk)
    return tuple(predictions), calls


def _ask_side(
    note: PatientNote,
    trial: TrialRecord,
    side: Side,
    chunk: list[str],
    gateway: LlmGateway,
    config: MatchingConfig,
    chunk_index: int | None,
) -> tuple[list[CriterionPrediction], int]:
    def call(reminder: bool) -> list[CriterionPrediction]:
        system_text, user_text = build_matching_prompt(
            note, trial, side,
            criteria_texts=chunk, chunk_index=chunk_index, reminder=reminder,
        )
        try:
            response = gateway.complete(
                ChatRequest(
                    model=config.model or gateway.default_model,
                    system_text=system_text,
                    user_text=user_text,
                    max_output_tokens=config.max_output_tokens,
                )
            )
        except GatewayError as exc:
            raise MatchingError(
                f"matching call failed for patient={note.patient_id} "
                f"trial={trial.nct_id} side={side.value}: {exc}",
                note.patient_id,
                trial.nct_id,
                side,
            ) from exc
        return parse_matching_response(
            response.text, len(chunk), side, len(note.sentences)
        )

    predictions = call(reminder=False)
    calls = 1
    if config.reask_on_failure and _failure_count(predictions):
        retried = call(reminder=True)
        calls += 1
        if _failure_count(retried) < _failure_count(predictions):
            predictions = retried
    return predictions, calls


def match_pair(
    note: PatientNote,
    trial: TrialRecord,
    gateway: LlmGateway,
    config: MatchingConfig | None = None,
) -> TrialMatchResult:
    """Predict every criterion of one pair; a side with no criteria is skipped."""
    config = config or MatchingConfig()
    inclusion, inclusion_calls = _match_side(
        note, trial, Side.INCLUSION, gateway, config
    )
    exclusion, exclusion_calls = _match_side(
        note, trial, Side.EXCLUSION, gateway, config
    )
    return TrialMatchResult(
        patient_id=note.patient_id,
        nct_id=trial.nct_id,
        inclusion_predictions=inclusion,
        exclusion_predictions=exclusion,
        gateway_meta={
            "backend_id": gateway.backend.backend_id,
            "calls": inclusion_calls + exclusion_calls,
        },
    )


def serialize_match_result(result: TrialMatchResult) -> dict:
    def side_rows(predictions: tuple[CriterionPrediction, ...]) -> list[dict]:
        return [
            {
                "index": p.criterion_index,
                "explanation": p.explanation,
                "sentences": sorted(p.relevant_sentences),
                "label": p.label,
                "parse_status": p.parse_status,
            }
            for p in predictions
        ]

    return {
        "patient_id": result.patient_id,
        "nct_id": result.nct_id,
        "inclusion": side_rows(result.inclusion_predictions),
        "exclusion": side_rows(result.exclusion_predictions),
    }


def match_result_from_row(row: Mapping) -> TrialMatchResult:
    def side_predictions(
        rows: Sequence[Mapping], side: Side
    ) -> tuple[CriterionPrediction, ...]:
        return tuple(
            CriterionPrediction(
                criterion_index=int(r["index"]),
                side=side,
                explanation=str(r.get("explanation", "")),
                relevant_sentences=frozenset(int(s) for s in r.get("sentences", [])),
                label=str(r["label"]),
                parse_status=str(r.get("parse_status", PARSE_OK)),
            )
            for r in rows
        )

    return TrialMatchResult(
        patient_id=str(row["patient_id"]),
        nct_id=str(row["nct_id"]),
        inclusion_predictions=side_predictions(row.get("inclusion", ()), Side.INCLUSION),
        exclusion_predictions=side_predictions(row.get("exclusion", ()), Side.EXCLUSION),
    )


def load_match_results(path: str | Path) -> list[TrialMatchResult]:
    results: list[TrialMatchResult] = []
    with Path(path).open(encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                results.append(match_result_from_row(json.loads(line)))
    return results


def write_match_results(path: str | Path, results: Sequence[TrialMatchResult]) -> None:
    """Write matches as JSONL sorted by (patient_id, nct_id), atomically."""
    path = Path(path)
    ordered = sorted(results, key=lambda r: (r.patient_id, r.nct_id))
    temp = path.with_suffix(path.suffix + ".tmp")
    with temp.open("w", encoding="utf-8") as handle:
        for result in ordered:
            handle.write(
                json.dumps(
                    serialize_match_result(result),
                    sort_keys=True,
                    separators=(",", ":"),
                )
                + "\n"
            )
    temp.replace(path)


def match_cohort(
    cohort: Cohort,
    candidates: Mapping[str, Sequence[str]],
    trials_by_id: Mapping[str, TrialRecord],
    gateway: LlmGateway,
    out_path: str | Path,
    parallelism: int = 4,
    config: MatchingConfig | None = None,
) -> dict:
    """Match every (patient, candidate trial) pair, resumably.

    Pairs already present in ``out_path`` are not re-sent; new results are
    merged in and the file is rewritten sorted by (patient_id, nct_id).
    Per-pair failures are recorded in the summary, not raised.
    """
    config = config or MatchingConfig()
    out_path = Path(out_path)
    done: dict[tuple[str, str], TrialMatchResult] = {}
    if out_path.exists():
        for result in load_match_results(out_path):
            done[(result.patient_id, result.nct_id)] = result
    pairs: list[tuple[str, str]] = []
    for patient_id in cohort.patient_ids():
        for nct_id in candidates.get(patient_id, ()):
            if nct_id not in trials_by_id:
                raise MatchingError(
                    f"candidate trial {nct_id} is not in the corpus",
                    patient_id,
                    nct_id,
                    Side.INCLUSION,
                )
            pairs.append((patient_id, nct_id))
    pending = [pair for pair in pairs if pair not in done]
    failures: list[dict] = []
    failure_lock = threading.Lock()

    def run_pair(pair: tuple[str, str]) -> TrialMatchResult | None:
        patient_id, nct_id = pair
        try:
            return match_pair(
                cohort.patient(patient_id), trials_by_id[nct_id], gateway, config
            )
        except MatchingError as exc:
            with failure_lock:
                failures.append(
                    {"patient_id": patient_id, "nct_id": nct_id, "error": str(exc)}
                )
            return None

    if pending:
        with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
            for result in pool.map(run_pair, pending):
                if result is not None:
                    done[(result.patient_id, result.nct_id)] = result
    write_match_results(out_path, list(done.values()))
    failures.sort(key=lambda f: (f["patient_id"], f["nct_id"]))
    return {
        "pairs_total": len(pairs),
        "completed": sum(1 for pair in pairs if pair in done),
        "reused": len(pairs) - len(pending),
        "failed": len(failures),
        "failures": failures,
    }
