"""Trial-level scoring and ranking on top of criterion predictions.

Three score families are produced per pair: percentage aggregates counted
directly from criterion labels, a model-generated (relevance, eligibility)
pair with hard range guarantees, and a combination of both that drives the
default ranking. Simpler baseline scorers over externally supplied vectors
or entailment labels live here too.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import PatientNote, Side, TrialRecord
from .gateway import ChatRequest, LlmGateway, format_request_header
from .matching import (
    EXCLUDED,
    INCLUDED,
    NOT_APPLICABLE,
    NOT_EXCLUDED,
    NOT_INCLUDED,
    NO_INFORMATION,
    TrialMatchResult,
)
from .parsing import coerce_number, extract_json


class RankingError(ValueError):
    """Invalid ranking inputs (mixed patients, unknown features, bad files)."""


@dataclass(frozen=True, slots=True)
class LinearAggregates:
    """Label percentages per side, over criteria that actually applied.

    The denominators are the criterion counts minus the "not applicable"
    predictions; when a side has no applicable criteria all three of its
    percentages are zero.
    """

    pct_met_inclusion: float
    pct_unmet_inclusion: float
    pct_noinfo_inclusion: float
    pct_met_exclusion: float
    pct_unmet_exclusion: float
    pct_noinfo_exclusion: float
    m_effective: int
    n_effective: int


def linear_from_labels(
    inclusion_labels: Sequence[str], exclusion_labels: Sequence[str]
) -> LinearAggregates:
    """Count labels into percentage aggregates; the parser's conservative
    fallbacks arrive here as "not enough information" and count as such."""

    def side_pcts(labels: Sequence[str], met: str, unmet: str) -> tuple[float, float, float, int]:
        applicable = [label for label in labels if label != NOT_APPLICABLE]
        effective = len(applicable)
        if effective == 0:
            return 0.0, 0.0, 0.0, 0
        met_n = sum(1 for label in applicable if label == met)
        unmet_n = sum(1 for label in applicable if label == unmet)
        noinfo_n = effective - met_n - unmet_n
        return met_n / effective, unmet_n / effective, noinfo_n / effective, effective

    met_i, unmet_i, noinfo_i, m_eff = side_pcts(inclusion_labels, INCLUDED, NOT_INCLUDED)
    met_e, unmet_e, noinfo_e, n_eff = side_pcts(exclusion_labels, EXCLUDED, NOT_EXCLUDED)
    return LinearAggregates(
        pct_met_inclusion=met_i,
        pct_unmet_inclusion=unmet_i,
        pct_noinfo_inclusion=noinfo_i,
        pct_met_exclusion=met_e,
        pct_unmet_exclusion=unmet_e,
        pct_noinfo_exclusion=noinfo_e,
        m_effective=m_eff,
        n_effective=n_eff,
    )


def linear_aggregate(result: TrialMatchResult) -> LinearAggregates:
    return linear_from_labels(
        [p.label for p in result.inclusion_predictions],
        [p.label for p in result.exclusion_predictions],
    )


RELEVANCE_MAX = 100.0


@dataclass(frozen=True, slots=True)
class LlmAggregates:
    """Model-assigned trial-level scores with enforced ranges.

    relevance is clamped to [0, 100] first, then eligibility to
    [-relevance, relevance]; anything unparseable degrades to (0, 0) with
    the clamped flag set.
    """

    relevance: float
    eligibility: float
    raw_response: str = ""
    clamped: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.relevance <= RELEVANCE_MAX:
            raise ValueError(f"relevance {self.relevance} outside [0, {RELEVANCE_MAX}]")
        if not -self.relevance <= self.eligibility <= self.relevance:
            raise ValueError(
                f"eligibility {self.eligibility} outside "
                f"[-{self.relevance}, {self.relevance}]"
            )


AGGREGATION_SYSTEM_TEXT = (
    "You summarize criterion-level eligibility findings into two trial-level "
    "scores. relevance_score_R is a number from 0 to 100: 0 means the trial "
    "is completely irrelevant to the patient, 100 means it targets the "
    "patient's condition exactly. eligibility_score_S is a number from "
    "-relevance_score_R to relevance_score_R: the negative end means the "
    "patient is firmly disqualified, 0 means neutral or undecidable, and the "
    "positive end means the patient clearly qualifies. Respond with a single "
    'JSON object {"relevance_score_R": <number>, "eligibility_score_S": '
    "<number>} and nothing else."
)


def build_aggregation_prompt(
    note: PatientNote, trial: TrialRecord, result: TrialMatchResult
) -> tuple[str, str]:
    header = format_request_header(
        task="aggregation", patient=note.patient_id, trial=trial.nct_id
    )
    lines = [header, "", "Patient note:", note.raw_text, "", "Trial:"]
    lines.append(f"Title: {trial.title}")
    if trial.conditions:
        lines.append("Conditions: " + "; ".join(trial.conditions))
    if trial.brief_summary:
        lines.append(f"Summary: {trial.brief_summary}")
    for side, predictions in (
        (Side.INCLUSION, result.inclusion_predictions),
        (Side.EXCLUSION, result.exclusion_predictions),
    ):
        lines += ["", f"{side.value.capitalize()} criterion findings:"]
        if not predictions:
            lines.append("(none)")
        criteria = trial.criteria_for(side)
        for prediction in predictions:
            text = criteria[prediction.criterion_index].text
            detail = f" ({prediction.explanation})" if prediction.explanation else ""
            lines.append(f"{prediction.criterion_index}. [{prediction.label}] {text}{detail}")
    return AGGREGATION_SYSTEM_TEXT, "\n".join(lines) + "\n"


_RELEVANCE_KEYS = ("relevance_score_R", "relevance_score", "relevance", "R")
_ELIGIBILITY_KEYS = ("eligibility_score_S", "eligibility_score", "eligibility", "S")


def parse_aggregation_scores(text: str) -> tuple[float, float] | None:
    """Pull (relevance, eligibility) out of a response; None when hopeless."""
    payload, _repaired = extract_json(text)
    if not isinstance(payload, dict):
        return None

    def first_number(keys: Sequence[str]) -> float | None:
        for key in keys:
            if key in payload:
                return coerce_number(payload[key])
        return None

    relevance = first_number(_RELEVANCE_KEYS)
    eligibility = first_number(_ELIGIBILITY_KEYS)
    if relevance is None or eligibility is None:
        return None
    return relevance, eligibility


def clamp_aggregates(relevance: float, eligibility: float, raw_response: str = "") -> LlmAggregates:
    """Clamp relevance into [0, 100], then eligibility into [-R, R]."""
    clamped_relevance = min(RELEVANCE_MAX, max(0.0, relevance))
    clamped_eligibility = min(clamped_relevance, max(-clamped_relevance, eligibility))
    return LlmAggregates(
        relevance=clamped_relevance,
        eligibility=clamped_eligibility,
        raw_response=raw_response,
        clamped=(clamped_relevance != relevance or clamped_eligibility != eligibility),
    )


def llm_aggregate(
    note: PatientNote,
    trial: TrialRecord,
    result: TrialMatchResult,
    gateway: LlmGateway,
    model: str | None = None,
    max_output_tokens: int = 256,
) -> LlmAggregates:
    """One aggregation call per pair; malformed output degrades to (0, 0)."""
    system_text, user_text = build_aggregation_prompt(note, trial, result)
    response = gateway.complete(
        ChatRequest(
            model=model or gateway.default_model,
            system_text=system_text,
            user_text=user_text,
            max_output_tokens=max_output_tokens,
        )
    )
    scores = parse_aggregation_scores(response.text)
    if scores is None:
        return LlmAggregates(
            relevance=0.0, eligibility=0.0, raw_response=response.text, clamped=True
        )
    return clamp_aggregates(*scores, raw_response=response.text)


def combine(linear: LinearAggregates, llm: LlmAggregates) -> tuple[float, float]:
    """Fold both score families into (combined_ranking, exclusion_score).

    combined = pct met inclusion, minus a unit penalty when any inclusion
    criterion is unmet, minus a unit penalty when any exclusion criterion is
    met, plus relevance/100 plus eligibility/100. The exclusion score is its
    negation, so a high value flags a likely-excluded pair.
    """
    combined = (
        linear.pct_met_inclusion
        - (1.0 if linear.pct_unmet_inclusion > 0.0 else 0.0)
        - (1.0 if linear.pct_met_exclusion > 0.0 else 0.0)
        + llm.relevance / 100.0
        + llm.eligibility / 100.0
    )
    return combined, -combined


@dataclass(frozen=True, slots=True)
class TrialScore:
    """Every trial-level score for one pair, ready for ranking."""

    patient_id: str
    nct_id: str
    linear: LinearAggregates
    llm: LlmAggregates
    combined_ranking: float
    exclusion_score: float

    @classmethod
    def from_parts(
        cls,
        patient_id: str,
        nct_id: str,
        linear: LinearAggregates,
        llm: LlmAggregates,
    ) -> "TrialScore":
        combined, exclusion = combine(linear, llm)
        return cls(patient_id, nct_id, linear, llm, combined, exclusion)


def score_pair(
    note: PatientNote,
    trial: TrialRecord,
    result: TrialMatchResult,
    gateway: LlmGateway,
    model: str | None = None,
) -> TrialScore:
    linear = linear_aggregate(result)
    llm = llm_aggregate(note, trial, result, gateway, model=model)
    return TrialScore.from_parts(note.patient_id, trial.nct_id, linear, llm)


# feature name -> (attribute, sign); attributes resolve against the linear
# aggregates, then the model aggregates, then the score itself.
RANKING_FEATURES: Mapping[str, tuple[str, float]] = {
    "met_inc": ("pct_met_inclusion", 1.0),
    "not_inc": ("pct_unmet_inclusion", -1.0),
    "excl": ("pct_met_exclusion", -1.0),
    "not_excl": ("pct_unmet_exclusion", 1.0),
    "relevance": ("relevance", 1.0),
    "eligibility": ("eligibility", 1.0),
    "combination": ("combined_ranking", 1.0),
}


def feature_value(score: TrialScore, feature: str) -> float:
    """Signed sort key for one feature; higher always means ranked earlier."""
    try:
        attribute, sign = RANKING_FEATURES[feature]
    except KeyError:
        raise RankingError(
            f"unknown ranking feature {feature!r}; expected one of "
            + ", ".join(sorted(RANKING_FEATURES))
        ) from None
    for holder in (score.linear, score.llm, score):
        if hasattr(holder, attribute):
            return sign * float(getattr(holder, attribute))
    raise RankingError(f"feature {feature!r} resolved to no attribute")


def rank_trials(scores: Sequence[TrialScore], feature: str = "combination") -> list[str]:
    """Order one patient's trials by a feature, best first.

    Ties break by nct_id ascending. Mixing patients is an error.
    """
    patients = {score.patient_id for score in scores}
    if len(patients) > 1:
        raise RankingError(f"rank_trials got scores for {len(patients)} patients")
    ordered = sorted(
        scores, key=lambda score: (-feature_value(score, feature), score.nct_id)
    )
    return [score.nct_id for score in ordered]


@dataclass(frozen=True, slots=True)
class BaselineCriterionVectors:
    """Precomputed encoder vectors for one pair: note plus each criterion."""

    patient_vector: np.ndarray
    inclusion_vectors: tuple[np.ndarray, ...]
    exclusion_vectors: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        dim = self.patient_vector.shape
        if len(dim) != 1:
            raise RankingError("patient_vector must be 1-D")
        for vector in (*self.inclusion_vectors, *self.exclusion_vectors):
            if vector.shape != dim:
                raise RankingError("criterion vector dimensions differ from patient")


def baseline_dual_encoder_scores(
    vectors: BaselineCriterionVectors,
) -> tuple[float, float]:
    """(ranking, excluding) scores from mean inner products per side.

    ranking = mean similarity to inclusion criteria minus mean similarity to
    exclusion criteria; excluding = the exclusion mean alone. A side with no
    criteria contributes zero.
    """

    def mean_similarity(criterion_vectors: tuple[np.ndarray, ...]) -> float:
        if not criterion_vectors:
            return 0.0
        sims = [float(vectors.patient_vector @ v) for v in criterion_vectors]
        return sum(sims) / len(sims)

    inclusion_mean = mean_similarity(vectors.inclusion_vectors)
    exclusion_mean = mean_similarity(vectors.exclusion_vectors)
    return inclusion_mean - exclusion_mean, exclusion_mean


NLI_ENTAILMENT = "entailment"
NLI_CONTRADICTION = "contradiction"
NLI_NEUTRAL = "neutral"


def baseline_label_map(nli_label: str, side: Side) -> str:
    """Map an entailment-classifier label onto the side's vocabulary."""
    mapping = {
        NLI_ENTAILMENT: INCLUDED if side is Side.INCLUSION else EXCLUDED,
        NLI_CONTRADICTION: NOT_INCLUDED if side is Side.INCLUSION else NOT_EXCLUDED,
        NLI_NEUTRAL: NO_INFORMATION,
    }
    try:
        return mapping[nli_label]
    except KeyError:
        raise RankingError(f"unknown entailment label {nli_label!r}") from None


def baseline_combination(linear: LinearAggregates) -> tuple[float, float]:
    """(ranking, excluding) scores from percentages alone.

    ranking = met inclusion - unmet inclusion - met exclusion
    + unmet exclusion; excluding = a unit per violated side (any unmet
    inclusion, any met exclusion) minus met inclusion.
    """
    ranking = (
        linear.pct_met_inclusion
        - linear.pct_unmet_inclusion
        - linear.pct_met_exclusion
        + linear.pct_unmet_exclusion
    )
    excluding = (
        (1.0 if linear.pct_unmet_inclusion > 0.0 else 0.0)
        + (1.0 if linear.pct_met_exclusion > 0.0 else 0.0)
        - linear.pct_met_inclusion
    )
    return ranking, excluding


def _vector(raw: object, where: str) -> np.ndarray:
    vector = np.asarray(raw, dtype=np.float64)
    if vector.ndim != 1 or vector.size == 0:
        raise RankingError(f"{where}: vector must be a non-empty flat list")
    if not np.all(np.isfinite(vector)):
        raise RankingError(f"{where}: vector has non-finite values")
    return vector


def load_baseline_vectors(
    path: str | Path,
) -> dict[tuple[str, str], BaselineCriterionVectors]:
    """Load per-pair encoder vectors from JSONL rows
    {"patient_id", "nct_id", "patient_vector", "inclusion_vectors",
    "exclusion_vectors"}."""
    path = Path(path)
    out: dict[tuple[str, str], BaselineCriterionVectors] = {}
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, 1):
            if not line.strip():
                continue
            where = f"{path.name}:{lineno}"
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RankingError(f"{where}: invalid JSON ({exc.msg})") from exc
            key = (str(row.get("patient_id")), str(row.get("nct_id")))
            out[key] = BaselineCriterionVectors(
                patient_vector=_vector(row.get("patient_vector"), where),
                inclusion_vectors=tuple(
                    _vector(v, where) for v in row.get("inclusion_vectors", ())
                ),
                exclusion_vectors=tuple(
                    _vector(v, where) for v in row.get("exclusion_vectors", ())
                ),
            )
    return out


def load_baseline_nli_labels(
    path: str | Path,
) -> dict[tuple[str, str], tuple[list[str], list[str]]]:
    """Load per-pair entailment labels from JSONL rows
    {"patient_id", "nct_id", "inclusion_labels", "exclusion_labels"},
    already mapped onto the criterion vocabulary per side."""
    path = Path(path)
    valid = {NLI_ENTAILMENT, NLI_CONTRADICTION, NLI_NEUTRAL}
    out: dict[tuple[str, str], tuple[list[str], list[str]]] = {}
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, 1):
            if not line.strip():
                continue
            where = f"{path.name}:{lineno}"
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RankingError(f"{where}: invalid JSON ({exc.msg})") from exc
            for field in ("inclusion_labels", "exclusion_labels"):
                for label in row.get(field, ()):
                    if label not in valid:
                        raise RankingError(f"{where}: unknown entailment label {label!r}")
            key = (str(row.get("patient_id")), str(row.get("nct_id")))
            out[key] = (
                [baseline_label_map(l, Side.INCLUSION) for l in row.get("inclusion_labels", ())],
                [baseline_label_map(l, Side.EXCLUSION) for l in row.get("exclusion_labels", ())],
            )
    return out


def serialize_trial_score(score: TrialScore) -> dict:
    return {
        "patient_id": score.patient_id,
        "nct_id": score.nct_id,
        "pct_met_inclusion": score.linear.pct_met_inclusion,
        "pct_unmet_inclusion": score.linear.pct_unmet_inclusion,
        "pct_noinfo_inclusion": score.linear.pct_noinfo_inclusion,
        "pct_met_exclusion": score.linear.pct_met_exclusion,
        "pct_unmet_exclusion": score.linear.pct_unmet_exclusion,
        "pct_noinfo_exclusion": score.linear.pct_noinfo_exclusion,
        "relevance": score.llm.relevance,
        "eligibility": score.llm.eligibility,
        "combined_ranking": score.combined_ranking,
        "exclusion_score": score.exclusion_score,
    }


def trial_score_from_row(row: Mapping) -> TrialScore:
    linear = LinearAggregates(
        pct_met_inclusion=float(row["pct_met_inclusion"]),
        pct_unmet_inclusion=float(row["pct_unmet_inclusion"]),
        pct_noinfo_inclusion=float(row["pct_noinfo_inclusion"]),
        pct_met_exclusion=float(row["pct_met_exclusion"]),
        pct_unmet_exclusion=float(row["pct_unmet_exclusion"]),
        pct_noinfo_exclusion=float(row["pct_noinfo_exclusion"]),
        m_effective=int(row.get("m_effective", 0)),
        n_effective=int(row.get("n_effective", 0)),
    )
    llm = LlmAggregates(
        relevance=float(row["relevance"]), eligibility=float(row["eligibility"])
    )
    return TrialScore(
        patient_id=str(row["patient_id"]),
        nct_id=str(row["nct_id"]),
        linear=linear,
        llm=llm,
        combined_ranking=float(row["combined_ranking"]),
        exclusion_score=float(row["exclusion_score"]),
    )


def load_trial_scores(path: str | Path) -> list[TrialScore]:
    scores: list[TrialScore] = []
    with Path(path).open(encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                scores.append(trial_score_from_row(json.loads(line)))
    return scores


def write_trial_scores(path: str | Path, scores: Sequence[TrialScore]) -> None:
    """Write scores as JSONL sorted by (patient_id, nct_id), atomically."""
    path = Path(path)
    ordered = sorted(scores, key=lambda s: (s.patient_id, s.nct_id))
    temp = path.with_suffix(path.suffix + ".tmp")
    with temp.open("w", encoding="utf-8") as handle:
        for score in ordered:
            handle.write(
                json.dumps(
                    serialize_trial_score(score), sort_keys=True, separators=(",", ":")
                )
                + "\n"
            )
    temp.replace(path)
