"""Keyword-driven hybrid retrieval with reciprocal-rank fusion.

A patient note is condensed into an importance-ordered keyword list, each
keyword queries both a lexical and a dense index, and the per-keyword
rankings are fused: a trial at rank r for keyword i contributes
``1 / (i * (r + C))`` to its fused score, so earlier keywords and earlier
ranks dominate. Trials absent from a ranking contribute nothing.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

from .bm25 import LexicalIndex
from .corpus import PatientNote
from .embeddings import DenseIndex, EmbeddingError
from .gateway import ChatRequest, LlmGateway, format_request_header
from .parsing import extract_json

log = logging.getLogger(__name__)

MAX_KEYWORDS = 32
LEXICAL = "lexical"
DENSE = "dense"
RETRIEVERS = (LEXICAL, DENSE)


class RetrievalError(ValueError):
    """Invalid retrieval configuration or unusable keyword output."""

    def __init__(self, message: str, raw_response: str | None = None) -> None:
        super().__init__(message)
        self.raw_response = raw_response


@dataclass(frozen=True, slots=True)
class KeywordQuery:
    """Deduplicated keywords for one patient, most important first."""

    patient_id: str
    keywords: tuple[str, ...]

    def __post_init__(self) -> None:
        if not 1 <= len(self.keywords) <= MAX_KEYWORDS:
            raise RetrievalError(
                f"keyword list must have 1..{MAX_KEYWORDS} entries, "
                f"got {len(self.keywords)}"
            )


def make_keyword_query(patient_id: str, raw_keywords: Sequence[str]) -> KeywordQuery:
    """Normalize raw keyword strings: trim, case-insensitive dedupe, cap at 32.

    Order is preserved and the first occurrence of a duplicate wins, so the
    importance ranking survives normalization.
    """
    seen: set[str] = set()
    keywords: list[str] = []
    for raw in raw_keywords:
        text = str(raw).strip()
        if not text:
            continue
        folded = text.lower()
        if folded in seen:
            continue
        seen.add(folded)
        keywords.append(text)
        if len(keywords) == MAX_KEYWORDS:
            break
    if not keywords:
        raise RetrievalError(f"no usable keywords for patient {patient_id!r}")
    return KeywordQuery(patient_id, tuple(keywords))


@dataclass(frozen=True, slots=True)
class KeywordRanking:
    """One retriever's ranking for one keyword; scores non-increasing."""

    retriever: str
    keyword_index: int
    ranked_trials: tuple[tuple[str, float], ...]

    def __post_init__(self) -> None:
        if self.retriever not in RETRIEVERS:
            raise RetrievalError(f"unknown retriever {self.retriever!r}")
        if self.keyword_index < 1:
            raise RetrievalError("keyword_index is 1-based")
        scores = [score for _, score in self.ranked_trials]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise RetrievalError("ranking scores must be non-increasing")


@dataclass(frozen=True, slots=True)
class FusionConfig:
    rrf_constant: float = 20.0
    per_keyword_cutoff: int = 1000
    candidate_count: int = 500

    def __post_init__(self) -> None:
        if self.rrf_constant <= 0:
            raise RetrievalError("rrf_constant must be positive")
        if self.per_keyword_cutoff < 1 or self.candidate_count < 1:
            raise RetrievalError("cutoffs must be >= 1")


@dataclass(frozen=True, slots=True)
class RetrievalResult:
    """Fused candidates for one patient, best first."""

    patient_id: str
    scored: tuple[tuple[str, float], ...]
    dense_skipped: bool = False

    def trial_ids(self) -> tuple[str, ...]:
        return tuple(nct_id for nct_id, _ in self.scored)


def _ranked(scores: dict[str, float], cutoff: int) -> tuple[tuple[str, float], ...]:
    ordered = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
    return tuple(ordered[:cutoff])


def lexical_rank(
    keyword: str, index: LexicalIndex, cutoff: int, keyword_index: int = 1
) -> KeywordRanking:
    """Rank trials for one keyword by summed token match weight.

    Only trials matching at least one token appear; ties break by nct_id
    ascending.
    """
    return KeywordRanking(
        LEXICAL, keyword_index, _ranked(index.score_keyword(keyword), cutoff)
    )


def dense_rank(
    keyword: str, index: DenseIndex, cutoff: int, keyword_index: int = 1
) -> KeywordRanking:
    """Rank all indexed trials for one keyword by vector similarity."""
    try:
        query = index.query_vector(keyword)
        similarities = index.similarities(query)
    except EmbeddingError:
        raise
    except Exception as exc:
        raise EmbeddingError(f"dense query failed for keyword {keyword!r}: {exc}") from exc
    scores = {nct_id: float(s) for nct_id, s in zip(index.ids, similarities)}
    return KeywordRanking(DENSE, keyword_index, _ranked(scores, cutoff))


def fuse(
    rankings: Sequence[KeywordRanking],
    config: FusionConfig | None = None,
    patient_id: str = "",
    dense_skipped: bool = False,
) -> RetrievalResult:
    """Merge per-keyword rankings into one candidate list.

    Fused score of trial t is the sum over rankings of
    ``1 / (keyword_index * (rank_of_t + rrf_constant))`` with rank 1-based;
    rankings are truncated at per_keyword_cutoff and the merged list at
    candidate_count. Ties break by nct_id ascending.
    """
    config = config or FusionConfig()
    fused: dict[str, float] = {}
    for ranking in rankings:
        weight = float(ranking.keyword_index)
        for rank, (nct_id, _native) in enumerate(
            ranking.ranked_trials[: config.per_keyword_cutoff], 1
        ):
            fused[nct_id] = fused.get(nct_id, 0.0) + 1.0 / (
                weight * (rank + config.rrf_constant)
            )
    ordered = sorted(fused.items(), key=lambda item: (-item[1], item[0]))
    return RetrievalResult(
        patient_id=patient_id,
        scored=tuple(ordered[: config.candidate_count]),
        dense_skipped=dense_skipped,
    )


KEYWORD_SYSTEM_TEXT = (
    "You compress patient case descriptions into search keywords for a "
    "clinical trial registry. Respond with a single JSON object of the form "
    '{"keywords": ["...", "..."]} and nothing else. List at most '
    f"{MAX_KEYWORDS} keywords, ordered from most to least important: the "
    "primary condition first, then complications, key findings, treatments, "
    "and demographics worth searching on."
)


def build_keyword_prompt(note: PatientNote) -> tuple[str, str]:
    header = format_request_header(task="keywords", patient=note.patient_id)
    user_text = f"{header}\n\nPatient description:\n{note.raw_text}\n"
    return KEYWORD_SYSTEM_TEXT, user_text


def generate_keywords(
    note: PatientNote, gateway: LlmGateway, model: str | None = None
) -> KeywordQuery:
    """Ask the model for an importance-ordered keyword list for one note."""
    system_text, user_text = build_keyword_prompt(note)
    response = gateway.complete(
        ChatRequest(
            model=model or gateway.default_model,
            system_text=system_text,
            user_text=user_text,
        )
    )
    payload, _repaired = extract_json(response.text)
    raw_list: object = None
    if isinstance(payload, dict):
        raw_list = payload.get("keywords")
    elif isinstance(payload, list):
        raw_list = payload
    if not isinstance(raw_list, list):
        raise RetrievalError(
            f"keyword generation for patient {note.patient_id!r} returned no "
            "usable keyword list",
            raw_response=response.text,
        )
    try:
        return make_keyword_query(
            note.patient_id, [k for k in raw_list if isinstance(k, str)]
        )
    except RetrievalError as exc:
        raise RetrievalError(str(exc), raw_response=response.text) from None


def retrieve_patient(
    note: PatientNote,
    lexical_index: LexicalIndex,
    dense_index: DenseIndex | None,
    gateway: LlmGateway,
    config: FusionConfig | None = None,
    model: str | None = None,
) -> tuple[KeywordQuery, RetrievalResult]:
    """Run the full retrieval stage for one patient.

    If the dense side fails on any keyword (or no dense index is supplied),
    fusion proceeds lexical-only and the result is flagged.
    """
    config = config or FusionConfig()
    query = generate_keywords(note, gateway, model=model)
    rankings: list[KeywordRanking] = [
        lexical_rank(keyword, lexical_index, config.per_keyword_cutoff, i)
        for i, keyword in enumerate(query.keywords, 1)
    ]
    dense_skipped = dense_index is None
    if dense_index is not None:
        dense_rankings: list[KeywordRanking] = []
        try:
            for i, keyword in enumerate(query.keywords, 1):
                dense_rankings.append(
                    dense_rank(keyword, dense_index, config.per_keyword_cutoff, i)
                )
        except EmbeddingError as exc:
            log.warning(
                "dense retrieval skipped for patient %s: %s", note.patient_id, exc
            )
            dense_skipped = True
        else:
            rankings.extend(dense_rankings)
    result = fuse(
        rankings, config, patient_id=note.patient_id, dense_skipped=dense_skipped
    )
    return query, result
