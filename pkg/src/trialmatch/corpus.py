"""Trial corpora, patient notes, and graded relevance judgments.

Turns raw registry exports into the units the rest of the pipeline works
with: trials with separated inclusion/exclusion criterion lists, patient
notes split into numbered sentences, and per-pair relevance judgments
loaded from TREC-style qrels files.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence


class CorpusError(ValueError):
    """Malformed corpus, note, or judgment input."""


class Side(str, Enum):
    """Which criterion list a prediction or prompt refers to."""

    INCLUSION = "inclusion"
    EXCLUSION = "exclusion"


class RelevanceLabel(str, Enum):
    """Ground-truth eligibility category for a patient-trial pair."""

    IRRELEVANT = "irrelevant"
    EXCLUDED = "excluded"
    POTENTIAL = "potential"
    ELIGIBLE = "eligible"
    UNLABELED = "unlabeled"


# Gain used by the ranking metrics: eligible counts double, the two
# middle categories collapse to 1, irrelevant and unlabeled earn nothing.
GRADE_BY_LABEL: Mapping[RelevanceLabel, int] = {
    RelevanceLabel.IRRELEVANT: 0,
    RelevanceLabel.UNLABELED: 0,
    RelevanceLabel.EXCLUDED: 1,
    RelevanceLabel.POTENTIAL: 1,
    RelevanceLabel.ELIGIBLE: 2,
}

MAX_GRADE = 2


def grade_for(label: RelevanceLabel) -> int:
    return GRADE_BY_LABEL[label]


@dataclass(frozen=True, slots=True)
class Criterion:
    """One eligibility criterion, positioned within its side's list."""

    index: int
    side: Side
    text: str

    def __post_init__(self) -> None:
        if self.index < 0:
            raise CorpusError(f"criterion index must be >= 0, got {self.index}")
        if not self.text.strip():
            raise CorpusError("criterion text is empty")


@dataclass(frozen=True, slots=True)
class TrialRecord:
    """A registry trial with its criteria already segmented."""

    nct_id: str
    title: str
    conditions: tuple[str, ...]
    interventions: tuple[str, ...]
    brief_summary: str
    inclusion_criteria: tuple[Criterion, ...]
    exclusion_criteria: tuple[Criterion, ...]

    def __post_init__(self) -> None:
        if not self.nct_id.strip():
            raise CorpusError("trial is missing an nct_id")
        for side, criteria in (
            (Side.INCLUSION, self.inclusion_criteria),
            (Side.EXCLUSION, self.exclusion_criteria),
        ):
            for position, criterion in enumerate(criteria):
                if criterion.side is not side or criterion.index != position:
                    raise CorpusError(
                        f"{self.nct_id}: criterion list for {side.value} is not "
                        f"contiguously indexed"
                    )

    def criteria_for(self, side: Side) -> tuple[Criterion, ...]:
        return self.inclusion_criteria if side is Side.INCLUSION else self.exclusion_criteria

    def search_text(self) -> str:
        """Concatenated free text used by the lexical and dense indexes."""
        parts = [self.title, *self.conditions, *self.interventions, self.brief_summary]
        parts.extend(c.text for c in self.inclusion_criteria)
        parts.extend(c.text for c in self.exclusion_criteria)
        return " ".join(p for p in parts if p)


def build_trial(
    nct_id: str,
    title: str = "",
    conditions: Sequence[str] = (),
    interventions: Sequence[str] = (),
    brief_summary: str = "",
    inclusion: Sequence[str] = (),
    exclusion: Sequence[str] = (),
) -> TrialRecord:
    """Assemble a TrialRecord from already-segmented criterion texts."""
    return TrialRecord(
        nct_id=nct_id,
        title=title,
        conditions=tuple(c for c in (s.strip() for s in conditions) if c),
        interventions=tuple(c for c in (s.strip() for s in interventions) if c),
        brief_summary=brief_summary,
        inclusion_criteria=tuple(
            Criterion(i, Side.INCLUSION, t) for i, t in enumerate(inclusion)
        ),
        exclusion_criteria=tuple(
            Criterion(i, Side.EXCLUSION, t) for i, t in enumerate(exclusion)
        ),
    )


@dataclass(frozen=True, slots=True)
class PatientNote:
    """A patient summary plus its sentence segmentation.

    Sentence ids used throughout matching are 0-based positions into
    ``sentences``.
    """

    patient_id: str
    raw_text: str
    sentences: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.patient_id.strip():
            raise CorpusError("patient note is missing a patient_id")

    @classmethod
    def from_text(cls, patient_id: str, text: str) -> "PatientNote":
        return cls(patient_id, text, tuple(segment_sentences(text)))


@dataclass(frozen=True, slots=True)
class RelevanceJudgment:
    """Graded ground truth for one patient-trial pair."""

    patient_id: str
    nct_id: str
    label: RelevanceLabel
    grade: int

    def __post_init__(self) -> None:
        if self.grade != GRADE_BY_LABEL[self.label]:
            raise CorpusError(
                f"grade {self.grade} does not match label {self.label.value!r}"
            )

    @classmethod
    def from_label(cls, patient_id: str, nct_id: str, label: RelevanceLabel) -> "RelevanceJudgment":
        return cls(patient_id, nct_id, label, GRADE_BY_LABEL[label])


@dataclass(frozen=True, slots=True)
class Cohort:
    """A named set of patients with their judgments against one trial corpus."""

    name: str
    patients: tuple[PatientNote, ...]
    judgments: tuple[RelevanceJudgment, ...]
    trial_corpus_ref: str = ""

    def __post_init__(self) -> None:
        ids = [p.patient_id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise CorpusError(f"cohort {self.name!r} has duplicate patient ids")
        known = set(ids)
        for judgment in self.judgments:
            if judgment.patient_id not in known:
                raise CorpusError(
                    f"judgment references unknown patient {judgment.patient_id!r}"
                )

    def patient(self, patient_id: str) -> PatientNote:
        for note in self.patients:
            if note.patient_id == patient_id:
                return note
        raise KeyError(patient_id)

    def patient_ids(self) -> tuple[str, ...]:
        return tuple(p.patient_id for p in self.patients)

    def judgments_for(self, patient_id: str) -> dict[str, RelevanceJudgment]:
        return {
            j.nct_id: j for j in self.judgments if j.patient_id == patient_id
        }


_HEADER_LINE = re.compile(r"(?i)^(?:inclusion|exclusion)\s+criteria\s*:?$")
_BULLET = re.compile(r"^[-*•]\s+")
_ENUMERATOR = re.compile(r"^\d+[.)]\s+")

# Everything here is matched case-insensitively against the trailing token.
DEFAULT_ABBREVIATIONS: tuple[str, ...] = (
    "dr.", "mr.", "mrs.", "ms.", "prof.", "st.", "no.", "fig.",
    "vs.", "etc.", "e.g.", "i.e.", "a.m.", "p.m.", "al.",
)

_SENTENCE_BOUNDARY = re.compile(r"[.!?](?=\s+[A-Z0-9])")
_TRAILING_TOKEN = re.compile(r"(\S+)$")


def segment_criteria(raw_block: str) -> list[str]:
    """Split a raw criteria block into individual criterion texts.

    Lines are trimmed; bullet and ``1.``/``1)`` enumerator markers are
    stripped repeatedly until stable; header lines ("Inclusion Criteria:")
    and fragments shorter than two characters are dropped. Re-segmenting
    the newline-join of the output returns the same list.
    """
    criteria: list[str] = []
    for line in raw_block.splitlines():
        text = line.strip()
        previous = None
        while previous != text:
            previous = text
            text = _BULLET.sub("", text, count=1)
            text = _ENUMERATOR.sub("", text, count=1)
            text = text.strip()
        if len(text) < 2 or _HEADER_LINE.match(text):
            continue
        criteria.append(text)
    return criteria


def _ends_with_abbreviation(token: str, abbreviations: Sequence[str]) -> bool:
    lowered = token.lower()
    for abbreviation in abbreviations:
        if lowered == abbreviation:
            return True
        # Suffix matches only count when a delimiter precedes them, so
        # "(e.g." protects the split but "Casino." does not.
        if lowered.endswith(abbreviation):
            boundary = lowered[-len(abbreviation) - 1]
            if not boundary.isalnum():
                return True
    return False


def segment_sentences(
    raw_text: str,
    abbreviations: Sequence[str] = DEFAULT_ABBREVIATIONS,
) -> list[str]:
    """Split note text into sentences after ``.``, ``!`` or ``?``.

    A period only ends a sentence when followed by whitespace and an
    uppercase letter or digit, and when the token it terminates is not a
    known abbreviation. Whitespace is normalized first, so joining the
    result with single spaces reconstructs the normalized input.
    """
    text = " ".join(raw_text.split())
    if not text:
        return []
    sentences: list[str] = []
    start = 0
    for match in _SENTENCE_BOUNDARY.finditer(text):
        end = match.end()
        if match.group() == ".":
            token = _TRAILING_TOKEN.search(text[:end])
            if token and _ends_with_abbreviation(token.group(1), abbreviations):
                continue
        piece = text[start:end].strip()
        if piece:
            sentences.append(piece)
        start = end
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def _string_list(value: object, where: str, field: str) -> tuple[str, ...]:
    if value is None:
        return ()
    if isinstance(value, str):
        value = [value]
    if not isinstance(value, (list, tuple)):
        raise CorpusError(f"{where}: field {field!r} must be a string or a list")
    return tuple(t for t in (str(v).strip() for v in value) if t)


def _criterion_texts(value: object, where: str, field: str) -> list[str]:
    if value is None:
        return []
    if isinstance(value, str):
        return segment_criteria(value)
    if isinstance(value, (list, tuple)):
        return [t for t in (str(v).strip() for v in value) if t]
    raise CorpusError(
        f"{where}: field {field!r} must be a raw text block or a list of criteria"
    )


def parse_trial_corpus(path: str | Path) -> list[TrialRecord]:
    """Load a trials JSONL file, one trial object per line.

    Criteria may arrive pre-split (a JSON array) or as a raw block that is
    routed through segment_criteria. Malformed lines and duplicate nct_ids
    raise CorpusError naming the offending line.
    """
    path = Path(path)
    trials: list[TrialRecord] = []
    first_line: dict[str, int] = {}
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, 1):
            if not line.strip():
                continue
            where = f"{path.name}:{lineno}"
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{where}: invalid JSON ({exc.msg})") from exc
            if not isinstance(raw, dict):
                raise CorpusError(f"{where}: expected a JSON object")
            nct_id = str(raw.get("nct_id") or "").strip()
            if not nct_id:
                raise CorpusError(f"{where}: missing nct_id")
            if nct_id in first_line:
                raise CorpusError(
                    f"{where}: duplicate nct_id {nct_id} "
                    f"(first seen on line {first_line[nct_id]})"
                )
            first_line[nct_id] = lineno
            trials.append(
                build_trial(
                    nct_id=nct_id,
                    title=str(raw.get("title") or ""),
                    conditions=_string_list(raw.get("conditions"), where, "conditions"),
                    interventions=_string_list(
                        raw.get("interventions"), where, "interventions"
                    ),
                    brief_summary=str(raw.get("brief_summary") or ""),
                    inclusion=_criterion_texts(
                        raw.get("inclusion_criteria"), where, "inclusion_criteria"
                    ),
                    exclusion=_criterion_texts(
                        raw.get("exclusion_criteria"), where, "exclusion_criteria"
                    ),
                )
            )
    return trials


def load_patient_notes(path: str | Path) -> list[PatientNote]:
    """Load a patients JSONL file of {"patient_id", "text"} objects."""
    path = Path(path)
    notes: list[PatientNote] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, 1):
            if not line.strip():
                continue
            where = f"{path.name}:{lineno}"
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{where}: invalid JSON ({exc.msg})") from exc
            if not isinstance(raw, dict):
                raise CorpusError(f"{where}: expected a JSON object")
            patient_id = str(raw.get("patient_id") or "").strip()
            if not patient_id:
                raise CorpusError(f"{where}: missing patient_id")
            if patient_id in seen:
                raise CorpusError(f"{where}: duplicate patient_id {patient_id}")
            seen.add(patient_id)
            notes.append(PatientNote.from_text(patient_id, str(raw.get("text") or "")))
    return notes


# Token -> label vocabularies for the qrels relevance column.
TREC_QRELS_VOCAB: Mapping[str, RelevanceLabel] = {
    "0": RelevanceLabel.IRRELEVANT,
    "1": RelevanceLabel.EXCLUDED,
    "2": RelevanceLabel.ELIGIBLE,
}
SIGIR_QRELS_VOCAB: Mapping[str, RelevanceLabel] = {
    "0": RelevanceLabel.IRRELEVANT,
    "1": RelevanceLabel.POTENTIAL,
    "2": RelevanceLabel.ELIGIBLE,
}


def load_qrels(
    path: str | Path,
    vocab: Mapping[str, RelevanceLabel] = TREC_QRELS_VOCAB,
) -> list[RelevanceJudgment]:
    """Load whitespace-separated qrels rows: topic iteration doc relevance."""
    path = Path(path)
    judgments: list[RelevanceJudgment] = []
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise CorpusError(
                    f"{path.name}:{lineno}: expected 4 columns, got {len(parts)}"
                )
            topic_id, _iteration, doc_id, relevance = parts
            label = vocab.get(relevance)
            if label is None:
                raise CorpusError(
                    f"{path.name}:{lineno}: unknown relevance token {relevance!r}"
                )
            judgments.append(RelevanceJudgment.from_label(topic_id, doc_id, label))
    return judgments


def load_cohort(
    name: str,
    trials_path: str | Path,
    patients_path: str | Path,
    qrels_path: str | Path | None = None,
    vocab: Mapping[str, RelevanceLabel] = TREC_QRELS_VOCAB,
    drop_orphan_judgments: bool = False,
) -> tuple[Cohort, list[TrialRecord]]:
    """Load a full cohort: trials, notes, and (optionally) judgments."""
    trials = parse_trial_corpus(trials_path)
    patients = load_patient_notes(patients_path)
    judgments: Iterable[RelevanceJudgment] = ()
    if qrels_path is not None:
        judgments = load_qrels(qrels_path, vocab)
        if drop_orphan_judgments:
            known = {p.patient_id for p in patients}
            judgments = [j for j in judgments if j.patient_id in known]
    cohort = Cohort(
        name=name,
        patients=tuple(patients),
        judgments=tuple(judgments),
        trial_corpus_ref=str(trials_path),
    )
    return cohort, trials
