"""Manual screening study support: assignments, decision log, timing summary.

A screening study gives two annotators the same patient-trial pairs, half
with model assistance and half without, crossed so that every pair is seen
once per mode and every annotator works half-and-half. Decisions land in an
append-only log keyed by (patient, trial, annotator, assisted); the summary
reports mean review times per grouping and the relative time saved with
assistance.
"""
from __future__ import annotations

import csv
import io
import json
import random
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence

DECISIONS = ("no", "maybe")


class ScreeningError(ValueError):
    """Invalid decisions, assignments, or summary inputs."""


class DuplicateDecisionError(ScreeningError):
    """A decision for an already-logged (patient, trial, annotator, assisted)."""


@dataclass(frozen=True, slots=True)
class ScreeningDecision:
    """One annotator's verdict on one pair, with its review time."""

    patient_id: str
    nct_id: str
    decision: str
    assisted: bool
    elapsed_ms: int
    annotator_id: str
    timestamp: str = ""

    def __post_init__(self) -> None:
        if self.decision not in DECISIONS:
            raise ScreeningError(
                f"decision must be one of {DECISIONS}, got {self.decision!r}"
            )
        if self.elapsed_ms <= 0:
            raise ScreeningError(f"elapsed_ms must be positive, got {self.elapsed_ms}")
        for name in ("patient_id", "nct_id", "annotator_id"):
            if not getattr(self, name).strip():
                raise ScreeningError(f"{name} must be non-empty")

    @property
    def key(self) -> tuple[str, str, str, bool]:
        return (self.patient_id, self.nct_id, self.annotator_id, self.assisted)


def decision_from_row(row: Mapping) -> ScreeningDecision:
    try:
        assisted = row["assisted"]
        if not isinstance(assisted, bool):
            raise ScreeningError(f"assisted must be a boolean, got {assisted!r}")
        elapsed = row["elapsed_ms"]
        if isinstance(elapsed, bool) or not isinstance(elapsed, int):
            raise ScreeningError(f"elapsed_ms must be an integer, got {elapsed!r}")
        return ScreeningDecision(
            patient_id=str(row["patient_id"]),
            nct_id=str(row["nct_id"]),
            decision=str(row["decision"]),
            assisted=assisted,
            elapsed_ms=elapsed,
            annotator_id=str(row["annotator_id"]),
            timestamp=str(row.get("timestamp", "")),
        )
    except KeyError as exc:
        raise ScreeningError(f"decision is missing field {exc.args[0]!r}") from None


CSV_COLUMNS = (
    "patient_id",
    "nct_id",
    "decision",
    "assisted",
    "elapsed_ms",
    "annotator_id",
    "timestamp",
)


class DecisionLog:
    """Append-only JSONL store of screening decisions with duplicate rejection."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()
        self._decisions: dict[tuple[str, str, str, bool], ScreeningDecision] = {}
        if self.path.exists():
            with self.path.open(encoding="utf-8") as handle:
                for lineno, line in enumerate(handle, 1):
                    if not line.strip():
                        continue
                    try:
                        decision = decision_from_row(json.loads(line))
                    except (json.JSONDecodeError, ScreeningError) as exc:
                        raise ScreeningError(
                            f"{self.path.name}:{lineno}: {exc}"
                        ) from None
                    if decision.key in self._decisions:
                        raise ScreeningError(
                            f"{self.path.name}:{lineno}: duplicate decision "
                            f"for {decision.key}"
                        )
                    self._decisions[decision.key] = decision

    def __len__(self) -> int:
        return len(self._decisions)

    def decisions(self) -> list[ScreeningDecision]:
        return list(self._decisions.values())

    def append(self, decision: ScreeningDecision) -> ScreeningDecision:
        """Record one decision; a missing timestamp is stamped at append."""
        if not decision.timestamp:
            decision = ScreeningDecision(
                patient_id=decision.patient_id,
                nct_id=decision.nct_id,
                decision=decision.decision,
                assisted=decision.assisted,
                elapsed_ms=decision.elapsed_ms,
                annotator_id=decision.annotator_id,
                timestamp=datetime.now(timezone.utc).isoformat(),
            )
        with self._lock:
            if decision.key in self._decisions:
                raise DuplicateDecisionError(
                    f"decision already recorded for patient={decision.patient_id} "
                    f"trial={decision.nct_id} annotator={decision.annotator_id} "
                    f"assisted={decision.assisted}"
                )
            self._decisions[decision.key] = decision
            self.path.parent.mkdir(parents=True, exist_ok=True)
            row = {
                "patient_id": decision.patient_id,
                "nct_id": decision.nct_id,
                "decision": decision.decision,
                "assisted": decision.assisted,
                "elapsed_ms": decision.elapsed_ms,
                "annotator_id": decision.annotator_id,
                "timestamp": decision.timestamp,
            }
            with self.path.open("a", encoding="utf-8") as handle:
                handle.write(json.dumps(row, sort_keys=True) + "\n")
        return decision

    def export_csv(self) -> str:
        """All decisions as CSV in insertion order, header first."""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for decision in self._decisions.values():
            writer.writerow(
                [
                    decision.patient_id,
                    decision.nct_id,
                    decision.decision,
                    str(decision.assisted).lower(),
                    decision.elapsed_ms,
                    decision.annotator_id,
                    decision.timestamp,
                ]
            )
        return buffer.getvalue()


@dataclass(frozen=True, slots=True)
class AssignmentTask:
    annotator_id: str
    patient_id: str
    nct_id: str
    assisted: bool


@dataclass(frozen=True, slots=True)
class ScreeningAssignment:
    """The crossed two-annotator design over a set of pairs."""

    annotators: tuple[str, str]
    tasks: tuple[AssignmentTask, ...]

    def tasks_for(self, annotator_id: str) -> list[AssignmentTask]:
        if annotator_id not in self.annotators:
            raise KeyError(annotator_id)
        return [task for task in self.tasks if task.annotator_id == annotator_id]

    def to_payload(self) -> dict:
        return {
            "annotators": list(self.annotators),
            "tasks": [
                {
                    "annotator_id": task.annotator_id,
                    "patient_id": task.patient_id,
                    "nct_id": task.nct_id,
                    "assisted": task.assisted,
                }
                for task in self.tasks
            ],
        }

    @classmethod
    def from_payload(cls, payload: Mapping) -> "ScreeningAssignment":
        annotators = tuple(payload["annotators"])
        if len(annotators) != 2:
            raise ScreeningError("assignment must name exactly two annotators")
        return cls(
            annotators=annotators,
            tasks=tuple(
                AssignmentTask(
                    annotator_id=str(row["annotator_id"]),
                    patient_id=str(row["patient_id"]),
                    nct_id=str(row["nct_id"]),
                    assisted=bool(row["assisted"]),
                )
                for row in payload["tasks"]
            ),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_payload(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> "ScreeningAssignment":
        return cls.from_payload(json.loads(Path(path).read_text(encoding="utf-8")))


def build_screening_assignment(
    pairs: Sequence[tuple[str, str]],
    annotators: Sequence[str],
    seed: int = 0,
) -> ScreeningAssignment:
    """Assign an even number of unique pairs to two annotators, crossed.

    After a seeded shuffle the first half goes to annotator A assisted and
    annotator B unassisted; the second half flips the modes. Every pair is
    reviewed once per mode and each annotator's load is half assisted.
    """
    annotators = tuple(annotators)
    if len(annotators) != 2 or annotators[0] == annotators[1]:
        raise ScreeningError("screening needs exactly two distinct annotators")
    if len(set(pairs)) != len(pairs):
        raise ScreeningError("pairs must be unique")
    if not pairs or len(pairs) % 2:
        raise ScreeningError(f"pair count must be even and positive, got {len(pairs)}")
    shuffled = list(pairs)
    random.Random(seed).shuffle(shuffled)
    half = len(shuffled) // 2
    first, second = annotators
    tasks: list[AssignmentTask] = []
    for patient_id, nct_id in shuffled[:half]:
        tasks.append(AssignmentTask(first, patient_id, nct_id, True))
        tasks.append(AssignmentTask(second, patient_id, nct_id, False))
    for patient_id, nct_id in shuffled[half:]:
        tasks.append(AssignmentTask(first, patient_id, nct_id, False))
        tasks.append(AssignmentTask(second, patient_id, nct_id, True))
    return ScreeningAssignment(annotators=annotators, tasks=tuple(tasks))


def _group_summary(decisions: Sequence[ScreeningDecision]) -> dict:
    assisted = [d.elapsed_ms for d in decisions if d.assisted]
    unassisted = [d.elapsed_ms for d in decisions if not d.assisted]
    cell: dict[str, object] = {
        "assisted_n": len(assisted),
        "unassisted_n": len(unassisted),
    }
    if assisted:
        cell["assisted_mean_ms"] = sum(assisted) / len(assisted)
    if unassisted:
        cell["unassisted_mean_ms"] = sum(unassisted) / len(unassisted)
    if assisted and unassisted:
        # Relative time saved with assistance: 1 - assisted/unassisted.
        cell["time_saving"] = 1.0 - (
            cell["assisted_mean_ms"] / cell["unassisted_mean_ms"]
        )
    else:
        cell["note"] = "time saving undefined: a mode has no decisions"
    return cell


def screening_summary(
    decisions: Sequence[ScreeningDecision],
    answer_key: Mapping[tuple[str, str], str] | None = None,
) -> dict:
    """Aggregate decision timings overall and by case, trial, and annotator.

    With an answer key of (patient_id, nct_id) -> decision, per-mode
    agreement rates are reported as well.
    """
    if not decisions:
        raise ScreeningError("no decisions to summarize")
    summary: dict[str, object] = {"overall": _group_summary(decisions)}
    for grouping, key_of in (
        ("by_case", lambda d: d.patient_id),
        ("by_trial", lambda d: d.nct_id),
        ("by_annotator", lambda d: d.annotator_id),
    ):
        groups: dict[str, list[ScreeningDecision]] = {}
        for decision in decisions:
            groups.setdefault(key_of(decision), []).append(decision)
        summary[grouping] = {
            name: _group_summary(group) for name, group in sorted(groups.items())
        }
    if answer_key is not None:
        accuracy: dict[str, float] = {}
        for mode_name, flag in (("assisted", True), ("unassisted", False)):
            graded = [
                d
                for d in decisions
                if d.assisted is flag and (d.patient_id, d.nct_id) in answer_key
            ]
            if graded:
                hits = sum(
                    1
                    for d in graded
                    if d.decision == answer_key[(d.patient_id, d.nct_id)]
                )
                accuracy[mode_name] = hits / len(graded)
        summary["accuracy"] = accuracy
    return summary
