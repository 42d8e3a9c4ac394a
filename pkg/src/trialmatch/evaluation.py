"""Ranking-quality metrics and the cohort evaluation harness.

Metrics use graded gains (eligible=2, excluded/potential=1, irrelevant and
unlabeled=0): recall@k is the fraction of a patient's total gain captured
in the top k, NDCG@k discounts gains logarithmically against the ideal
ordering of all judged trials, precision@k normalizes the top-k gain by the
maximum possible (grade 2 at every position), and the exclusion-detection
task scores AUROC of a score against the excluded-vs-eligible split.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import MAX_GRADE, Cohort, RelevanceLabel

log = logging.getLogger(__name__)

TASK_RETRIEVAL = "retrieval"
TASK_RANKING = "ranking"
TASK_EXCLUDING = "excluding"
TASKS = (TASK_RETRIEVAL, TASK_RANKING, TASK_EXCLUDING)

UNJUDGED_EXCLUDE = "exclude"
UNJUDGED_GRADE0 = "grade0"


class EvaluationError(ValueError):
    """Unusable runs or judgments for the requested task."""


@dataclass(frozen=True, slots=True)
class RankedRun:
    """One patient's ordered trial list with the scores that ordered it."""

    patient_id: str
    ranked: tuple[tuple[str, float], ...]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        previous: tuple[float, str] | None = None
        for nct_id, score in self.ranked:
            if nct_id in seen:
                raise EvaluationError(
                    f"run for {self.patient_id} lists {nct_id} twice"
                )
            seen.add(nct_id)
            key = (-score, nct_id)
            if previous is not None and key < previous:
                raise EvaluationError(
                    f"run for {self.patient_id} is not sorted by descending score"
                )
            previous = key

    @classmethod
    def from_scores(
        cls, patient_id: str, scored: Sequence[tuple[str, float]]
    ) -> "RankedRun":
        ordered = sorted(scored, key=lambda item: (-item[1], item[0]))
        return cls(patient_id, tuple(ordered))

    def trial_ids(self) -> tuple[str, ...]:
        return tuple(nct_id for nct_id, _ in self.ranked)

    def filtered(self, keep: set[str]) -> "RankedRun":
        return RankedRun(
            self.patient_id,
            tuple((nct_id, score) for nct_id, score in self.ranked if nct_id in keep),
        )


def recall_at_k(run: RankedRun, grades: Mapping[str, int], k: int) -> float | None:
    """Fraction of the patient's total judged gain found in the top k.

    None when the patient has no judged gain at all (the ratio is
    undefined); unjudged run entries contribute zero gain.
    """
    total = sum(grades.values())
    if total == 0:
        log.warning("recall undefined for %s: no judged gain", run.patient_id)
        return None
    gained = sum(grades.get(nct_id, 0) for nct_id, _ in run.ranked[:k])
    return gained / total


def _dcg(gains: Sequence[int]) -> float:
    return sum(gain / math.log2(position + 1) for position, gain in enumerate(gains, 1))


def ndcg_at_k(run: RankedRun, grades: Mapping[str, int], k: int) -> float | None:
    """Discounted cumulative gain at k against the ideal judged ordering.

    The ideal ordering ranks every judged trial by grade descending and is
    truncated to the same k. None when no judged trial has positive grade.
    """
    ideal = sorted(grades.values(), reverse=True)[:k]
    idcg = _dcg(ideal)
    if idcg == 0.0:
        log.warning("ndcg undefined for %s: no positive judged grade", run.patient_id)
        return None
    gains = [grades.get(nct_id, 0) for nct_id, _ in run.ranked[:k]]
    return _dcg(gains) / idcg


def precision_at_k(
    run: RankedRun, grades: Mapping[str, int], k: int, max_grade: int = MAX_GRADE
) -> float:
    """Top-k gain normalized by the best possible gain, max_grade * k.

    A run shorter than k keeps k in the denominator, so missing positions
    count as zero gain.
    """
    gained = sum(grades.get(nct_id, 0) for nct_id, _ in run.ranked[:k])
    return gained / (max_grade * k)


def auroc(pairs: Sequence[tuple[float, int]]) -> float | None:
    """Probability a positive outscores a negative, ties counting half.

    ``pairs`` are (score, is_positive) with is_positive in {0, 1}. None when
    only one class is present.
    """
    scores = np.asarray([score for score, _ in pairs], dtype=np.float64)
    positives = np.asarray([flag for _, flag in pairs], dtype=bool)
    n_pos = int(positives.sum())
    n_neg = len(pairs) - n_pos
    if n_pos == 0 or n_neg == 0:
        log.warning("auroc undefined: only one class present")
        return None
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    midranks = np.empty(len(pairs), dtype=np.float64)
    start = 0
    while start < len(pairs):
        stop = start
        while stop + 1 < len(pairs) and sorted_scores[stop + 1] == sorted_scores[start]:
            stop += 1
        midranks[order[start : stop + 1]] = (start + stop) / 2.0 + 1.0
        start = stop + 1
    rank_sum = float(midranks[positives].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass(slots=True)
class EvalConfig:
    recall_depths: tuple[int, ...] = (100, 200, 300, 400, 500, 600, 700, 800, 900, 1000)
    ndcg_k: int = 10
    precision_k: int = 10
    max_grade: int = MAX_GRADE
    unjudged_policy: str = UNJUDGED_EXCLUDE
    positive_labels: tuple[str, ...] = (RelevanceLabel.EXCLUDED.value,)
    negative_labels: tuple[str, ...] = (RelevanceLabel.ELIGIBLE.value,)

    def __post_init__(self) -> None:
        if self.unjudged_policy not in (UNJUDGED_EXCLUDE, UNJUDGED_GRADE0):
            raise EvaluationError(f"unknown unjudged policy {self.unjudged_policy!r}")


@dataclass(slots=True)
class MetricReport:
    """Per-patient, per-cohort, and macro metric values for one task."""

    task: str
    per_patient: dict[str, dict[str, dict[str, float]]]
    cohort_means: dict[str, dict[str, float]]
    macro: dict[str, float]
    skipped: dict[str, list[str]] = field(default_factory=dict)
    config: dict[str, object] = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "task": self.task,
            "per_patient": self.per_patient,
            "cohort_means": self.cohort_means,
            "macro": self.macro,
            "skipped": self.skipped,
            "config": self.config,
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    def to_table(self) -> str:
        """Aligned-column text table of cohort means plus the macro row."""
        metrics = sorted(self.macro)
        rows: list[list[str]] = [["cohort", *metrics]]
        for cohort in sorted(self.cohort_means):
            rows.append(
                [cohort]
                + [
                    _format_cell(self.cohort_means[cohort].get(metric))
                    for metric in metrics
                ]
            )
        rows.append(["macro"] + [_format_cell(self.macro.get(m)) for m in metrics])
        widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
        lines = [
            "  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip()
            for row in rows
        ]
        return "\n".join(lines) + "\n"


def _format_cell(value: float | None) -> str:
    return "-" if value is None else f"{value:.4f}"


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values)


def _evaluate_patient(
    task: str,
    run: RankedRun,
    judgments: Mapping[str, object],
    config: EvalConfig,
) -> dict[str, float]:
    grades = {nct_id: j.grade for nct_id, j in judgments.items()}
    metrics: dict[str, float] = {}
    if task == TASK_RETRIEVAL:
        for depth in config.recall_depths:
            value = recall_at_k(run, grades, depth)
            if value is None:
                return {}
            metrics[f"recall@{depth}"] = value
        return metrics
    if task == TASK_RANKING:
        scored_run = run
        if config.unjudged_policy == UNJUDGED_EXCLUDE:
            scored_run = run.filtered(set(grades))
        ndcg = ndcg_at_k(scored_run, grades, config.ndcg_k)
        if ndcg is not None:
            metrics[f"ndcg@{config.ndcg_k}"] = ndcg
        metrics[f"p@{config.precision_k}"] = precision_at_k(
            scored_run, grades, config.precision_k, config.max_grade
        )
        return metrics
    if task == TASK_EXCLUDING:
        positives = set(config.positive_labels)
        negatives = set(config.negative_labels)
        pairs: list[tuple[float, int]] = []
        for nct_id, score in run.ranked:
            judgment = judgments.get(nct_id)
            if judgment is None:
                continue
            label = judgment.label.value
            if label in positives:
                pairs.append((score, 1))
            elif label in negatives:
                pairs.append((score, 0))
        value = auroc(pairs) if pairs else None
        if value is None:
            return {}
        return {"auroc": value}
    raise EvaluationError(f"unknown task {task!r}; expected one of {TASKS}")


def evaluate_cohort(
    cohort: Cohort,
    runs: Mapping[str, RankedRun],
    task: str,
    config: EvalConfig | None = None,
) -> MetricReport:
    """Score every patient with a run, then average per cohort.

    Patients whose metric is undefined (no judged gain, single AUROC class)
    are listed under ``skipped`` and left out of the means. At least one
    patient of the cohort must have a run.
    """
    if task not in TASKS:
        raise EvaluationError(f"unknown task {task!r}; expected one of {TASKS}")
    config = config or EvalConfig()
    known = set(cohort.patient_ids())
    covered = [pid for pid in sorted(runs) if pid in known]
    if not covered:
        raise EvaluationError(
            f"no run covers any patient of cohort {cohort.name!r}"
        )
    per_patient: dict[str, dict[str, float]] = {}
    skipped: list[str] = []
    for patient_id in covered:
        metrics = _evaluate_patient(
            task, runs[patient_id], cohort.judgments_for(patient_id), config
        )
        if metrics:
            per_patient[patient_id] = metrics
        else:
            skipped.append(patient_id)
    means: dict[str, float] = {}
    names = sorted({name for metrics in per_patient.values() for name in metrics})
    for name in names:
        values = [m[name] for m in per_patient.values() if name in m]
        if values:
            means[name] = _mean(values)
    return MetricReport(
        task=task,
        per_patient={cohort.name: per_patient},
        cohort_means={cohort.name: means},
        macro=dict(means),
        skipped={cohort.name: skipped} if skipped else {},
        config={
            "task": task,
            "unjudged_policy": config.unjudged_policy,
            "ndcg_k": config.ndcg_k,
            "precision_k": config.precision_k,
            "recall_depths": list(config.recall_depths),
            "max_grade": config.max_grade,
        },
    )


def merge_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Combine single-cohort reports; macro averages the cohort means."""
    if not reports:
        raise EvaluationError("nothing to merge")
    tasks = {report.task for report in reports}
    if len(tasks) > 1:
        raise EvaluationError(f"cannot merge reports for different tasks {tasks}")
    per_patient: dict[str, dict[str, dict[str, float]]] = {}
    cohort_means: dict[str, dict[str, float]] = {}
    skipped: dict[str, list[str]] = {}
    for report in reports:
        per_patient.update(report.per_patient)
        cohort_means.update(report.cohort_means)
        skipped.update(report.skipped)
    macro: dict[str, float] = {}
    names = sorted({name for means in cohort_means.values() for name in means})
    for name in names:
        values = [means[name] for means in cohort_means.values() if name in means]
        if values:
            macro[name] = _mean(values)
    return MetricReport(
        task=reports[0].task,
        per_patient=per_patient,
        cohort_means=cohort_means,
        macro=macro,
        skipped=skipped,
        config=reports[0].config,
    )


def write_run_file(
    path: str | Path, runs: Sequence[RankedRun], tag: str = "trialmatch"
) -> None:
    """Write runs in the classic five-column format:
    patient_id nct_id rank score tag."""
    lines: list[str] = []
    for run in runs:
        for rank, (nct_id, score) in enumerate(run.ranked, 1):
            lines.append(f"{run.patient_id} {nct_id} {rank} {score!r} {tag}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_run_file(path: str | Path) -> dict[str, RankedRun]:
    """Read a five-column run file back into per-patient runs."""
    path = Path(path)
    scored: dict[str, list[tuple[int, str, float]]] = {}
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 5:
                raise EvaluationError(
                    f"{path.name}:{lineno}: expected 5 columns, got {len(parts)}"
                )
            patient_id, nct_id, rank, score, _tag = parts
            try:
                scored.setdefault(patient_id, []).append(
                    (int(rank), nct_id, float(score))
                )
            except ValueError as exc:
                raise EvaluationError(f"{path.name}:{lineno}: {exc}") from None
    runs: dict[str, RankedRun] = {}
    for patient_id, rows in scored.items():
        rows.sort()
        runs[patient_id] = RankedRun(
            patient_id, tuple((nct_id, score) for _rank, nct_id, score in rows)
        )
    return runs
