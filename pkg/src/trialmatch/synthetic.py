"""Deterministic synthetic cohort with perfectly-known ground truth.

Generates a small demo dataset (10 patients, 50 trials, graded judgments)
plus a mock-backend fixture file whose canned responses are derived from
that ground truth. With noise_rate=0 the derivation is exact, so the full
pipeline recovers the true ordering; a positive noise_rate flips a seeded
fraction of criterion labels first and derives the trial-level scores from
the corrupted labels, giving a controlled imperfect-model regime.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .matching import (
    EXCLUDED,
    EXCLUSION_LABELS,
    INCLUDED,
    INCLUSION_LABELS,
    NOT_EXCLUDED,
    NOT_INCLUDED,
    NO_INFORMATION,
)

CONDITIONS = (
    "metastatic melanoma",
    "small cell lung cancer",
    "chronic lymphocytic leukemia",
    "rheumatoid arthritis",
    "type 2 diabetes",
    "congestive heart failure",
    "ulcerative colitis",
    "multiple sclerosis",
    "chronic hepatitis b",
    "ovarian carcinoma",
)

DRUGS = (
    "abraxane",
    "bevacizumab",
    "crizotinib",
    "dasatinib",
    "erlotinib",
    "fulvestrant",
    "gefitinib",
    "ibrutinib",
    "lenalidomide",
    "nivolumab",
    "osimertinib",
    "pembrolizumab",
)

N_PATIENTS = 10
N_TRIALS = 50

ELIGIBLE_GRADE = 2
EXCLUDED_GRADE = 1
IRRELEVANT_GRADE = 0


@dataclass(slots=True)
class DemoDataset:
    trial_rows: list[dict]
    patient_rows: list[dict]
    qrels_lines: list[str]
    fixture_rows: list[dict]
    # (patient_id, nct_id) -> judged grade; unjudged pairs are absent.
    truth: dict[tuple[str, str], int]


def _nct_id(i: int) -> str:
    return f"NCT{i + 1:08d}"


def _patient_id(i: int) -> str:
    return f"patient-{i + 1:02d}"


def _trial_row(i: int) -> dict:
    condition = CONDITIONS[i % len(CONDITIONS)]
    drug = DRUGS[i % len(DRUGS)]
    exclusions = [
        "Pregnancy or breastfeeding.",
        f"Prior treatment with {drug}.",
        "Severe renal impairment.",
    ][: i % 4]
    return {
        "nct_id": _nct_id(i),
        "title": f"Study of {drug} in {condition}",
        "conditions": [condition],
        "interventions": [drug],
        "brief_summary": (
            f"An open label clinical trial evaluating {drug} for {condition}."
        ),
        "inclusion_criteria": [
            f"Histologically confirmed {condition}.",
            "Age 18 years or older.",
            "ECOG performance status 0 to 2.",
        ],
        "exclusion_criteria": exclusions,
    }


def _patient_row(i: int) -> dict:
    condition = CONDITIONS[i]
    sex = "woman" if i % 2 == 0 else "man"
    text = (
        f"Patient {i + 1} is a {35 + 3 * i} year old {sex} referred for trial "
        "screening. "
        f"The diagnostic workup confirmed {condition}. "
        "ECOG performance status is 1. "
        "Renal and hepatic function are within normal limits. "
        "There is no history of prior systemic therapy."
    )
    return {"patient_id": _patient_id(i), "text": text}


# Sentence ids in the generated note: 0 demographics, 1 diagnosis, 2 ECOG,
# 3 organ function, 4 treatment history.
_INCLUSION_SENTENCES = ([1], [0], [2])
_EXCLUSION_SENTENCES = ([0], [4], [3])

ELIGIBLE = "eligible"
EXCLUDED_CLASS = "excluded"
IRRELEVANT = "irrelevant"


def _true_labels(
    pair_class: str, n_exclusions: int
) -> tuple[list[str], list[str]]:
    """Ground-truth criterion labels for one pair, before any noise."""
    if pair_class == ELIGIBLE:
        return [INCLUDED] * 3, [NOT_EXCLUDED] * n_exclusions
    if pair_class == EXCLUDED_CLASS:
        if n_exclusions:
            exclusion = [EXCLUDED] + [NOT_EXCLUDED] * (n_exclusions - 1)
            return [INCLUDED] * 3, exclusion
        # No exclusion list to trigger, so the pair fails an inclusion.
        return [INCLUDED, INCLUDED, NOT_INCLUDED], []
    return [NOT_INCLUDED, NO_INFORMATION, NO_INFORMATION], [NO_INFORMATION] * n_exclusions


def _apply_noise(
    labels: Sequence[str], vocabulary: Sequence[str], rng: random.Random, rate: float
) -> list[str]:
    noisy: list[str] = []
    for label in labels:
        if rate > 0.0 and rng.random() < rate:
            noisy.append(rng.choice([l for l in vocabulary if l != label]))
        else:
            noisy.append(label)
    return noisy


def _derived_scores(inclusion: Sequence[str], exclusion: Sequence[str]) -> tuple[int, int]:
    """Trial-level (relevance, eligibility) derived from criterion labels."""
    met_inc = inclusion.count(INCLUDED) / len(inclusion) if inclusion else 0.0
    unmet_inc = inclusion.count(NOT_INCLUDED) / len(inclusion) if inclusion else 0.0
    met_exc = exclusion.count(EXCLUDED) / len(exclusion) if exclusion else 0.0
    relevance = round(100.0 * min(1.0, 0.15 + 0.85 * met_inc))
    eligibility = round(relevance * (met_inc - unmet_inc - 1.5 * met_exc))
    eligibility = max(-relevance, min(relevance, eligibility))
    return relevance, eligibility


def _matching_response(
    labels: Sequence[str], sentence_ids: Sequence[Sequence[int]]
) -> str:
    payload = {
        str(i): {
            "explanation": f"Sentence {sentence_ids[i % len(sentence_ids)][0]} "
            "addresses this criterion.",
            "sentences": list(sentence_ids[i % len(sentence_ids)]),
            "label": label,
        }
        for i, label in enumerate(labels)
    }
    return json.dumps(payload, sort_keys=True)


def make_demo_dataset(seed: int = 7, noise_rate: float = 0.0) -> DemoDataset:
    """Build the demo cohort, its judgments, and matching mock fixtures."""
    trial_rows = [_trial_row(i) for i in range(N_TRIALS)]
    patient_rows = [_patient_row(i) for i in range(N_PATIENTS)]
    class_rng = random.Random(seed)
    noise_rng = random.Random(seed * 7919 + 13)

    pair_classes: dict[tuple[str, str], str] = {}
    truth: dict[tuple[str, str], int] = {}
    qrels_lines: list[str] = []
    for i in range(N_PATIENTS):
        patient_id = _patient_id(i)
        matching = [j for j in range(N_TRIALS) if j % len(CONDITIONS) == i]
        shuffled = list(matching)
        class_rng.shuffle(shuffled)
        eligible_n = 3 if i % 2 == 0 else 2
        judged: dict[int, int] = {}
        for j in shuffled[:eligible_n]:
            judged[j] = ELIGIBLE_GRADE
        for j in shuffled[eligible_n:]:
            judged[j] = EXCLUDED_GRADE
        others = [j for j in range(N_TRIALS) if j % len(CONDITIONS) != i]
        for j in class_rng.sample(others, 3):
            judged[j] = IRRELEVANT_GRADE
        for j in sorted(judged):
            nct_id = _nct_id(j)
            grade = judged[j]
            truth[(patient_id, nct_id)] = grade
            qrels_lines.append(f"{patient_id} 0 {nct_id} {grade}")
        for j in range(N_TRIALS):
            nct_id = _nct_id(j)
            grade = judged.get(j)
            if grade == ELIGIBLE_GRADE:
                pair_classes[(patient_id, nct_id)] = ELIGIBLE
            elif grade == EXCLUDED_GRADE:
                pair_classes[(patient_id, nct_id)] = EXCLUDED_CLASS
            else:
                pair_classes[(patient_id, nct_id)] = IRRELEVANT

    fixture_rows: list[dict] = []
    for i in range(N_PATIENTS):
        fixture_rows.append(
            {
                "fields": {"task": "keywords", "patient": _patient_id(i)},
                "response": json.dumps(
                    {"keywords": [CONDITIONS[i], "clinical trial"]}
                ),
            }
        )
    for i in range(N_PATIENTS):
        patient_id = _patient_id(i)
        for j in range(N_TRIALS):
            nct_id = _nct_id(j)
            n_exclusions = len(trial_rows[j]["exclusion_criteria"])
            inclusion, exclusion = _true_labels(
                pair_classes[(patient_id, nct_id)], n_exclusions
            )
            inclusion = _apply_noise(inclusion, INCLUSION_LABELS, noise_rng, noise_rate)
            exclusion = _apply_noise(exclusion, EXCLUSION_LABELS, noise_rng, noise_rate)
            fixture_rows.append(
                {
                    "fields": {
                        "task": "matching",
                        "patient": patient_id,
                        "trial": nct_id,
                        "side": "inclusion",
                    },
                    "response": _matching_response(inclusion, _INCLUSION_SENTENCES),
                }
            )
            if exclusion:
                fixture_rows.append(
                    {
                        "fields": {
                            "task": "matching",
                            "patient": patient_id,
                            "trial": nct_id,
                            "side": "exclusion",
                        },
                        "response": _matching_response(
                            exclusion, _EXCLUSION_SENTENCES
                        ),
                    }
                )
            relevance, eligibility = _derived_scores(inclusion, exclusion)
            fixture_rows.append(
                {
                    "fields": {
                        "task": "aggregation",
                        "patient": patient_id,
                        "trial": nct_id,
                    },
                    "response": json.dumps(
                        {
                            "relevance_score_R": relevance,
                            "eligibility_score_S": eligibility,
                        },
                        sort_keys=True,
                    ),
                }
            )
    return DemoDataset(
        trial_rows=trial_rows,
        patient_rows=patient_rows,
        qrels_lines=qrels_lines,
        fixture_rows=fixture_rows,
        truth=truth,
    )


def write_demo_fixture(
    directory: str | Path, seed: int = 7, noise_rate: float = 0.0
) -> dict[str, Path]:
    """Write the demo dataset to a directory; returns the file paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dataset = make_demo_dataset(seed=seed, noise_rate=noise_rate)
    paths = {
        "trials": directory / "trials.jsonl",
        "patients": directory / "patients.jsonl",
        "qrels": directory / "qrels.txt",
        "fixtures": directory / "fixtures.jsonl",
        "truth": directory / "truth.json",
    }
    with paths["trials"].open("w", encoding="utf-8") as handle:
        for row in dataset.trial_rows:
            handle.write(json.dumps(row, sort_keys=True) + "\n")
    with paths["patients"].open("w", encoding="utf-8") as handle:
        for row in dataset.patient_rows:
            handle.write(json.dumps(row, sort_keys=True) + "\n")
    paths["qrels"].write_text("\n".join(dataset.qrels_lines) + "\n", encoding="utf-8")
    with paths["fixtures"].open("w", encoding="utf-8") as handle:
        for row in dataset.fixture_rows:
            handle.write(json.dumps(row, sort_keys=True) + "\n")
    paths["truth"].write_text(
        json.dumps(
            {f"{pid}\t{nct}": grade for (pid, nct), grade in dataset.truth.items()},
            sort_keys=True,
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    return paths
