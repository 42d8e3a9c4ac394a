"""Read-only HTTP API over pipeline artifacts plus a decision log.

Serves everything a screening front end needs: cohort inventory, patient
notes with sentence ids, per-patient rankings by any feature, the full
criterion-level view of one pair, screening assignments, and a POST
endpoint that appends annotator decisions (with duplicate rejection) and a
CSV export of them. All state except the decision log is loaded once at
startup and never mutated.
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping

from fastapi import Depends, FastAPI, HTTPException, Request, Response

from .corpus import Cohort, TrialRecord, load_cohort
from .matching import TrialMatchResult, load_match_results, serialize_match_result
from .ranking import (
    RANKING_FEATURES,
    TrialScore,
    feature_value,
    load_trial_scores,
    serialize_trial_score,
)
from .screening import (
    DecisionLog,
    DuplicateDecisionError,
    ScreeningAssignment,
    ScreeningError,
    decision_from_row,
)


class ArtifactStore:
    """Immutable view of one cohort's pipeline outputs."""

    def __init__(
        self,
        cohort: Cohort,
        trials: Mapping[str, TrialRecord],
        matches: Mapping[tuple[str, str], TrialMatchResult],
        scores: Mapping[tuple[str, str], TrialScore],
    ) -> None:
        self.cohort = cohort
        self.trials = dict(trials)
        self.matches = dict(matches)
        self.scores = dict(scores)

    @classmethod
    def load(
        cls,
        trials_path: str | Path,
        patients_path: str | Path,
        qrels_path: str | Path | None = None,
        matches_path: str | Path | None = None,
        scores_path: str | Path | None = None,
        cohort_name: str = "default",
    ) -> "ArtifactStore":
        cohort, trials = load_cohort(
            cohort_name, trials_path, patients_path, qrels_path,
            drop_orphan_judgments=True,
        )
        matches: dict[tuple[str, str], TrialMatchResult] = {}
        if matches_path and Path(matches_path).exists():
            for result in load_match_results(matches_path):
                matches[(result.patient_id, result.nct_id)] = result
        scores: dict[tuple[str, str], TrialScore] = {}
        if scores_path and Path(scores_path).exists():
            for score in load_trial_scores(scores_path):
                scores[(score.patient_id, score.nct_id)] = score
        return cls(cohort, {t.nct_id: t for t in trials}, matches, scores)

    def patient_scores(self, patient_id: str) -> list[TrialScore]:
        return [s for (pid, _), s in self.scores.items() if pid == patient_id]


def _trial_payload(trial: TrialRecord) -> dict:
    return {
        "nct_id": trial.nct_id,
        "title": trial.title,
        "conditions": list(trial.conditions),
        "interventions": list(trial.interventions),
        "brief_summary": trial.brief_summary,
        "inclusion_criteria": [c.text for c in trial.inclusion_criteria],
        "exclusion_criteria": [c.text for c in trial.exclusion_criteria],
    }


def create_app(
    store: ArtifactStore,
    decision_log: DecisionLog | None = None,
    assignment: ScreeningAssignment | None = None,
    token: str | None = None,
) -> FastAPI:
    """Build the API app; a token makes every endpoint require Bearer auth."""

    def require_token(request: Request) -> None:
        if token and request.headers.get("authorization") != f"Bearer {token}":
            raise HTTPException(status_code=401, detail="missing or invalid token")

    app = FastAPI(title="trialmatch", dependencies=[Depends(require_token)])

    @app.get("/cohorts")
    def cohorts() -> list[dict]:
        return [
            {
                "name": store.cohort.name,
                "patients": len(store.cohort.patients),
                "judgments": len(store.cohort.judgments),
                "trials": len(store.trials),
            }
        ]

    @app.get("/patients/{patient_id}")
    def patient(patient_id: str) -> dict:
        try:
            note = store.cohort.patient(patient_id)
        except KeyError:
            raise HTTPException(404, f"unknown patient {patient_id!r}") from None
        return {
            "patient_id": note.patient_id,
            "text": note.raw_text,
            "sentences": list(note.sentences),
        }

    @app.get("/patients/{patient_id}/ranking")
    def ranking(patient_id: str, feature: str = "combination", top: int = 10) -> dict:
        if patient_id not in store.cohort.patient_ids():
            raise HTTPException(404, f"unknown patient {patient_id!r}")
        if feature not in RANKING_FEATURES:
            raise HTTPException(
                400,
                f"unknown feature {feature!r}; expected one of "
                + ", ".join(sorted(RANKING_FEATURES)),
            )
        if top < 1:
            raise HTTPException(400, "top must be >= 1")
        scores = store.patient_scores(patient_id)
        ordered = sorted(
            scores, key=lambda s: (-feature_value(s, feature), s.nct_id)
        )[:top]
        return {
            "patient_id": patient_id,
            "feature": feature,
            "trials": [
                {
                    "nct_id": score.nct_id,
                    "rank": rank,
                    "value": feature_value(score, feature),
                    "scores": serialize_trial_score(score),
                }
                for rank, score in enumerate(ordered, 1)
            ],
        }

    @app.get("/match/{patient_id}/{nct_id}")
    def match(patient_id: str, nct_id: str) -> dict:
        if patient_id not in store.cohort.patient_ids():
            raise HTTPException(404, f"unknown patient {patient_id!r}")
        trial = store.trials.get(nct_id)
        if trial is None:
            raise HTTPException(404, f"unknown trial {nct_id!r}")
        result = store.matches.get((patient_id, nct_id))
        if result is None:
            raise HTTPException(404, f"no match result for {patient_id}/{nct_id}")
        payload = serialize_match_result(result)
        payload["trial"] = _trial_payload(trial)
        score = store.scores.get((patient_id, nct_id))
        payload["scores"] = serialize_trial_score(score) if score else None
        return payload

    @app.get("/assignments/{annotator_id}")
    def assignments(annotator_id: str) -> dict:
        if assignment is None:
            raise HTTPException(404, "no screening assignment configured")
        try:
            tasks = assignment.tasks_for(annotator_id)
        except KeyError:
            raise HTTPException(404, f"unknown annotator {annotator_id!r}") from None
        return {
            "annotator_id": annotator_id,
            "tasks": [
                {
                    "patient_id": task.patient_id,
                    "nct_id": task.nct_id,
                    "assisted": task.assisted,
                }
                for task in tasks
            ],
        }

    @app.post("/decisions", status_code=201)
    def post_decision(body: dict) -> dict:
        if decision_log is None:
            raise HTTPException(503, "decision log not configured")
        try:
            decision = decision_from_row(body)
        except ScreeningError as exc:
            raise HTTPException(400, str(exc)) from None
        try:
            recorded = decision_log.append(decision)
        except DuplicateDecisionError as exc:
            raise HTTPException(409, str(exc)) from None
        return {"status": "recorded", "timestamp": recorded.timestamp}

    @app.get("/decisions/export")
    def export_decisions() -> Response:
        if decision_log is None:
            raise HTTPException(503, "decision log not configured")
        return Response(content=decision_log.export_csv(), media_type="text/csv")

    return app
