#!/usr/bin/env python3
"""Simulate a two-annotator screening study and summarize the timings.

Each patient-trial pair is reviewed twice: once with the pipeline's
criterion annotations on screen (assisted) and once from the raw documents
(unassisted), by different annotators. The summary then compares review
times and, when a gold answer key exists, per-mode accuracy.
"""
import json
import tempfile
from pathlib import Path

from trialmatch.screening import (
    DecisionLog,
    ScreeningDecision,
    build_screening_assignment,
    screening_summary,
)

# 36 pairs across 6 patients and 6 trials, reviewed by two annotators.
pairs = [
    (f"patient-{p:02d}", f"NCT{t:08d}") for p in range(1, 7) for t in range(1, 7)
]
assignment = build_screening_assignment(pairs, ("ann-A", "ann-B"), seed=11)
for annotator in assignment.annotators:
    tasks = assignment.tasks_for(annotator)
    assisted = sum(task.assisted for task in tasks)
    print(f"{annotator}: {len(tasks)} reviews, {assisted} assisted")
print()

# Simulated review times. Unassisted reads alternate between a quick and a
# slow document (mean 61.5 s); assisted reads do the same but faster
# (mean 35.3 s). The true answer is "maybe" for every pair; unassisted
# reviewers miss six of them.
answer_key = {pair: "maybe" for pair in pairs}
unassisted_ms = [55_000, 68_000]
assisted_ms = [32_000, 38_600]
counters = {True: 0, False: 0}
misses = 0
decisions = []
for task in assignment.tasks:
    n = counters[task.assisted]
    counters[task.assisted] += 1
    if not task.assisted and misses < 6 and n % 6 == 0:
        verdict = "no"
        misses += 1
    else:
        verdict = "maybe"
    decisions.append(
        ScreeningDecision(
            patient_id=task.patient_id,
            nct_id=task.nct_id,
            decision=verdict,
            assisted=task.assisted,
            elapsed_ms=(assisted_ms if task.assisted else unassisted_ms)[n % 2],
            annotator_id=task.annotator_id,
        )
    )

# The log persists every decision as JSONL and rejects duplicates.
workdir = Path(tempfile.mkdtemp(prefix="trialmatch-screening-"))
log = DecisionLog(workdir / "decisions.jsonl")
for decision in decisions:
    log.append(decision)
reloaded = DecisionLog(workdir / "decisions.jsonl")
print(f"logged {len(reloaded.decisions())} decisions to {log.path}")
print()

summary = screening_summary(reloaded.decisions(), answer_key=answer_key)
overall = summary["overall"]
print("overall timings:")
print(f"  unassisted mean: {overall['unassisted_mean_ms'] / 1000:.1f} s")
print(f"  assisted mean:   {overall['assisted_mean_ms'] / 1000:.1f} s")
print(f"  time saving:     {overall['time_saving']:.1%}")
print("accuracy by mode:", summary["accuracy"])
print()

# Per-annotator cells carry the same fields, so imbalances show up fast.
print("by annotator:")
print(json.dumps(summary["by_annotator"], indent=2, sort_keys=True))
print()

# A balanced miniature where assistance exactly halves every review time:
# the saving is then 50% overall and within every grouping.
halved = []
for i, (unassisted, annotator) in enumerate(
    zip([40_000, 60_000, 60_000, 40_000], ["ann-A", "ann-A", "ann-B", "ann-B"])
):
    other = "ann-B" if annotator == "ann-A" else "ann-A"
    pair = {"patient_id": f"case-{i}", "nct_id": f"NCT9000000{i}"}
    halved.append(
        ScreeningDecision(
            decision="maybe",
            assisted=True,
            elapsed_ms=unassisted // 2,
            annotator_id=annotator,
            **pair,
        )
    )
    halved.append(
        ScreeningDecision(
            decision="maybe",
            assisted=False,
            elapsed_ms=unassisted,
            annotator_id=other,
            **pair,
        )
    )
balanced = screening_summary(halved)
print("halved-time miniature, saving per grouping:")
print("  overall:", balanced["overall"]["time_saving"])
for grouping in ("by_case", "by_trial", "by_annotator"):
    savings = {
        name: cell["time_saving"] for name, cell in balanced[grouping].items()
    }
    print(f"  {grouping}:", savings)
