#!/usr/bin/env python3
"""Run the whole matching pipeline on the bundled synthetic cohort.

Everything happens in a throwaway directory with the deterministic mock
model backend, so this prints the same numbers on every machine.
"""
import json
import tempfile
from pathlib import Path

from trialmatch.cli import main, ranking_run_file
from trialmatch.evaluation import load_run_file
from trialmatch.synthetic import write_demo_fixture

workdir = Path(tempfile.mkdtemp(prefix="trialmatch-demo-"))
demo = write_demo_fixture(workdir / "data", seed=7)
out = workdir / "out"
print(f"synthetic cohort written under {workdir}/data")
print()

trials = ["--trials", str(demo["trials"])]
patients = ["--patients", str(demo["patients"])]
qrels = ["--qrels", str(demo["qrels"])]
base = ["--out-dir", str(out)]
mock = base + ["--backend", "mock", "--fixtures", str(demo["fixtures"]), "--seed", "7"]

main(["ingest", *trials, *patients, *qrels, *base])
main(["index", *trials, *base])
main(["retrieve", *trials, *patients, "--top", "500", *mock])
main(["match", *trials, *patients, *mock])
main(["rank", *trials, *patients, "--feature", "all", *mock])
main(["evaluate", *patients, *qrels, "--task", "all", *base])
print()

# The evaluation reports land next to the stage artifacts.
report = json.loads((out / "report_ranking.json").read_text())
print("ranking metrics per patient:")
for patient_id, metrics in sorted(report["per_patient"]["default"].items()):
    line = ", ".join(f"{name}={value:.4f}" for name, value in sorted(metrics.items()))
    print(f"  {patient_id}: {line}")
print()

# Peek at one patient's final ordering under the combination feature.
runs = load_run_file(out / ranking_run_file("combination"))
titles = {
    row["nct_id"]: row["title"]
    for row in map(json.loads, demo["trials"].read_text().splitlines())
}
truth = json.loads(demo["truth"].read_text())
print("top 8 trials for patient-01 (grade 2 = eligible, 1 = excluded):")
for rank, (nct_id, score) in enumerate(runs["patient-01"].ranked[:8], 1):
    grade = truth.get(f"patient-01\t{nct_id}", "unjudged")
    print(f"  {rank}. {nct_id}  score={score:+.3f}  grade={grade}  {titles[nct_id]}")
