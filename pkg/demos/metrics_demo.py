#!/usr/bin/env python3
"""Walk through the ranking metrics on tiny hand-checkable examples."""
import math

from trialmatch.corpus import Cohort, PatientNote, RelevanceJudgment, RelevanceLabel
from trialmatch.evaluation import (
    RankedRun,
    auroc,
    evaluate_cohort,
    merge_reports,
    ndcg_at_k,
    precision_at_k,
    recall_at_k,
)

# A ranked run is just trials in descending score order. Judgments are
# grades: 2 for eligible, 1 for excluded or potential, 0 for irrelevant.
run = RankedRun.from_scores(
    "demo-patient",
    [("NCT-A", 0.9), ("NCT-C", 0.8), ("NCT-B", 0.7), ("NCT-D", 0.6)],
)
grades = {"NCT-A": 2, "NCT-B": 1, "NCT-C": 0}
print("run order:", " > ".join(run.trial_ids()))
print("grades:", grades, "(NCT-D is unjudged)")
print()

# Recall@k is the share of the total judged gain sitting in the top k.
# Total gain here is 3; the top 2 positions hold NCT-A only.
print("recall@1:", recall_at_k(run, grades, 1))  # 2/3
print("recall@2:", recall_at_k(run, grades, 2))  # still 2/3, NCT-C has grade 0
print("recall@3:", recall_at_k(run, grades, 3))  # 3/3
print()

# NDCG@k divides the discounted gain of the actual order by the ideal one.
# Actual gains top-3 are [2, 0, 1] -> 2 + 0 + 1/log2(4) = 2.5; the ideal
# ordering [2, 1, 0] earns 2 + 1/log2(3).
ideal = 2 + 1 / math.log2(3)
print("ndcg@3:", ndcg_at_k(run, grades, 3))
print("by hand:", 2.5 / ideal)
print()

# Precision@k normalizes the top-k gain by the best possible gain 2*k,
# so unjudged trials in the window count against the run.
print("precision@4:", precision_at_k(run, grades, 4))  # (2+0+1+0)/8
print()

# AUROC for the exclusion screen takes (score, is_positive) pairs and
# returns the probability that a positive outranks a negative.
pairs = [(4.0, 1), (3.0, 0), (2.0, 1), (1.0, 0)]
print("auroc interleaved:", auroc(pairs))  # 3 of 4 pairs ordered right
print("auroc with all scores tied:", auroc([(1.0, 1), (1.0, 0), (1.0, 1)]))
print()

# evaluate_cohort applies the metrics patient by patient and averages.
def judgment(pid, nct, label):
    return RelevanceJudgment.from_label(pid, nct, RelevanceLabel(label))

cohort = Cohort(
    name="demo",
    patients=(
        PatientNote.from_text("p1", "A 61 year old woman with melanoma."),
        PatientNote.from_text("p2", "A 45 year old man with lung cancer."),
    ),
    judgments=(
        judgment("p1", "NCT-A", "eligible"),
        judgment("p1", "NCT-B", "excluded"),
        judgment("p1", "NCT-C", "irrelevant"),
        judgment("p2", "NCT-D", "eligible"),
        judgment("p2", "NCT-E", "irrelevant"),
    ),
)
runs = {
    "p1": RankedRun.from_scores("p1", [("NCT-A", 3.0), ("NCT-B", 2.0), ("NCT-C", 1.0)]),
    "p2": RankedRun.from_scores("p2", [("NCT-E", 2.0), ("NCT-D", 1.0)]),
}
report = evaluate_cohort(cohort, runs, task="ranking")
print("single cohort, ranking task:")
print(report.to_table())

# merge_reports macro-averages across cohorts evaluated separately.
other = Cohort(
    name="second",
    patients=(PatientNote.from_text("q1", "A 70 year old man with diabetes."),),
    judgments=(
        judgment("q1", "NCT-F", "eligible"),
        judgment("q1", "NCT-G", "irrelevant"),
    ),
)
other_runs = {
    "q1": RankedRun.from_scores("q1", [("NCT-F", 1.0), ("NCT-G", 0.5)])
}
merged = merge_reports(
    [report, evaluate_cohort(other, other_runs, task="ranking")]
)
print("two cohorts merged (macro = mean of cohort means):")
print(merged.to_table())
