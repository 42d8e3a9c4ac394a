"""Patient-to-trial matching pipeline.

Three stages: hybrid keyword retrieval over a trial registry, criterion-level
eligibility matching through a chat-model gateway, and trial-level score
aggregation and ranking, plus an evaluation harness (graded recall, NDCG,
precision, AUROC) and a screening HTTP service.
"""
from .corpus import (
    Cohort,
    Criterion,
    CorpusError,
    PatientNote,
    RelevanceJudgment,
    RelevanceLabel,
    Side,
    TrialRecord,
    build_trial,
    load_cohort,
    load_patient_notes,
    load_qrels,
    parse_trial_corpus,
    segment_criteria,
    segment_sentences,
)
from .bm25 import LexicalIndex, build_lexical_index, tokenize
from .embeddings import (
    DenseIndex,
    EmbeddingError,
    FileEmbeddingProvider,
    HashEmbeddingProvider,
)
from .gateway import (
    ChatRequest,
    ChatResponse,
    ConfigurationError,
    GatewayConfig,
    GatewayError,
    LlmGateway,
    MockBackend,
    RemoteBackend,
    TransientError,
    TransportError,
)
from .retrieval import (
    FusionConfig,
    KeywordQuery,
    KeywordRanking,
    RetrievalError,
    RetrievalResult,
    dense_rank,
    fuse,
    generate_keywords,
    lexical_rank,
    make_keyword_query,
    retrieve_patient,
)
from .matching import (
    CriterionPrediction,
    MatchingConfig,
    MatchingError,
    TrialMatchResult,
    match_cohort,
    match_pair,
    parse_matching_response,
)
from .ranking import (
    BaselineCriterionVectors,
    LinearAggregates,
    LlmAggregates,
    RankingError,
    TrialScore,
    baseline_combination,
    baseline_dual_encoder_scores,
    baseline_label_map,
    combine,
    linear_aggregate,
    llm_aggregate,
    rank_trials,
)
from .evaluation import (
    EvalConfig,
    EvaluationError,
    MetricReport,
    RankedRun,
    auroc,
    evaluate_cohort,
    ndcg_at_k,
    precision_at_k,
    recall_at_k,
)
from .screening import (
    DecisionLog,
    DuplicateDecisionError,
    ScreeningAssignment,
    ScreeningDecision,
    ScreeningError,
    build_screening_assignment,
    screening_summary,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
