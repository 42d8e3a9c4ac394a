"""Command-line pipeline driver.

Subcommands mirror the pipeline stages: ingest, index, retrieve, match,
rank, evaluate, serve. Stages read and write well-known file names under
--out-dir so each one validates its predecessors, and every stage accepts
--config (TOML or JSON), --seed, and, where a model is involved,
--backend {remote,mock}.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bm25 import LexicalIndex, build_lexical_index
from .corpus import (
    CorpusError,
    SIGIR_QRELS_VOCAB,
    TREC_QRELS_VOCAB,
    load_cohort,
    load_patient_notes,
    parse_trial_corpus,
)
from .embeddings import (
    DenseIndex,
    EmbeddingError,
    FileEmbeddingProvider,
    HashEmbeddingProvider,
    load_embedding_file,
)
from .evaluation import (
    EvalConfig,
    EvaluationError,
    RankedRun,
    TASKS,
    evaluate_cohort,
    load_run_file,
    write_run_file,
)
from .gateway import (
    ConfigurationError,
    GatewayConfig,
    GatewayError,
    LlmGateway,
    MockBackend,
    RemoteBackend,
)
from .matching import MatchingConfig, MatchingError, load_match_results, match_cohort
from .ranking import (
    RANKING_FEATURES,
    RankingError,
    TrialScore,
    feature_value,
    linear_aggregate,
    llm_aggregate,
    load_trial_scores,
    write_trial_scores,
)
from .retrieval import FusionConfig, RetrievalError, retrieve_patient
from .screening import DecisionLog, ScreeningAssignment, ScreeningError

LEXICAL_INDEX_FILE = "lexical_index.json"
DENSE_INDEX_FILE = "dense_index.json"
RETRIEVAL_FILE = "retrieval.jsonl"
RETRIEVAL_RUN_FILE = "run_retrieval.txt"
MATCHES_FILE = "matches.jsonl"
MATCH_SUMMARY_FILE = "match_summary.json"
SCORES_FILE = "scores.jsonl"
EXCLUDING_RUN_FILE = "run_excluding.txt"
INGEST_REPORT_FILE = "ingest_report.json"
CACHE_FILE = "llm_cache.jsonl"

QRELS_VOCABS = {"trec": TREC_QRELS_VOCAB, "sigir": SIGIR_QRELS_VOCAB}

USER_ERRORS = (
    CorpusError,
    EmbeddingError,
    EvaluationError,
    GatewayError,
    MatchingError,
    RankingError,
    RetrievalError,
    ScreeningError,
    ConfigurationError,
)


class CliError(SystemExit):
    def __init__(self, message: str) -> None:
        print(f"error: {message}", file=sys.stderr)
        super().__init__(2)


def ranking_run_file(feature: str) -> str:
    return f"run_ranking_{feature}.txt"


def _require_file(path: str | Path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"missing {what}: {path}")
    return path


def _load_config_file(path: str) -> dict:
    config_path = _require_file(path, "config file")
    text = config_path.read_text(encoding="utf-8")
    if config_path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        return tomllib.loads(text)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {config_path} is not valid JSON: {exc.msg}")


class Options:
    """Layered option lookup: CLI flag, then config file, then default."""

    def __init__(self, args: argparse.Namespace, config: dict) -> None:
        self._args = args
        self._config = config

    def get(self, name: str, default=None):
        value = getattr(self._args, name, None)
        if value is not None:
            return value
        if name in self._config:
            return self._config[name]
        return default


def _out_dir(options: Options) -> Path:
    out_dir = options.get("out_dir")
    if not out_dir:
        raise CliError("--out-dir is required")
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _build_gateway(options: Options, out_dir: Path) -> LlmGateway:
    backend_name = str(options.get("backend", "mock"))
    if backend_name == "mock":
        backend = MockBackend()
        fixtures = options.get("fixtures")
        if fixtures:
            backend.load_fixtures(_require_file(fixtures, "mock fixture file"))
    elif backend_name == "remote":
        backend = RemoteBackend.from_env()
    else:
        raise CliError(f"unknown backend {backend_name!r}; expected mock or remote")
    seed = options.get("seed")
    config = GatewayConfig(
        max_in_flight=int(options.get("max_in_flight", 8)),
        requests_per_second=options.get("requests_per_second"),
        retry_jitter_seed=int(seed) if seed is not None else None,
    )
    return LlmGateway(backend, cache_path=out_dir / CACHE_FILE, config=config)


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    with path.open("w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _qrels_vocab(options: Options):
    name = str(options.get("qrels_vocab", "trec"))
    try:
        return QRELS_VOCABS[name]
    except KeyError:
        raise CliError(f"unknown qrels vocabulary {name!r}; expected trec or sigir")


def cmd_ingest(args: argparse.Namespace, config: dict) -> int:
    options = Options(args, config)
    out_dir = _out_dir(options)
    trials_path = _require_file(options.get("trials"), "trials file")
    patients_path = _require_file(options.get("patients"), "patients file")
    qrels = options.get("qrels")
    qrels_path = _require_file(qrels, "qrels file") if qrels else None
    cohort, trials = load_cohort(
        str(options.get("cohort_name", "default")),
        trials_path,
        patients_path,
        qrels_path,
        vocab=_qrels_vocab(options),
        drop_orphan_judgments=True,
    )
    label_counts: dict[str, int] = {}
    for judgment in cohort.judgments:
        label_counts[judgment.label.value] = label_counts.get(judgment.label.value, 0) + 1
    report = {
        "cohort": cohort.name,
        "patients": len(cohort.patients),
        "trials": len(trials),
        "judgments": len(cohort.judgments),
        "judgment_labels": label_counts,
        "inclusion_criteria": sum(len(t.inclusion_criteria) for t in trials),
        "exclusion_criteria": sum(len(t.exclusion_criteria) for t in trials),
    }
    _write_json(out_dir / INGEST_REPORT_FILE, report)
    print(f"ingested {report['patients']} patients, {report['trials']} trials")
    return 0


def cmd_index(args: argparse.Namespace, config: dict) -> int:
    options = Options(args, config)
    out_dir = _out_dir(options)
    trials = parse_trial_corpus(_require_file(options.get("trials"), "trials file"))
    lexical = build_lexical_index(
        trials,
        k1=float(options.get("k1", 1.5)),
        b=float(options.get("b", 0.75)),
    )
    lexical.save(out_dir / LEXICAL_INDEX_FILE)
    similarity = str(options.get("similarity", "dot"))
    embeddings = options.get("embeddings")
    if embeddings:
        vectors, _dim = load_embedding_file(
            _require_file(embeddings, "embeddings file")
        )
        missing = [t.nct_id for t in trials if t.nct_id not in vectors]
        if missing:
            raise CliError(
                f"embeddings file lacks vectors for {len(missing)} trial(s), "
                f"first missing: {missing[0]}"
            )
        dense = DenseIndex.from_vectors(
            {t.nct_id: vectors[t.nct_id] for t in trials},
            provider=None,
            similarity=similarity,
            provider_hint="external",
        )
    else:
        provider = HashEmbeddingProvider(int(options.get("dim", 64)))
        dense = DenseIndex.build(trials, provider, similarity, provider_hint="hash")
    dense.save(out_dir / DENSE_INDEX_FILE)
    print(
        f"indexed {lexical.doc_count} trials "
        f"({lexical.vocabulary_size} lexical terms, dense dim {dense.dim})"
    )
    return 0


def cmd_retrieve(args: argparse.Namespace, config: dict) -> int:
    options = Options(args, config)
    out_dir = _out_dir(options)
    _require_file(options.get("trials"), "trials file")
    notes = load_patient_notes(_require_file(options.get("patients"), "patients file"))
    lexical = LexicalIndex.load(
        _require_file(out_dir / LEXICAL_INDEX_FILE, "lexical index (run `index` first)")
    )
    dense = None
    if not options.get("no_dense"):
        dense_path = out_dir / DENSE_INDEX_FILE
        if dense_path.is_file():
            embeddings = options.get("embeddings")
            provider = (
                FileEmbeddingProvider(_require_file(embeddings, "embeddings file"))
                if embeddings
                else None
            )
            dense = DenseIndex.load(dense_path, provider)
    fusion = FusionConfig(
        rrf_constant=float(options.get("rrf_constant", 20.0)),
        per_keyword_cutoff=int(options.get("cutoff", 1000)),
        candidate_count=int(options.get("top", 500)),
    )
    gateway = _build_gateway(options, out_dir)
    model = options.get("model")
    rows: list[dict] = []
    runs: list[RankedRun] = []
    for note in sorted(notes, key=lambda n: n.patient_id):
        query, result = retrieve_patient(note, lexical, dense, gateway, fusion, model)
        rows.append(
            {
                "patient_id": note.patient_id,
                "keywords": list(query.keywords),
                "scored": [[nct_id, score] for nct_id, score in result.scored],
                "dense_skipped": result.dense_skipped,
            }
        )
        runs.append(RankedRun(note.patient_id, result.scored))
    _write_jsonl(out_dir / RETRIEVAL_FILE, rows)
    write_run_file(out_dir / RETRIEVAL_RUN_FILE, runs, tag="retrieval")
    print(f"retrieved candidates for {len(rows)} patients")
    return 0


def _load_candidates(out_dir: Path) -> dict[str, list[str]]:
    retrieval_path = _require_file(
        out_dir / RETRIEVAL_FILE, "retrieval output (run `retrieve` first)"
    )
    candidates: dict[str, list[str]] = {}
    with retrieval_path.open(encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            row = json.loads(line)
            candidates[row["patient_id"]] = [nct for nct, _ in row["scored"]]
    return candidates


def cmd_match(args: argparse.Namespace, config: dict) -> int:
    options = Options(args, config)
    out_dir = _out_dir(options)
    trials = parse_trial_corpus(_require_file(options.get("trials"), "trials file"))
    patients_path = _require_file(options.get("patients"), "patients file")
    cohort, _ = load_cohort("default", options.get("trials"), patients_path)
    candidates = _load_candidates(out_dir)
    gateway = _build_gateway(options, out_dir)
    summary = match_cohort(
        cohort,
        candidates,
        {t.nct_id: t for t in trials},
        gateway,
        out_dir / MATCHES_FILE,
        parallelism=int(options.get("parallelism", 4)),
        config=MatchingConfig(model=options.get("model")),
    )
    _write_json(out_dir / MATCH_SUMMARY_FILE, summary)
    print(
        f"matched {summary['completed']}/{summary['pairs_total']} pairs "
        f"({summary['reused']} reused, {summary['failed']} failed)"
    )
    return 0 if summary["failed"] == 0 else 1


def cmd_rank(args: argparse.Namespace, config: dict) -> int:
    options = Options(args, config)
    out_dir = _out_dir(options)
    trials = parse_trial_corpus(_require_file(options.get("trials"), "trials file"))
    trials_by_id = {t.nct_id: t for t in trials}
    notes = {
        n.patient_id: n
        for n in load_patient_notes(
            _require_file(options.get("patients"), "patients file")
        )
    }
    results = load_match_results(
        _require_file(out_dir / MATCHES_FILE, "match output (run `match` first)")
    )
    gateway = _build_gateway(options, out_dir)
    model = options.get("model")
    scores: list[TrialScore] = []
    for result in results:
        note = notes.get(result.patient_id)
        trial = trials_by_id.get(result.nct_id)
        if note is None or trial is None:
            raise CliError(
                f"match result references unknown pair "
                f"{result.patient_id}/{result.nct_id}"
            )
        linear = linear_aggregate(result)
        llm = llm_aggregate(note, trial, result, gateway, model=model)
        scores.append(
            TrialScore.from_parts(result.patient_id, result.nct_id, linear, llm)
        )
    write_trial_scores(out_dir / SCORES_FILE, scores)
    by_patient: dict[str, list[TrialScore]] = {}
    for score in scores:
        by_patient.setdefault(score.patient_id, []).append(score)
    feature_arg = str(options.get("feature", "combination"))
    features = sorted(RANKING_FEATURES) if feature_arg == "all" else [feature_arg]
    for feature in features:
        if feature not in RANKING_FEATURES:
            raise CliError(
                f"unknown feature {feature!r}; expected one of "
                + ", ".join(sorted(RANKING_FEATURES)) + ", all"
            )
        runs = [
            RankedRun.from_scores(
                patient_id,
                [(s.nct_id, feature_value(s, feature)) for s in patient_scores],
            )
            for patient_id, patient_scores in sorted(by_patient.items())
        ]
        write_run_file(
            out_dir / ranking_run_file(feature), runs, tag=f"ranking-{feature}"
        )
    excluding_runs = [
        RankedRun.from_scores(
            patient_id, [(s.nct_id, s.exclusion_score) for s in patient_scores]
        )
        for patient_id, patient_scores in sorted(by_patient.items())
    ]
    write_run_file(out_dir / EXCLUDING_RUN_FILE, excluding_runs, tag="excluding")
    print(f"scored {len(scores)} pairs for {len(by_patient)} patients")
    return 0


def cmd_evaluate(args: argparse.Namespace, config: dict) -> int:
    options = Options(args, config)
    out_dir = _out_dir(options)
    patients_path = _require_file(options.get("patients"), "patients file")
    qrels_path = _require_file(options.get("qrels"), "qrels file")
    notes = load_patient_notes(patients_path)
    from .corpus import Cohort, load_qrels

    judgments = load_qrels(qrels_path, _qrels_vocab(options))
    known = {n.patient_id for n in notes}
    cohort = Cohort(
        name=str(options.get("cohort_name", "default")),
        patients=tuple(notes),
        judgments=tuple(j for j in judgments if j.patient_id in known),
    )
    task_arg = str(options.get("task", "all"))
    tasks = list(TASKS) if task_arg == "all" else [task_arg]
    eval_config = EvalConfig(
        unjudged_policy=str(options.get("unjudged", "exclude")),
    )
    feature = str(options.get("feature", "combination"))
    run_files = {
        "retrieval": out_dir / RETRIEVAL_RUN_FILE,
        "ranking": out_dir / ranking_run_file(feature),
        "excluding": out_dir / EXCLUDING_RUN_FILE,
    }
    exit_code = 0
    for task in tasks:
        if task not in TASKS:
            raise CliError(f"unknown task {task!r}; expected one of {', '.join(TASKS)}, all")
        run_path = _require_file(run_files[task], f"{task} run file")
        runs = load_run_file(run_path)
        report = evaluate_cohort(cohort, runs, task, eval_config)
        (out_dir / f"report_{task}.json").write_text(
            report.to_json() + "\n", encoding="utf-8"
        )
        (out_dir / f"report_{task}.txt").write_text(
            report.to_table(), encoding="utf-8"
        )
        print(f"[{task}] " + ", ".join(f"{k}={v:.4f}" for k, v in sorted(report.macro.items())))
    return exit_code


def cmd_serve(args: argparse.Namespace, config: dict) -> int:
    options = Options(args, config)
    out_dir = _out_dir(options)
    from .service import ArtifactStore, create_app

    store = ArtifactStore.load(
        trials_path=_require_file(options.get("trials"), "trials file"),
        patients_path=_require_file(options.get("patients"), "patients file"),
        qrels_path=options.get("qrels"),
        matches_path=out_dir / MATCHES_FILE,
        scores_path=out_dir / SCORES_FILE,
        cohort_name=str(options.get("cohort_name", "default")),
    )
    assignment = None
    assignments_path = options.get("assignments")
    if assignments_path:
        assignment = ScreeningAssignment.load(
            _require_file(assignments_path, "assignments file")
        )
    log_path = options.get("decision_log") or out_dir / "decisions.jsonl"
    app = create_app(
        store,
        decision_log=DecisionLog(log_path),
        assignment=assignment,
        token=options.get("token"),
    )
    import uvicorn

    uvicorn.run(
        app,
        host=str(options.get("host", "127.0.0.1")),
        port=int(options.get("port", 8000)),
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trialmatch",
        description="Patient-to-trial matching pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--out-dir", help="directory for stage artifacts")
        p.add_argument("--config", help="TOML or JSON config file")
        p.add_argument("--seed", type=int, help="seed for stochastic components")

    def gateway_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--backend", choices=("mock", "remote"), help="model backend")
        p.add_argument("--fixtures", help="mock fixture file (JSONL)")
        p.add_argument("--model", help="model name override")
        p.add_argument("--max-in-flight", type=int, dest="max_in_flight")
        p.add_argument(
            "--requests-per-second", type=float, dest="requests_per_second"
        )

    p = sub.add_parser("ingest", help="validate inputs and report corpus stats")
    p.add_argument("--trials")
    p.add_argument("--patients")
    p.add_argument("--qrels")
    p.add_argument("--qrels-vocab", choices=("trec", "sigir"), dest="qrels_vocab")
    p.add_argument("--cohort-name", dest="cohort_name")
    common(p)
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("index", help="build the lexical and dense indexes")
    p.add_argument("--trials")
    p.add_argument("--embeddings", help="precomputed trial vectors (JSONL)")
    p.add_argument("--dim", type=int, help="hash embedder dimensionality")
    p.add_argument("--similarity", choices=("dot", "cosine"))
    p.add_argument("--k1", type=float)
    p.add_argument("--b", type=float)
    common(p)
    p.set_defaults(handler=cmd_index)

    p = sub.add_parser("retrieve", help="generate keywords and fuse rankings")
    p.add_argument("--trials")
    p.add_argument("--patients")
    p.add_argument("--embeddings", help="precomputed keyword vectors (JSONL)")
    p.add_argument("--top", type=int, help="candidate count per patient")
    p.add_argument("--cutoff", type=int, help="per-keyword ranking cutoff")
    p.add_argument("--rrf-constant", type=float, dest="rrf_constant")
    p.add_argument("--no-dense", action="store_true", dest="no_dense", default=None)
    gateway_flags(p)
    common(p)
    p.set_defaults(handler=cmd_retrieve)

    p = sub.add_parser("match", help="predict criterion-level eligibility")
    p.add_argument("--trials")
    p.add_argument("--patients")
    p.add_argument("--parallelism", type=int)
    gateway_flags(p)
    common(p)
    p.set_defaults(handler=cmd_match)

    p = sub.add_parser("rank", help="aggregate scores and write ranked runs")
    p.add_argument("--trials")
    p.add_argument("--patients")
    p.add_argument("--feature", help="ranking feature or 'all'")
    gateway_flags(p)
    common(p)
    p.set_defaults(handler=cmd_rank)

    p = sub.add_parser("evaluate", help="score runs against judgments")
    p.add_argument("--patients")
    p.add_argument("--qrels")
    p.add_argument("--qrels-vocab", choices=("trec", "sigir"), dest="qrels_vocab")
    p.add_argument("--task", help="retrieval, ranking, excluding, or all")
    p.add_argument("--feature", help="which ranking run to evaluate")
    p.add_argument("--unjudged", choices=("exclude", "grade0"))
    p.add_argument("--cohort-name", dest="cohort_name")
    common(p)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("serve", help="serve artifacts over HTTP")
    p.add_argument("--trials")
    p.add_argument("--patients")
    p.add_argument("--qrels")
    p.add_argument("--assignments", help="screening assignment file (JSON)")
    p.add_argument("--decision-log", dest="decision_log")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--token", help="static bearer token for all endpoints")
    p.add_argument("--cohort-name", dest="cohort_name")
    common(p)
    p.set_defaults(handler=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    config = _load_config_file(args.config) if getattr(args, "config", None) else {}
    try:
        return args.handler(args, config)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename or exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
