"""
Command-line entry point.

Each subcommand is a thin shell over one library operation. Results go to
stdout as JSON lines; progress and diagnostics go to stderr.
"""

from typing import Dict, List, Optional, Sequence, Tuple
from dataclasses import dataclass, field, replace
import argparse
import json
import logging
import os
import sys

import yaml

# Add the parent directory to the path to import our modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from cascade_pipeline import CascadePipeline
from core_model import (
    CascadeError,
    ConfigError,
    FALL_BACK,
    InputFormatError,
    Item,
    PipelineConfig,
    RERANK_LISTWISE,
    RERANK_MODES,
    RERANK_NONE,
    RERANK_PAIRWISE,
    ROLE_CANDIDATE,
    ROLE_QUERY,
    EcrTrace,
    EmbeddingMatrix,
    derive_seed,
    read_embeddings,
    read_items_jsonl,
    read_jsonl,
    read_traces_jsonl,
    validate_corpus,
)
from evaluation import (
    ExperimentConfig,
    ExperimentRunner,
    SyntheticCorpus,
    SyntheticCorpusSpec,
    generate_synthetic_corpus,
    mine_toy_variants,
    train_toy_embedder,
)
from hard_negative_miner import (
    DEFAULT_M,
    HardNegativeMiner,
    parse_weight_scheme,
    read_mined_dataset,
)
from reasoning_gateway import (
    BackendDescriptor,
    KIND_LISTWISE,
    KIND_PAIRWISE,
    KIND_ZERO_SHOT,
    PromptTemplates,
    ReasoningGateway,
    SimBackendConfig,
)
from vector_index import Index, build_index, full_scan_top_k, save_index

logger = logging.getLogger("cascade")

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DEFAULT_CONFIG_PATH = os.path.join(REPO_ROOT, "config", "cascade.yaml")
DEFAULT_EXPERIMENT_PATH = os.path.join(REPO_ROOT, "config", "experiment.yaml")
EXIT_INTERRUPTED = 130

DEFAULT_PATHS = {
    "corpus": "data/corpus.jsonl",
    "candidate_embeddings": "data/candidates.crv",
    "query_embeddings": "data/queries.crv",
    "ecr_store": "data/ecr.jsonl",
    "judgments": "data/judgments.jsonl",
    "pairs": "data/pairs.jsonl",
    "cache_dir": ".cascade_cache",
    "output_dir": "out",
    "templates": os.path.join(REPO_ROOT, "config", "templates.yaml"),
}

# environment variable -> (PipelineConfig field, parser)
ENV_OVERRIDES = {
    "CASCADE_TOP_K": ("top_k", int),
    "CASCADE_ALPHA": ("alpha", float),
    "CASCADE_TAU": ("tau", float),
    "CASCADE_MINED_K": ("mined_k", int),
    "CASCADE_SEED": ("rng_seed", int),
    "CASCADE_RERANK_MODE": ("rerank_mode", str),
}


@dataclass(frozen=True)
class AppConfig:
    paths: Dict[str, str]
    backends: Tuple[BackendDescriptor, ...]
    defaults: PipelineConfig
    logging_level: str = "INFO"
    sim: Dict[str, SimBackendConfig] = field(default_factory=dict)

    def __post_init__(self):
        ids = [b.backend_id for b in self.backends]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise ConfigError(f"Duplicate backend ids: {', '.join(dupes)}")


def setup_logging(level: str = "INFO"):
    """Timestamped human diagnostics on stderr."""
    numeric = logging.getLevelName(str(level).upper())
    if not isinstance(numeric, int):
        raise ConfigError(f"Unknown log level '{level}'")
    logging.basicConfig(
        level=numeric,
        format="[%(asctime)s] %(message)s",
        datefmt="%H:%M:%S",
        stream=sys.stderr,
        force=True,
    )


def load_app_config(path: Optional[str] = None, environ: Optional[Dict[str, str]] = None) -> AppConfig:
    """
    Load the application config.

    Precedence below the command line: config file, then CASCADE_*
    environment variables, then built-in defaults.
    """
    environ = os.environ if environ is None else environ
    explicit = path is not None
    path = path or DEFAULT_CONFIG_PATH
    data: Dict = {}
    if os.path.exists(path):
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from e
    elif explicit:
        raise ConfigError(f"Config file not found: {path}")
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")

    defaults: Dict = {}
    for var, (name, parse) in ENV_OVERRIDES.items():
        if var in environ:
            try:
                defaults[name] = parse(environ[var])
            except ValueError:
                raise ConfigError(f"{var}={environ[var]!r} is not a valid {name}") from None
    defaults.update(data.get("defaults") or {})

    paths = dict(DEFAULT_PATHS)
    if "CASCADE_OUTPUT_DIR" in environ:
        paths["output_dir"] = environ["CASCADE_OUTPUT_DIR"]
    paths.update(data.get("paths") or {})

    return AppConfig(
        paths=paths,
        backends=tuple(BackendDescriptor.from_dict(b) for b in data.get("backends") or []),
        defaults=PipelineConfig.from_dict(defaults),
        logging_level=data.get("logging_level") or environ.get("CASCADE_LOG_LEVEL", "INFO"),
        sim={bid: SimBackendConfig.from_dict(cfg) for bid, cfg in (data.get("sim") or {}).items()},
    )


def emit(record: Dict):
    """One JSON line on stdout."""
    sys.stdout.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
    sys.stdout.flush()


def _path(app: AppConfig, args: argparse.Namespace, name: str) -> str:
    return getattr(args, name, None) or app.paths[name]


def build_gateway(app: AppConfig, args: argparse.Namespace) -> ReasoningGateway:
    sim = dict(app.sim)
    seed = getattr(args, "seed", None)
    if seed is not None:
        sim = {b.backend_id: replace(sim.get(b.backend_id, SimBackendConfig()),
                                     seed=derive_seed(seed, f"sim:{b.backend_id}"))
               for b in app.backends if b.endpoint == "sim"}
    return ReasoningGateway(
        app.backends,
        templates=PromptTemplates.load(app.paths.get("templates")),
        sim_configs=sim,
        cache_dir=getattr(args, "cache_dir", None) or app.paths.get("cache_dir"),
        cache_enabled=not getattr(args, "no_cache", False),
    )


def resolve_backend(app: AppConfig, requested: Optional[str], kinds: Sequence[str], fallback: str) -> str:
    """``sim`` names the first configured simulated backend of a usable kind."""
    if requested is None:
        return fallback
    if requested == "sim":
        for backend in app.backends:
            if backend.endpoint == "sim" and backend.kind in kinds:
                return backend.backend_id
        raise ConfigError(f"No simulated backend of kind {' or '.join(kinds)} is configured")
    return requested


@dataclass
class WorkingSet:
    queries: Dict[str, Item]
    candidates: Dict[str, Item]
    index: Index
    query_embeddings: EmbeddingMatrix
    ecr_store: Dict[str, EcrTrace]


def load_working_set(app: AppConfig, args: argparse.Namespace) -> WorkingSet:
    items = read_items_jsonl(_path(app, args, "corpus"))
    queries = {i.id: i for i in items if i.role == ROLE_QUERY}
    candidates = [i for i in items if i.role == ROLE_CANDIDATE]
    embeddings = read_embeddings(_path(app, args, "candidate_embeddings"))
    ecr_store = read_traces_jsonl(_path(app, args, "ecr_store"))
    report = validate_corpus(candidates, embeddings, ecr_store)
    if not report.ok:
        shown = "; ".join(f"{kind} {item_id}: {detail}" for kind, item_id, detail in report.violations[:5])
        raise InputFormatError(f"Corpus failed validation ({len(report.violations)} violations): {shown}")
    logger.info(f"✓ Loaded {len(queries)} queries and {len(candidates)} candidates")
    return WorkingSet(
        queries=queries,
        candidates={c.id: c for c in candidates},
        index=build_index(embeddings),
        query_embeddings=read_embeddings(_path(app, args, "query_embeddings")),
        ecr_store=ecr_store,
    )


def pipeline_config(app: AppConfig, args: argparse.Namespace, mode: str, serve: bool) -> PipelineConfig:
    cfg = app.defaults
    updates = {"rerank_mode": mode}
    if args.top_k is not None:
        updates["top_k"] = args.top_k
    if args.seed is not None:
        updates["rng_seed"] = args.seed
    qar = getattr(args, "qar", None)
    if qar is not None:
        updates["qar_enabled"] = qar == "on"
    if mode == RERANK_PAIRWISE:
        updates["reranker_backend"] = resolve_backend(app, getattr(args, "backend", None),
                                                      (KIND_PAIRWISE, KIND_ZERO_SHOT), cfg.reranker_backend)
    elif mode == RERANK_LISTWISE:
        requested = getattr(args, "backend", None)
        kinds = {b.backend_id: b.kind for b in app.backends}
        if requested is None and kinds.get(cfg.reranker_backend) != KIND_LISTWISE:
            requested = "sim"
        updates["reranker_backend"] = resolve_backend(app, requested, (KIND_LISTWISE,), cfg.reranker_backend)
    if getattr(args, "reasoner", None):
        updates["reasoner_backend"] = args.reasoner
    if serve:
        updates["qar_failure_policy"] = FALL_BACK
    try:
        return replace(cfg, **updates)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def cmd_build_index(app: AppConfig, args: argparse.Namespace) -> int:
    embeddings = read_embeddings(_path(app, args, "candidate_embeddings"))
    index = build_index(embeddings)
    save_index(index, args.out)
    logger.info(f"✓ Index of {index.size} rows written to {args.out}")
    emit({"command": "build-index", "out": args.out, "size": index.size,
          "dim": index.dim if index.size else 0})
    return 0


def _run_cascade(app: AppConfig, args: argparse.Namespace, mode: str, command: str) -> int:
    cfg = pipeline_config(app, args, mode, serve=True)
    working = load_working_set(app, args)
    gateway = build_gateway(app, args) if mode != RERANK_NONE else ReasoningGateway(
        app.backends, templates=PromptTemplates.load(app.paths.get("templates")), cache_enabled=False)
    pipeline = CascadePipeline(gateway, working.index, working.query_embeddings, working.ecr_store, cfg,
                               candidates=working.candidates)
    query_ids = args.query_id or sorted(working.queries)
    missing = [q for q in query_ids if q not in working.queries]
    if missing:
        raise InputFormatError(f"Unknown query ids: {', '.join(missing[:5])}")
    results = pipeline.run_queries([working.queries[q] for q in query_ids], workers=args.workers)

    if getattr(args, "verify", False):
        for result in results:
            oracle = full_scan_top_k(working.index, pipeline.query_vector(working.queries[result.query_id]),
                                     cfg.top_k)
            if [i for i, _ in oracle] != result.stage1.ids:
                raise CascadeError(f"Stage-1 ranking of '{result.query_id}' differs from the full scan")
        logger.info(f"✓ Verified {len(results)} stage-1 rankings against the full scan")

    lines = [r.to_json() for r in results]
    for line in lines:
        sys.stdout.write(line + "\n")
    report = getattr(args, "report", None)
    if report:
        os.makedirs(os.path.dirname(os.path.abspath(report)), exist_ok=True)
        with open(report, "w", encoding="utf-8") as f:
            f.write("".join(line + "\n" for line in lines))
    logger.info(f"✓ {command}: {len(results)} queries")
    return 0


def cmd_retrieve(app: AppConfig, args: argparse.Namespace) -> int:
    return _run_cascade(app, args, RERANK_NONE, "retrieve")


def cmd_rerank(app: AppConfig, args: argparse.Namespace) -> int:
    return _run_cascade(app, args, args.mode, "rerank")


def cmd_pipeline(app: AppConfig, args: argparse.Namespace) -> int:
    mode = args.mode or app.defaults.rerank_mode
    return _run_cascade(app, args, mode, "pipeline")


def _load_pairs(path: str, queries: Dict[str, Item], candidates: Dict[str, Item]) -> List[Tuple[Item, Item]]:
    pairs = []
    for record in read_jsonl(path):
        try:
            pairs.append((queries[record["query_id"]], candidates[record["positive_id"]]))
        except KeyError as e:
            raise InputFormatError(f"{path}: pair refers to unknown id {e}") from e
    return pairs


def cmd_mine(app: AppConfig, args: argparse.Namespace) -> int:
    working = load_working_set(app, args)
    cfg = app.defaults
    alpha = cfg.alpha if args.alpha is None else args.alpha
    k = cfg.mined_k if args.k is None else args.k
    m = cfg.pool_size_m if args.m is None else args.m
    scheme, temp = parse_weight_scheme(args.weights)
    reranker = resolve_backend(app, args.backend, (KIND_PAIRWISE, KIND_ZERO_SHOT), cfg.reranker_backend)
    pairs = _load_pairs(_path(app, args, "pairs"), working.queries, working.candidates)
    out = args.out or os.path.join(app.paths["output_dir"], "mined.jsonl")
    miner = HardNegativeMiner(build_gateway(app, args), working.index, working.query_embeddings,
                              working.ecr_store, reranker,
                              seed=cfg.rng_seed if args.seed is None else args.seed)
    summary = miner.mine_corpus(pairs, out, checkpoint_path=args.checkpoint, m=m, k=k, alpha=alpha,
                                weights=scheme, weight_temp=temp, workers=args.workers,
                                max_failure_ratio=args.max_failure_ratio)
    logger.info(f"skipped: {summary.skipped}")
    emit({"command": "mine", "out": out, "written": summary.written, "skipped": summary.skipped,
          "failures": len(summary.failures), "backend_calls": summary.backend_calls})
    return 0


def cmd_audit(app: AppConfig, args: argparse.Namespace) -> int:
    working = load_working_set(app, args)
    _, records, _ = read_mined_dataset(args.mined)
    judge = resolve_backend(app, args.judge, (KIND_PAIRWISE, KIND_ZERO_SHOT), app.defaults.judge_backend)
    seed = app.defaults.rng_seed if args.seed is None else args.seed
    miner = HardNegativeMiner(build_gateway(app, args), working.index, working.query_embeddings,
                              working.ecr_store, judge, seed=seed)
    report = miner.estimate_false_negative_ratio(records, working.queries, judge, args.sample, seed=seed)
    emit(dict(report.to_dict(), command="audit", judge=judge, mined=args.mined))
    return 0


def _corpus_spec(args: argparse.Namespace) -> SyntheticCorpusSpec:
    return SyntheticCorpusSpec(
        n_candidates=args.n_candidates,
        n_queries=args.n_queries,
        dim=args.dim,
        signal_strength=args.signal,
        distractor_count=args.distractors,
        seed=args.seed if args.seed is not None else 0,
        distractor_spread=args.spread,
        unlabeled_relevant_per_query=args.unlabeled,
    )


def cmd_synth(app: AppConfig, args: argparse.Namespace) -> int:
    corpus = generate_synthetic_corpus(_corpus_spec(args))
    corpus.save(args.out)
    logger.info(f"✓ Synthetic working set written to {args.out}")
    emit({"command": "synth", "out": args.out, "queries": len(corpus.queries),
          "candidates": len(corpus.candidates), "pairs": len(corpus.pairs)})
    return 0


def cmd_experiment(app: AppConfig, args: argparse.Namespace) -> int:
    config = ExperimentConfig.load(args.experiment)
    out = args.out or app.paths["output_dir"]
    runner = ExperimentRunner(config, cache_dir=None if args.no_cache else args.cache_dir)
    for row in runner.run_experiment(out, progress=not args.quiet):
        emit(row)
    return 0


def cmd_toy_train(app: AppConfig, args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else 0
    if args.workdir:
        corpus = SyntheticCorpus.load(args.workdir)
    else:
        corpus = generate_synthetic_corpus(_corpus_spec(args))
    if args.mined:
        variants = {}
        for entry in args.mined:
            name, sep, path = entry.partition("=")
            if not sep:
                raise ConfigError(f"--mined expects NAME=PATH, got '{entry}'")
            variants[name] = read_mined_dataset(path)[1]
    else:
        reranker = resolve_backend(app, args.backend, (KIND_PAIRWISE,), app.defaults.reranker_backend)
        miner = HardNegativeMiner(build_gateway(app, args), build_index(corpus.candidate_embeddings),
                                  corpus.query_embeddings, corpus.ecr_store, reranker, seed=seed)
        variants = mine_toy_variants(corpus, miner, m=args.m, k=app.defaults.mined_k, alpha=app.defaults.alpha,
                                     weight_temp=args.weight_temp)
    results = train_toy_embedder(corpus, variants, epochs=args.epochs, lr=args.lr, seed=seed,
                                 batch_size=args.batch_size, tau=args.tau)
    for name in variants:
        emit(dict(results[name].to_dict(), command="toy-train"))
    return 0


def _add_paths(parser: argparse.ArgumentParser):
    parser.add_argument("--corpus", help="Items file (JSON lines)")
    parser.add_argument("--candidate-embeddings", dest="candidate_embeddings", help="Candidate CRV1 file")
    parser.add_argument("--query-embeddings", dest="query_embeddings", help="Query CRV1 file")
    parser.add_argument("--ecr", dest="ecr_store", help="ECR trace store (JSON lines)")


def _add_backend_options(parser: argparse.ArgumentParser):
    parser.add_argument("--cache-dir", dest="cache_dir", help="Response cache directory")
    parser.add_argument("--no-cache", action="store_true", help="Disable the response cache")
    parser.add_argument("--workers", type=int, default=4)


def _add_corpus_spec(parser: argparse.ArgumentParser):
    parser.add_argument("--n-candidates", type=int, default=300)
    parser.add_argument("--n-queries", type=int, default=200)
    parser.add_argument("--dim", type=int, default=32)
    parser.add_argument("--signal", type=float, default=0.5, help="Signal strength in [0, 1]")
    parser.add_argument("--distractors", type=int, default=4, help="Near-duplicates per positive")
    parser.add_argument("--spread", type=float, default=0.3, help="Distractor spread around the positive")
    parser.add_argument("--unlabeled", type=int, default=0, help="Unjudged relevant near-duplicates per query")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cascade", description="Cascaded multimodal retrieval engine")
    parser.add_argument("--config", help="Application config (YAML)")
    parser.add_argument("--log-level", dest="log_level", help="DEBUG, INFO, WARNING or ERROR")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-index", help="Serialize a candidate index")
    p.add_argument("--embeddings", dest="candidate_embeddings", help="Candidate CRV1 file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_index)

    for name, func, help_text in (
        ("retrieve", cmd_retrieve, "Stage-1 retrieval only"),
        ("rerank", cmd_rerank, "Retrieve and rerank on traces"),
        ("pipeline", cmd_pipeline, "Run the configured cascade"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_paths(p)
        _add_backend_options(p)
        p.add_argument("--query-id", action="append", help="Query to run (repeatable; default: all)")
        p.add_argument("--top-k", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--report", help="Also write result lines to this file")
        p.add_argument("--verify", action="store_true", help="Check stage 1 against a full scan")
        if name != "retrieve":
            modes = [RERANK_PAIRWISE, RERANK_LISTWISE] if name == "rerank" else list(RERANK_MODES)
            p.add_argument("--mode", choices=modes, default=RERANK_PAIRWISE if name == "rerank" else None)
            p.add_argument("--qar", choices=["on", "off"])
            p.add_argument("--backend", help="Reranker backend id, or 'sim'")
            p.add_argument("--reasoner", help="Reasoner backend id for QAR")
        p.set_defaults(func=func)

    p = sub.add_parser("mine", help="Mine hard negatives for training pairs")
    _add_paths(p)
    _add_backend_options(p)
    p.add_argument("--pairs", help="Training pairs (JSON lines)")
    p.add_argument("--alpha", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--weights", default="uniform", help="uniform or softmax:TEMP")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--backend", help="Reranker backend id, or 'sim'")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-failure-ratio", dest="max_failure_ratio", type=float, default=0.1)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("audit", help="Estimate the false-negative ratio of mined negatives")
    _add_paths(p)
    _add_backend_options(p)
    p.add_argument("--mined", required=True)
    p.add_argument("--judge", help="Judge backend id, or 'sim'")
    p.add_argument("--sample", type=int, default=200)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("synth", help="Write a synthetic working set")
    _add_corpus_spec(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("experiment", help="Run an experiment grid")
    p.add_argument("--experiment", default=DEFAULT_EXPERIMENT_PATH, help="Experiment config (YAML)")
    p.add_argument("--out")
    p.add_argument("--cache-dir", dest="cache_dir")
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--quiet", action="store_true", help="No progress bar")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("toy-train", help="Compare mined negatives with a toy linear embedder")
    _add_corpus_spec(p)
    _add_backend_options(p)
    p.add_argument("--workdir", help="Synthetic working set written by synth")
    p.add_argument("--mined", action="append", help="NAME=PATH of a mined dataset (repeatable)")
    p.add_argument("--backend", help="Reranker backend id for in-process mining, or 'sim'")
    p.add_argument("--m", type=int, default=DEFAULT_M)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--weight-temp", dest="weight_temp", type=float, default=0.1,
                   help="Softmax temperature of the rhnm_weighted variant")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=16)
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_toy_train)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        app = load_app_config(args.config)
        setup_logging(args.log_level or app.logging_level)
        return args.func(app, args)
    except KeyboardInterrupt:
        logger.error("✗ Interrupted")
        return EXIT_INTERRUPTED
    except CascadeError as e:
        logger.error(f"✗ {type(e).__name__}: {e}")
        return e.exit_code
    except (OSError, json.JSONDecodeError) as e:
        logger.error(f"✗ {e}")
        return InputFormatError.exit_code
