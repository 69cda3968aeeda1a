"""
Evaluation harness: ranking metrics, the top-1 vs top-k gap report, a
seeded synthetic benchmark with planted relevance, the experiment grid runner
and a toy linear embedder trainer for comparing mined negatives.
"""

from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
import itertools
import logging
import math
import os

import numpy as np
import yaml
from tqdm import tqdm

from cascade_pipeline import CascadePipeline, CascadeResult
from contrastive_loss import LossBatch, info_nce_gradient, info_nce_loss
from core_model import (
    CascadeError,
    ConfigError,
    EcrTrace,
    EmbeddingMatrix,
    InputFormatError,
    Item,
    PipelineConfig,
    PreconditionError,
    RankedList,
    ROLE_CANDIDATE,
    ROLE_QUERY,
    read_jsonl,
    write_jsonl,
    derive_seed,
    read_embeddings,
    read_items_jsonl,
    read_traces_jsonl,
    write_embeddings,
    write_items_jsonl,
    write_traces_jsonl,
)
from hard_negative_miner import WEIGHTS_SOFTMAX, HardNegativeMiner, MinedNegatives, assign_weights
from reasoning_gateway import (
    BackendDescriptor,
    PromptTemplates,
    ReasoningGateway,
    SimBackendConfig,
    near_key,
    planted_key,
)
from vector_index import Index, build_index, top_k

logger = logging.getLogger(__name__)

GAP_PLOT_KS = (1, 5, 10, 20, 50)
GRID_KEYS = ("rerank_mode", "qar_enabled", "top_k", "reranker_backend", "reasoner_backend")


class TrainingDivergedError(CascadeError):
    pass


@dataclass(frozen=True)
class RelevanceJudgments:
    """query_id -> {candidate_id: gain}; binary judgments use gain 1."""
    gains: Dict[str, Dict[str, float]]

    def __post_init__(self):
        for query_id, per_query in self.gains.items():
            if any(g < 0 for g in per_query.values()):
                raise InputFormatError(f"Judgments for '{query_id}' hold a negative gain")
            if not any(g > 0 for g in per_query.values()):
                raise InputFormatError(f"Judgments for '{query_id}' name no relevant candidate")

    @classmethod
    def from_binary(cls, relevant: Dict[str, Iterable[str]]) -> "RelevanceJudgments":
        return cls({qid: {cid: 1.0 for cid in ids} for qid, ids in relevant.items()})

    def relevant(self, query_id: str) -> Dict[str, float]:
        try:
            per_query = self.gains[query_id]
        except KeyError:
            raise InputFormatError(f"No judgments for query '{query_id}'") from None
        return {cid: g for cid, g in per_query.items() if g > 0}

    def write(self, path: str) -> None:
        write_jsonl(path, ({"query_id": q, "gains": g} for q, g in self.gains.items()))

    @classmethod
    def read(cls, path: str) -> "RelevanceJudgments":
        try:
            return cls({r["query_id"]: {c: float(g) for c, g in r["gains"].items()} for r in read_jsonl(path)})
        except (KeyError, AttributeError, ValueError) as e:
            raise InputFormatError(f"{path}: bad judgment record ({e})") from e


@dataclass(frozen=True)
class MetricReport:
    metric: str
    k: int
    value: float
    per_query: Dict[str, float]
    # some ranking had fewer than k entries
    truncated: bool


def _top_ids(ranking: RankedList, k: int) -> List[str]:
    if k < 1:
        raise PreconditionError(f"k must be >= 1, got {k}")
    return ranking.ids[:k]


def precision_at_k(ranking: RankedList, judgments: RelevanceJudgments, k: int) -> float:
    relevant = judgments.relevant(ranking.query_id)
    return sum(1 for cid in _top_ids(ranking, k) if cid in relevant) / k


def recall_at_k(ranking: RankedList, judgments: RelevanceJudgments, k: int) -> float:
    relevant = judgments.relevant(ranking.query_id)
    return sum(1 for cid in _top_ids(ranking, k) if cid in relevant) / len(relevant)


def ndcg_at_k(ranking: RankedList, judgments: RelevanceJudgments, k: int) -> float:
    """DCG@k / IDCG@k with log2(rank + 1) discounting, ranks from 1."""
    relevant = judgments.relevant(ranking.query_id)
    dcg = sum(relevant.get(cid, 0.0) / math.log2(rank + 1)
              for rank, cid in enumerate(_top_ids(ranking, k), start=1))
    ideal = sorted(relevant.values(), reverse=True)[:k]
    idcg = sum(g / math.log2(rank + 1) for rank, g in enumerate(ideal, start=1))
    return dcg / idcg


METRICS: Dict[str, Callable[[RankedList, RelevanceJudgments, int], float]] = {
    "precision": precision_at_k,
    "recall": recall_at_k,
    "ndcg": ndcg_at_k,
}


def mean_over_queries(metric_fn: Callable[[RankedList, RelevanceJudgments, int], float],
                      rankings: Sequence[RankedList], judgments: RelevanceJudgments, k: int) -> MetricReport:
    if not rankings:
        raise PreconditionError("No rankings to evaluate")
    per_query = {r.query_id: metric_fn(r, judgments, k) for r in rankings}
    name = next((n for n, fn in METRICS.items() if fn is metric_fn), getattr(metric_fn, "__name__", "metric"))
    return MetricReport(
        metric=name,
        k=k,
        value=float(np.mean(list(per_query.values()))),
        per_query=per_query,
        truncated=any(len(r) < k for r in rankings),
    )


@dataclass(frozen=True)
class GapRow:
    task: str
    n_queries: int
    k: int
    p_at_1: float
    p_at_k: float
    r_at_k: float
    # r_at_k - p_at_1: top-k hits that are not top-1 hits
    gap: float

    def to_dict(self) -> Dict:
        return dict(self.__dict__)


def topk_gap_report(rankings: Sequence[RankedList], judgments: RelevanceJudgments,
                    tasks: Optional[Dict[str, str]] = None, ks: Tuple[int, int] = (1, 10)) -> List[GapRow]:
    """
    Top-1 vs top-k retrieval quality per task label.

    Both P@k and R@k are reported; with a single positive per query R@k is
    the hit rate, and the gap is R@k - P@1.
    """
    if not rankings:
        raise PreconditionError("Gap report needs at least one ranking")
    top1, k = ks
    by_task: Dict[str, List[RankedList]] = {}
    for ranking in rankings:
        by_task.setdefault((tasks or {}).get(ranking.query_id, "default"), []).append(ranking)
    rows = []
    for task in sorted(by_task):
        group = by_task[task]
        p1 = mean_over_queries(precision_at_k, group, judgments, top1).value
        pk = mean_over_queries(precision_at_k, group, judgments, k).value
        rk = mean_over_queries(recall_at_k, group, judgments, k).value
        rows.append(GapRow(task=task, n_queries=len(group), k=k, p_at_1=p1, p_at_k=pk, r_at_k=rk, gap=rk - p1))
    return rows


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    n_candidates: int = 300
    n_queries: int = 200
    dim: int = 32
    signal_strength: float = 0.5
    distractor_count: int = 4
    seed: int = 0
    distractor_spread: float = 0.3
    # near-duplicates planted as relevant but left out of the judgments
    unlabeled_relevant_per_query: int = 0
    task: str = "synthetic_t2v"

    def __post_init__(self):
        if self.n_candidates < self.distractor_count + 1:
            raise ConfigError("n_candidates must be >= distractor_count + 1")
        if self.n_queries < 1 or self.dim < 1 or self.distractor_count < 0:
            raise ConfigError("n_queries and dim must be positive, distractor_count non-negative")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise ConfigError(f"signal_strength must lie in [0, 1], got {self.signal_strength}")
        if not 0 <= self.unlabeled_relevant_per_query <= self.distractor_count:
            raise ConfigError("unlabeled_relevant_per_query must lie in [0, distractor_count]")
        if self.distractor_spread < 0:
            raise ConfigError("distractor_spread must be >= 0")

    @property
    def clusters(self) -> int:
        return min(self.n_queries, self.n_candidates // (self.distractor_count + 1))

    @classmethod
    def from_dict(cls, data: Optional[Dict]) -> "SyntheticCorpusSpec":
        try:
            return cls(**(data or {}))
        except TypeError as e:
            raise ConfigError(f"Bad corpus settings: {e}") from e


@dataclass(frozen=True, eq=False)
class SyntheticCorpus:
    queries: Tuple[Item, ...]
    candidates: Tuple[Item, ...]
    query_embeddings: EmbeddingMatrix
    candidate_embeddings: EmbeddingMatrix
    judgments: RelevanceJudgments
    ecr_store: Dict[str, EcrTrace]
    # (query_id, positive_id)
    pairs: Tuple[Tuple[str, str], ...]
    spec: Optional[SyntheticCorpusSpec] = None

    def query(self, query_id: str) -> Item:
        return self.queries_by_id()[query_id]

    def candidate(self, candidate_id: str) -> Item:
        return self.candidates_by_id()[candidate_id]

    def queries_by_id(self) -> Dict[str, Item]:
        return {q.id: q for q in self.queries}

    def candidates_by_id(self) -> Dict[str, Item]:
        return {c.id: c for c in self.candidates}

    def training_pairs(self) -> List[Tuple[Item, Item]]:
        queries, candidates = self.queries_by_id(), self.candidates_by_id()
        return [(queries[q], candidates[p]) for q, p in self.pairs]

    def tasks(self) -> Dict[str, str]:
        return {q.id: q.task for q in self.queries}

    def save(self, out_dir: str) -> None:
        """Write the working set the command line consumes."""
        os.makedirs(out_dir, exist_ok=True)
        write_items_jsonl(os.path.join(out_dir, "corpus.jsonl"), list(self.queries) + list(self.candidates))
        write_embeddings(os.path.join(out_dir, "candidates.crv"), self.candidate_embeddings)
        write_embeddings(os.path.join(out_dir, "queries.crv"), self.query_embeddings)
        write_traces_jsonl(os.path.join(out_dir, "ecr.jsonl"), self.ecr_store.values())
        self.judgments.write(os.path.join(out_dir, "judgments.jsonl"))
        write_jsonl(os.path.join(out_dir, "pairs.jsonl"),
                     ({"query_id": q, "positive_id": p} for q, p in self.pairs))

    @classmethod
    def load(cls, work_dir: str) -> "SyntheticCorpus":
        items = read_items_jsonl(os.path.join(work_dir, "corpus.jsonl"))
        pairs_path = os.path.join(work_dir, "pairs.jsonl")
        pairs = tuple((r["query_id"], r["positive_id"]) for r in read_jsonl(pairs_path)) \
            if os.path.exists(pairs_path) else ()
        return cls(
            queries=tuple(i for i in items if i.role == ROLE_QUERY),
            candidates=tuple(i for i in items if i.role == ROLE_CANDIDATE),
            query_embeddings=read_embeddings(os.path.join(work_dir, "queries.crv")),
            candidate_embeddings=read_embeddings(os.path.join(work_dir, "candidates.crv")),
            judgments=RelevanceJudgments.read(os.path.join(work_dir, "judgments.jsonl")),
            ecr_store=read_traces_jsonl(os.path.join(work_dir, "ecr.jsonl")),
            pairs=pairs,
        )


def _unit_rows(rows: np.ndarray) -> np.ndarray:
    return rows / np.linalg.norm(rows, axis=-1, keepdims=True)


def generate_synthetic_corpus(spec: SyntheticCorpusSpec) -> SyntheticCorpus:
    """
    Build a seeded benchmark with planted relevance.

    Candidates come in scene clusters: one positive plus ``distractor_count``
    near-duplicates around it, the rest are unrelated fillers. Query i belongs
    to scene i mod C and its vector is normalize(s * positive + (1 - s) * noise).
    Every candidate trace carries the relevance markers the simulated
    backends read.
    """
    rng = np.random.default_rng(derive_seed(spec.seed, "synthetic-corpus"))
    n_clusters = spec.clusters
    per_cluster = spec.distractor_count + 1
    positives = _unit_rows(rng.standard_normal((n_clusters, spec.dim)))
    offsets = _unit_rows(rng.standard_normal((n_clusters, spec.distractor_count, spec.dim)))
    distractors = _unit_rows(positives[:, None, :] + spec.distractor_spread * offsets)
    fillers = _unit_rows(rng.standard_normal((spec.n_candidates - n_clusters * per_cluster, spec.dim)))

    # (vector, cluster, slot); slot 0 is the positive, -1 a filler
    pool = []
    for c in range(n_clusters):
        pool.append((positives[c], c, 0))
        for j in range(spec.distractor_count):
            pool.append((distractors[c, j], c, j + 1))
    for f in range(len(fillers)):
        pool.append((fillers[f], -1, -1))
    placement = rng.permutation(len(pool))
    candidate_ids = [f"c{row:05d}" for row in range(len(pool))]
    slots: Dict[Tuple[int, int], str] = {}
    rows = np.empty((len(pool), spec.dim))
    layout = []
    for row, source in enumerate(placement):
        vector, cluster, slot = pool[source]
        rows[row] = vector
        layout.append((cluster, slot))
        if cluster >= 0:
            slots[(cluster, slot)] = candidate_ids[row]

    query_ids = [f"q{i:05d}" for i in range(spec.n_queries)]
    query_clusters = [i % n_clusters for i in range(spec.n_queries)]
    noise = _unit_rows(rng.standard_normal((spec.n_queries, spec.dim)))
    s = spec.signal_strength
    query_rows = s * positives[query_clusters] + (1.0 - s) * noise

    markers: Dict[str, List[str]] = {cid: [] for cid in candidate_ids}
    relevant = {}
    for query_id, c in zip(query_ids, query_clusters):
        positive_id = slots[(c, 0)]
        relevant[query_id] = [positive_id]
        markers[positive_id].append(planted_key(query_id))
        for j in range(1, per_cluster):
            key = planted_key(query_id) if j <= spec.unlabeled_relevant_per_query else near_key(query_id)
            markers[slots[(c, j)]].append(key)

    ecr_store = {}
    candidates = []
    for cid, (cluster, slot) in zip(candidate_ids, layout):
        if cluster < 0:
            summary = f"Unrelated footage, reel {cid}."
        elif slot == 0:
            summary = f"Scene {cluster:04d}, main take."
        else:
            summary = f"Scene {cluster:04d}, alternate take {slot}."
        if markers[cid]:
            summary = f"{summary} {' '.join(markers[cid])}"
        trace = EcrTrace(item_id=cid, think=f"Scanning frames of {cid} for subjects and actions.",
                         summary=summary, source_model="synthetic")
        ecr_store[cid] = trace
        candidates.append(Item(id=cid, role=ROLE_CANDIDATE, instruction="Represent the video for retrieval.",
                               media_ref=f"synthetic://video/{cid}.mp4", ecr=trace, task=spec.task))
    queries = [
        Item(id=qid, role=ROLE_QUERY, instruction="Find the video that matches the caption.",
             content_text=f"Footage of scene {c:04d}.", task=spec.task)
        for qid, c in zip(query_ids, query_clusters)
    ]
    return SyntheticCorpus(
        queries=tuple(queries),
        candidates=tuple(candidates),
        query_embeddings=EmbeddingMatrix.from_rows(query_ids, query_rows),
        candidate_embeddings=EmbeddingMatrix.from_rows(candidate_ids, rows),
        judgments=RelevanceJudgments.from_binary(relevant),
        ecr_store=ecr_store,
        pairs=tuple((qid, relevant[qid][0]) for qid in query_ids),
        spec=spec,
    )


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: SyntheticCorpusSpec
    backends: Tuple[BackendDescriptor, ...]
    sim: Dict[str, SimBackendConfig]
    base: PipelineConfig
    grid: Dict[str, List]
    workers: int = 4
    templates_path: Optional[str] = None

    def __post_init__(self):
        if not self.grid:
            raise ConfigError("Experiment grid is empty")
        unknown = sorted(set(self.grid) - set(GRID_KEYS))
        if unknown:
            raise ConfigError(f"Unknown grid keys: {', '.join(unknown)}")
        for key, values in self.grid.items():
            if not isinstance(values, list) or not values:
                raise ConfigError(f"Grid entry '{key}' must be a non-empty list")

    def cells(self) -> List[PipelineConfig]:
        """Cartesian product of the grid over the base config, in grid order."""
        keys = [k for k in GRID_KEYS if k in self.grid]
        return [replace(self.base, **dict(zip(keys, values)))
                for values in itertools.product(*(self.grid[k] for k in keys))]

    @classmethod
    def from_dict(cls, data: Dict) -> "ExperimentConfig":
        backends = tuple(BackendDescriptor.from_dict(b) for b in data.get("backends", []))
        return cls(
            corpus=SyntheticCorpusSpec.from_dict(data.get("corpus")),
            backends=backends,
            sim={bid: SimBackendConfig.from_dict(cfg) for bid, cfg in (data.get("sim") or {}).items()},
            base=PipelineConfig.from_dict(data.get("base")),
            grid=dict(data.get("grid") or {}),
            workers=int(data.get("workers", 4)),
            templates_path=data.get("templates"),
        )

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigError(f"Cannot read experiment config {path}: {e}") from e
        return cls.from_dict(data)


def _stage1_rankings(corpus: SyntheticCorpus, index: Index, k: int) -> List[RankedList]:
    vectors = corpus.query_embeddings
    return [top_k(index, vectors.vectors[row], k, query_id=qid) for row, qid in enumerate(vectors.ids)]


def _mean(metric_fn, rankings: Sequence[RankedList], judgments: RelevanceJudgments, k: int) -> float:
    return mean_over_queries(metric_fn, rankings, judgments, k).value


class ExperimentRunner:
    """
    Runs every grid cell over one synthetic corpus.

    Cells run in parallel; rows come back and are written in grid order.
    """

    def __init__(self, config: ExperimentConfig, cache_dir: Optional[str] = None,
                 gateway: Optional[ReasoningGateway] = None):
        self.config = config
        self.corpus = generate_synthetic_corpus(config.corpus)
        self.index = build_index(self.corpus.candidate_embeddings)
        self.gateway = gateway or ReasoningGateway(
            config.backends,
            templates=PromptTemplates.load(config.templates_path),
            sim_configs=config.sim,
            cache_dir=cache_dir,
            cache_enabled=cache_dir is not None,
        )

    def log(self, msg: str):
        logger.info(msg)

    def run_cell(self, index: int, cell: PipelineConfig) -> Dict:
        pipeline = CascadePipeline(self.gateway, self.index, self.corpus.query_embeddings,
                                   self.corpus.ecr_store, cell, candidates=self.corpus.candidates_by_id())
        results: List[CascadeResult] = pipeline.run_queries(list(self.corpus.queries), workers=self.config.workers)
        judgments = self.corpus.judgments
        stage1 = [r.stage1 for r in results]
        final = [r.final for r in results]
        k = cell.top_k
        return {
            "cell": index,
            "rerank_mode": cell.rerank_mode,
            "qar_enabled": cell.qar_enabled,
            "top_k": k,
            "reranker_backend": cell.reranker_backend,
            "reasoner_backend": cell.reasoner_backend,
            "n_queries": len(results),
            "p_at_1": _mean(precision_at_k, final, judgments, 1),
            "ndcg_at_5": _mean(ndcg_at_k, final, judgments, 5),
            "stage1_p_at_1": _mean(precision_at_k, stage1, judgments, 1),
            "stage1_recall_at_k": _mean(recall_at_k, stage1, judgments, k),
            "truncated": any(len(r) < 5 for r in final),
            "backend_calls": sum(r.token_budget["backend_calls"] for r in results),
            "chars_sent": sum(r.token_budget["chars_sent"] for r in results),
        }

    def run_experiment(self, output_dir: Optional[str] = None, progress: bool = True) -> List[Dict]:
        cells = self.config.cells()
        self.log(f"Running {len(cells)} experiment cells over {len(self.corpus.queries)} queries")
        rows: List[Optional[Dict]] = [None] * len(cells)
        with ThreadPoolExecutor(max_workers=max(1, self.config.workers)) as pool:
            futures = {pool.submit(self.run_cell, i, cell): i for i, cell in enumerate(cells)}
            for future in tqdm(futures, desc="Cells", disable=not progress):
                rows[futures[future]] = future.result()
        if output_dir:
            self.write_outputs(rows, output_dir)
        self.log(f"✓ Experiment finished ({len(rows)} rows)")
        return rows

    def write_outputs(self, rows: Sequence[Dict], output_dir: str) -> None:
        """report.jsonl plus the gap and budget plot columns."""
        os.makedirs(output_dir, exist_ok=True)
        write_jsonl(os.path.join(output_dir, "report.jsonl"), rows)

        stage1 = _stage1_rankings(self.corpus, self.index, max(GAP_PLOT_KS))
        judgments = self.corpus.judgments
        gap_lines = ["k\tprecision\trecall"]
        for k in GAP_PLOT_KS:
            gap_lines.append(f"{k}\t{_mean(precision_at_k, stage1, judgments, k):.6f}"
                             f"\t{_mean(recall_at_k, stage1, judgments, k):.6f}")
        budget_lines = ["backend_calls\tp_at_1\tcell"]
        for row in rows:
            budget_lines.append(f"{row['backend_calls']}\t{row['p_at_1']:.6f}\t{row['cell']}")
        for name, lines in (("gap_plot.tsv", gap_lines), ("budget_plot.tsv", budget_lines)):
            with open(os.path.join(output_dir, name), "w", encoding="utf-8") as f:
                f.write("\n".join(lines) + "\n")


def run_experiment(config: ExperimentConfig, output_dir: Optional[str] = None,
                   cache_dir: Optional[str] = None, progress: bool = True) -> List[Dict]:
    return ExperimentRunner(config, cache_dir=cache_dir).run_experiment(output_dir, progress=progress)


@dataclass(frozen=True, eq=False)
class ToyTrainingResult:
    variant: str
    weights: np.ndarray
    loss_curve: Tuple[float, ...]
    initial_p_at_1: float
    final_p_at_1: float
    steps: int

    def to_dict(self) -> Dict:
        return {
            "variant": self.variant,
            "loss_curve": list(self.loss_curve),
            "initial_p_at_1": self.initial_p_at_1,
            "final_p_at_1": self.final_p_at_1,
            "steps": self.steps,
        }


def projected_p_at_1(weights: np.ndarray, corpus: SyntheticCorpus, index: Index) -> float:
    """Stage-1 P@1 after mapping every query vector through ``weights``."""
    projected = corpus.query_embeddings.vectors @ weights.T
    norms = np.linalg.norm(projected, axis=1, keepdims=True)
    projected = projected / np.where(norms == 0, 1.0, norms)
    rankings = [top_k(index, projected[row], 1, query_id=qid)
                for row, qid in enumerate(corpus.query_embeddings.ids)]
    return _mean(precision_at_k, rankings, corpus.judgments, 1)


def train_toy_embedder(corpus: SyntheticCorpus, variants: Dict[str, Sequence[MinedNegatives]],
                       epochs: int = 30, lr: float = 0.01, seed: int = 0, batch_size: int = 16,
                       tau: float = 0.05) -> Dict[str, ToyTrainingResult]:
    """
    Train a d x d linear map on query vectors once per negative set.

    Every variant starts from the identity and sees the same mini-batches in
    the same order; only the hard negatives differ. Plain gradient descent on
    the weighted InfoNCE gradient.

    Args:
        corpus: Corpus the negatives were mined over
        variants: Variant name -> mined records (one per training query)
        epochs: Passes over the training pairs
        lr: Gradient-descent step size
        seed: Seeds the shared batch order
        batch_size: Queries per step
        tau: Loss temperature

    Returns:
        ToyTrainingResult per variant
    """
    if epochs < 0 or batch_size < 1:
        raise PreconditionError("epochs must be >= 0 and batch_size >= 1")
    index = build_index(corpus.candidate_embeddings)
    by_variant = {name: {r.query_id: r for r in records} for name, records in variants.items()}
    shared = [q for q, _ in corpus.pairs if all(q in recs for recs in by_variant.values())]
    positive_of = dict(corpus.pairs)
    query_rows = {qid: row for row, qid in enumerate(corpus.query_embeddings.ids)}
    query_vecs = corpus.query_embeddings.vectors
    candidate_rows = {cid: row for row, cid in enumerate(corpus.candidate_embeddings.ids)}
    candidate_vecs = corpus.candidate_embeddings.vectors

    rng = np.random.default_rng(derive_seed(seed, "toy-batch-order"))
    orders = [rng.permutation(len(shared)) for _ in range(epochs)]
    d = corpus.query_embeddings.dim
    initial = projected_p_at_1(np.eye(d), corpus, index)

    results = {}
    for name, records in by_variant.items():
        weights = np.eye(d)
        curve = []
        step = 0
        for epoch, order in enumerate(orders):
            losses = []
            for start in range(0, len(order), batch_size):
                batch_ids = [shared[i] for i in order[start:start + batch_size]]
                x = query_vecs[[query_rows[q] for q in batch_ids]]
                positives = candidate_vecs[[candidate_rows[positive_of[q]] for q in batch_ids]]
                groups = []
                for q in batch_ids:
                    negatives = records[q].negatives
                    vecs = candidate_vecs[[candidate_rows[t] for t, _, _ in negatives]].reshape(len(negatives), d)
                    groups.append((vecs, np.array([w for _, _, w in negatives], dtype=np.float64)))
                try:
                    batch = LossBatch(x @ weights.T, positives, tuple(groups), tau)
                    loss = info_nce_loss(batch)
                except InputFormatError as e:
                    raise TrainingDivergedError(f"{name}: bad batch at epoch {epoch} step {step}: {e}") from e
                if not math.isfinite(loss):
                    raise TrainingDivergedError(f"{name}: loss is {loss} at epoch {epoch} step {step}")
                grads = info_nce_gradient(batch)
                weights = weights - lr * (grads.queries.T @ x)
                losses.append(loss)
                step += 1
            curve.append(float(np.mean(losses)) if losses else 0.0)
        final = projected_p_at_1(weights, corpus, index)
        logger.info(f"✓ {name}: P@1 {initial:.3f} -> {final:.3f} after {step} steps")
        results[name] = ToyTrainingResult(variant=name, weights=weights, loss_curve=tuple(curve),
                                          initial_p_at_1=initial, final_p_at_1=final, steps=step)
    return results


def mine_toy_variants(corpus: SyntheticCorpus, miner: HardNegativeMiner, m: int = 50, k: int = 7,
                      alpha: float = 0.95, weight_temp: float = 0.1) -> Dict[str, List[MinedNegatives]]:
    """
    Reranker, score-weighted reranker, random and embedder negatives for every
    training pair.

    ``rhnm_weighted`` holds the same negatives as ``rhnm`` with
    score_softmax weights at ``weight_temp``.
    """
    if weight_temp <= 0:
        raise ConfigError(f"weight_temp must be > 0, got {weight_temp}")
    variants: Dict[str, List[MinedNegatives]] = {"rhnm": [], "rhnm_weighted": [], "random": [], "embedder": []}
    for query, positive in corpus.training_pairs():
        mined = miner.mine_hard_negatives(query, positive, m=m, k=k, alpha=alpha)
        variants["rhnm"].append(mined)
        weighted = assign_weights(mined, WEIGHTS_SOFTMAX, weight_temp) if mined.negatives else mined
        variants["rhnm_weighted"].append(weighted)
        variants["random"].append(miner.mine_random_negatives(query, positive, m=m, k=k))
        variants["embedder"].append(miner.mine_embedder_negatives(query, positive, m=m, k=k, alpha=alpha))
    return variants
