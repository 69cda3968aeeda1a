"""
Two-stage cascade: exact top-k retrieval, optional query-aware rewriting of the
retrieved candidates' traces, then trace-based reranking.
"""

from typing import Dict, List, Optional, Sequence, Tuple
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import json
import logging

import numpy as np

from core_model import (
    CascadeError,
    EcrTrace,
    EmbeddingMatrix,
    FAIL_FAST,
    InputFormatError,
    Item,
    PipelineConfig,
    PreconditionError,
    RankedList,
    RERANK_LISTWISE,
    RERANK_NONE,
    RERANK_PAIRWISE,
    STAGE_LISTWISE,
    STAGE_PAIRWISE,
)
from reasoning_gateway import (
    GatewayError,
    KIND_LISTWISE,
    KIND_PAIRWISE,
    KIND_ZERO_SHOT,
    ReasoningGateway,
    TokenBudget,
)
from vector_index import Index, top_k

logger = logging.getLogger(__name__)


class CandidateError(CascadeError):
    """A stage-2 failure, tagged with the candidate it happened on (pairwise) or the raw reply (listwise)."""

    def __init__(self, message: str, candidate_id: Optional[str] = None, raw_text: Optional[str] = None):
        super().__init__(message)
        self.candidate_id = candidate_id
        self.raw_text = raw_text


@dataclass(frozen=True)
class CascadeResult:
    query_id: str
    stage1: RankedList
    final: RankedList
    per_candidate_traces: Dict[str, EcrTrace] = field(default_factory=dict)
    token_budget: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if sorted(self.final.ids) != sorted(self.stage1.ids):
            raise CascadeError(f"Final ranking of '{self.query_id}' is not a permutation of stage 1")

    def to_dict(self) -> Dict:
        return {
            "query_id": self.query_id,
            "stage1": self.stage1.to_dict(),
            "final": self.final.to_dict(),
            "per_candidate_traces": {cid: t.to_dict() for cid, t in self.per_candidate_traces.items()},
            "token_budget": dict(self.token_budget),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True)


def listwise_scores(n: int) -> List[float]:
    """Rank-derived scores (n - p) / n for output positions p = 0..n-1; not probabilities."""
    return [(n - p) / n for p in range(n)]


class CascadePipeline:
    """
    Runs queries through the cascade.

    Args:
        gateway: Backend access for rewriting and reranking
        index: Candidate index built by vector_index.build_index
        query_embeddings: One unit row per query
        ecr_store: Original candidate traces keyed by candidate id
        config: Cascade parameters
        candidates: Optional candidate items, needed only for zero-shot MLLM
            reranking (media references) and QAR rewriting of media items
    """

    def __init__(self, gateway: ReasoningGateway, index: Index, query_embeddings: EmbeddingMatrix,
                 ecr_store: Dict[str, EcrTrace], config: PipelineConfig,
                 candidates: Optional[Dict[str, Item]] = None):
        self.gateway = gateway
        self.index = index
        self.query_embeddings = query_embeddings
        self._query_rows = {qid: row for row, qid in enumerate(query_embeddings.ids)}
        self.ecr_store = ecr_store
        self.config = config
        self.candidates = dict(candidates or {})

    def log(self, msg: str):
        logger.info(msg)

    def query_vector(self, query: Item) -> np.ndarray:
        row = self._query_rows.get(query.id)
        if row is None:
            raise InputFormatError(f"Query '{query.id}' has no embedding row")
        return self.query_embeddings.vectors[row]

    def _candidate_item(self, candidate_id: str, trace: EcrTrace) -> Item:
        item = self.candidates.get(candidate_id)
        if item is not None:
            return item
        return Item(id=candidate_id, role="candidate", content_text=trace.summary, ecr=trace)

    def run_stage1(self, query: Item, k: int) -> Tuple[RankedList, Dict[str, EcrTrace]]:
        """
        Retrieve the top-k candidates and their original traces.

        Returns:
            (RankedList with min(k, n) entries, traces keyed by candidate id in rank order)
        """
        ranked = top_k(self.index, self.query_vector(query), k, query_id=query.id)
        traces = {}
        for candidate_id in ranked.ids:
            trace = self.ecr_store.get(candidate_id)
            if trace is None:
                raise InputFormatError(f"No ECR trace stored for candidate '{candidate_id}'")
            traces[candidate_id] = trace
        return ranked, traces

    def run_ecrr(self, query: Item, candidates: RankedList, traces: Dict[str, EcrTrace],
                 mode: str, backend_id: str, budget: Optional[TokenBudget] = None) -> RankedList:
        """
        Rerank retrieved candidates by their traces.

        Pairwise scores every candidate and sorts descending, ties keeping
        stage-1 order. Listwise applies the permutation the ranker returns.
        """
        backend = self.gateway.backend(backend_id)
        if mode == RERANK_PAIRWISE:
            if backend.kind not in (KIND_PAIRWISE, KIND_ZERO_SHOT):
                raise PreconditionError(f"Pairwise reranking needs a pairwise backend, '{backend_id}' is {backend.kind}")
            stage = STAGE_PAIRWISE
        elif mode == RERANK_LISTWISE:
            if backend.kind != KIND_LISTWISE:
                raise PreconditionError(f"Listwise reranking needs a listwise backend, '{backend_id}' is {backend.kind}")
            stage = STAGE_LISTWISE
        else:
            raise PreconditionError(f"run_ecrr needs mode pairwise or listwise, got '{mode}'")

        ids = candidates.ids
        if not ids:
            return RankedList(query_id=query.id, entries=(), stage=stage, truncated_at=candidates.truncated_at)

        if mode == RERANK_PAIRWISE:
            scores = self._score_all(query, ids, traces, backend_id, backend.max_in_flight, budget)
            order = sorted(range(len(ids)), key=lambda i: (-scores[i], i))
            entries = tuple((ids[i], scores[i]) for i in order)
        else:
            try:
                permutation = self.gateway.rank_listwise(
                    query, [traces[cid] for cid in ids], backend_id,
                    max_n=self.config.listwise_max, budget=budget,
                )
            except GatewayError as e:
                raise CandidateError(f"Listwise ranking failed for query '{query.id}': {e}",
                                     raw_text=getattr(e, "raw_text", None)) from e
            entries = tuple(zip((ids[p - 1] for p in permutation), listwise_scores(len(ids))))
        return RankedList(query_id=query.id, entries=entries, stage=stage, truncated_at=candidates.truncated_at)

    def _score_all(self, query: Item, ids: Sequence[str], traces: Dict[str, EcrTrace], backend_id: str,
                   workers: int, budget: Optional[TokenBudget]) -> List[float]:
        def score(candidate_id: str) -> float:
            trace = traces[candidate_id]
            media_ref = self._candidate_item(candidate_id, trace).media_ref
            try:
                return self.gateway.score_pair(query, trace, backend_id,
                                               candidate_media_ref=media_ref, budget=budget).score
            except GatewayError as e:
                raise CandidateError(f"Scoring candidate '{candidate_id}' for '{query.id}' failed: {e}",
                                     candidate_id=candidate_id, raw_text=getattr(e, "raw_text", None)) from e

        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(score, ids))

    def rewrite_traces(self, query: Item, ids: Sequence[str], traces: Dict[str, EcrTrace],
                       reasoner_backend: str, budget: Optional[TokenBudget] = None) -> Dict[str, EcrTrace]:
        """QAR-rewrite every candidate trace for ``query``, honoring the configured failure policy."""
        workers = self.gateway.backend(reasoner_backend).max_in_flight

        def rewrite(candidate_id: str) -> EcrTrace:
            original = traces[candidate_id]
            try:
                return self.gateway.rewrite_qar(query, self._candidate_item(candidate_id, original), original,
                                                reasoner_backend, budget=budget)
            except GatewayError as e:
                if self.config.qar_failure_policy == FAIL_FAST:
                    raise CandidateError(f"Rewriting candidate '{candidate_id}' for '{query.id}' failed: {e}",
                                         candidate_id=candidate_id, raw_text=getattr(e, "raw_text", None)) from e
                self.log(f"✗ QAR failed for {candidate_id} ({e}); using its original trace")
                return original

        if not ids:
            return {}
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return dict(zip(ids, pool.map(rewrite, ids)))

    def run_qar_then_ecrr(self, query: Item, candidates: RankedList, traces: Dict[str, EcrTrace],
                          reasoner_backend: str, rerank_backend: str, mode: str,
                          budget: Optional[TokenBudget] = None) -> Tuple[RankedList, Dict[str, EcrTrace]]:
        """
        Rewrite every candidate trace for the query, then rerank on the rewrites.

        Returns:
            (reranked list, traces actually used keyed by candidate id)
        """
        rewritten = self.rewrite_traces(query, candidates.ids, traces, reasoner_backend, budget)
        return self.run_ecrr(query, candidates, rewritten, mode, rerank_backend, budget), rewritten

    def run_query(self, query: Item, config: Optional[PipelineConfig] = None) -> CascadeResult:
        cfg = config or self.config
        budget = TokenBudget()
        stage1, traces = self.run_stage1(query, cfg.top_k)
        if cfg.rerank_mode == RERANK_NONE:
            return CascadeResult(query_id=query.id, stage1=stage1, final=stage1,
                                 per_candidate_traces=traces, token_budget=budget.to_dict())
        if cfg.qar_enabled:
            final, used = self.run_qar_then_ecrr(query, stage1, traces, cfg.reasoner_backend,
                                                 cfg.reranker_backend, cfg.rerank_mode, budget)
        else:
            final = self.run_ecrr(query, stage1, traces, cfg.rerank_mode, cfg.reranker_backend, budget)
            used = traces
        return CascadeResult(query_id=query.id, stage1=stage1, final=final,
                             per_candidate_traces=used, token_budget=budget.to_dict())

    def run_queries(self, queries: Sequence[Item], workers: int = 4,
                    config: Optional[PipelineConfig] = None) -> List[CascadeResult]:
        """Run many queries concurrently; results come back in input order."""
        if not queries:
            return []
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            results = list(pool.map(lambda q: self.run_query(q, config), queries))
        self.log(f"✓ Ran {len(results)} queries through the cascade")
        return results
