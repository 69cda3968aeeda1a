"""
Reranker-feedback hard-negative mining.

For a (query, positive) pair: retrieve the top-M pool without the positive,
score the positive and every pool candidate with the reranker, walk the pool
from the highest score down and keep candidates scoring below alpha times the
positive's score until K are kept. Candidates at or above that line are
treated as false negatives and skipped.
"""

from typing import Dict, List, Optional, Sequence, Tuple
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field, replace
import json
import logging
import os

import numpy as np
from tqdm import tqdm

from core_model import (
    CascadeError,
    ConfigError,
    EcrTrace,
    EmbeddingMatrix,
    InputFormatError,
    Item,
    PreconditionError,
    derive_seed,
)
from reasoning_gateway import GatewayError, ReasoningGateway, TokenBudget
from vector_index import Index, cosine, top_k

logger = logging.getLogger(__name__)

STRATEGY_RERANKER = "reranker"
STRATEGY_EMBEDDER = "embedder"
STRATEGY_RANDOM = "random"
STRATEGY_NAIVE = "naive_topk"
THRESHOLDED_STRATEGIES = (STRATEGY_RERANKER, STRATEGY_EMBEDDER)
# settings a resumed run must share with the file it extends
MINING_HEADER_KEYS = ("alpha", "k", "m", "weights", "reranker")

WEIGHTS_UNIFORM = "uniform"
WEIGHTS_SOFTMAX = "score_softmax"

DEFAULT_ALPHA = 0.95
DEFAULT_K = 7
DEFAULT_M = 50
JUDGE_THRESHOLD = 0.5


class MiningAbortedError(CascadeError):
    pass


@dataclass(frozen=True)
class MinedNegatives:
    query_id: str
    positive_id: str
    positive_score: float
    # (target_id, score, weight), highest score first
    negatives: Tuple[Tuple[str, float, float], ...]
    alpha_used: float
    pool_size_m: int
    k_requested: int
    strategy: str = STRATEGY_RERANKER
    warnings: Tuple[str, ...] = ()

    def __post_init__(self):
        negatives = tuple((str(t), float(s), float(w)) for t, s, w in self.negatives)
        object.__setattr__(self, "negatives", negatives)
        object.__setattr__(self, "warnings", tuple(self.warnings))
        if len(negatives) > self.k_requested:
            raise InputFormatError(f"{self.query_id}: {len(negatives)} negatives exceed K={self.k_requested}")
        if any(t == self.positive_id for t, _, _ in negatives):
            raise InputFormatError(f"{self.query_id}: the positive '{self.positive_id}' is listed as a negative")
        for (_, a, _), (_, b, _) in zip(negatives, negatives[1:]):
            if b > a:
                raise InputFormatError(f"{self.query_id}: negatives are not sorted by score")
        if self.strategy in THRESHOLDED_STRATEGIES:
            line = self.alpha_used * self.positive_score
            for target_id, score, _ in negatives:
                if not score < line:
                    raise InputFormatError(
                        f"{self.query_id}: negative '{target_id}' scores {score} >= alpha * s+ = {line}"
                    )
        weights = [w for _, _, w in negatives]
        if any(w <= 0 for w in weights):
            raise InputFormatError(f"{self.query_id}: negative weights must be > 0")
        if weights and abs(sum(weights) - len(weights)) > 1e-9 * len(weights):
            raise InputFormatError(f"{self.query_id}: weights sum to {sum(weights)}, expected {len(weights)}")

    @property
    def negative_ids(self) -> List[str]:
        return [t for t, _, _ in self.negatives]

    def to_dict(self) -> Dict:
        return {
            "query_id": self.query_id,
            "positive_id": self.positive_id,
            "positive_score": self.positive_score,
            "negatives": [[t, s, w] for t, s, w in self.negatives],
            "alpha_used": self.alpha_used,
            "pool_size_m": self.pool_size_m,
            "k_requested": self.k_requested,
            "strategy": self.strategy,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "MinedNegatives":
        try:
            return cls(
                query_id=data["query_id"],
                positive_id=data["positive_id"],
                positive_score=float(data["positive_score"]),
                negatives=tuple(tuple(n) for n in data["negatives"]),
                alpha_used=float(data["alpha_used"]),
                pool_size_m=int(data["pool_size_m"]),
                k_requested=int(data["k_requested"]),
                strategy=data.get("strategy", STRATEGY_RERANKER),
                warnings=tuple(data.get("warnings", ())),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise InputFormatError(f"Bad mined record: {e}") from e


def select_negatives(pool: Sequence[Tuple[str, float]], positive_score: float,
                     alpha: float, k: int) -> List[Tuple[str, float]]:
    """
    The selection walk: sort high to low (equal scores keep pool order) and
    accept scores strictly below ``alpha * positive_score`` until ``k`` are kept.
    """
    line = alpha * positive_score
    accepted = []
    for target_id, score in sorted(pool, key=lambda pair: -pair[1]):
        if len(accepted) == k:
            break
        if score < line:
            accepted.append((target_id, score))
    return accepted


def parse_weight_scheme(text: str) -> Tuple[str, Optional[float]]:
    """``uniform`` or ``softmax:TEMP`` as given on the command line."""
    if text == WEIGHTS_UNIFORM:
        return WEIGHTS_UNIFORM, None
    if text.startswith("softmax:"):
        try:
            temp = float(text.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"Bad softmax temperature in '{text}'") from None
        if temp <= 0:
            raise ConfigError(f"Softmax temperature must be > 0, got {temp}")
        return WEIGHTS_SOFTMAX, temp
    raise ConfigError(f"Unknown weight scheme '{text}' (use uniform or softmax:TEMP)")


def format_weight_scheme(scheme: str, temp: Optional[float]) -> str:
    return WEIGHTS_UNIFORM if scheme == WEIGHTS_UNIFORM else f"softmax:{temp}"


def assign_weights(mined: MinedNegatives, scheme: str = WEIGHTS_UNIFORM,
                   temp: Optional[float] = None) -> MinedNegatives:
    """
    Attach loss weights to mined negatives.

    ``uniform`` gives every negative weight 1. ``score_softmax`` gives
    w_k = n * softmax(s / temp)_k, so the weights sum to n and equal scores
    give all-ones.
    """
    if not mined.negatives:
        raise PreconditionError(f"{mined.query_id}: no negatives to weight")
    n = len(mined.negatives)
    if scheme == WEIGHTS_UNIFORM:
        weights = np.ones(n)
    elif scheme == WEIGHTS_SOFTMAX:
        if temp is None or temp <= 0:
            raise ConfigError(f"score_softmax needs a temperature > 0, got {temp}")
        logits = np.array([s for _, s, _ in mined.negatives], dtype=np.float64) / temp
        logits -= logits.max()
        exp = np.exp(logits)
        weights = n * exp / exp.sum()
    else:
        raise ConfigError(f"Unknown weight scheme '{scheme}'")
    negatives = tuple((t, s, float(w)) for (t, s, _), w in zip(mined.negatives, weights))
    return replace(mined, negatives=negatives)


@dataclass(frozen=True)
class MiningSummary:
    written: int
    skipped: int
    failures: Tuple[Tuple[str, str], ...] = field(default_factory=tuple)
    backend_calls: int = 0


@dataclass(frozen=True)
class FalseNegativeReport:
    ratio_pct: float
    judged: int
    judged_relevant: int
    population: int

    def to_dict(self) -> Dict:
        return {
            "ratio_pct": self.ratio_pct,
            "judged": self.judged,
            "judged_relevant": self.judged_relevant,
            "population": self.population,
        }


def _atomic_write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_path = path + ".tmp"
    with open(tmp_path, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp_path, path)


def read_mined_dataset(path: str) -> Tuple[Dict, List[MinedNegatives], List[Dict]]:
    """Read a mined dataset file into (header, records, failures)."""
    header: Dict = {}
    records: List[MinedNegatives] = []
    failures: List[Dict] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as e:
                raise InputFormatError(f"{path}:{lineno}: {e}") from e
            kind = data.get("kind")
            if kind == "header":
                header = data
            elif kind == "failures":
                failures = list(data.get("items", []))
            else:
                records.append(MinedNegatives.from_dict(data))
    return header, records, failures


def read_checkpoint(path: Optional[str]) -> List[str]:
    if not path or not os.path.exists(path):
        return []
    try:
        with open(path, "r", encoding="utf-8") as f:
            done = json.load(f)
    except json.JSONDecodeError as e:
        raise InputFormatError(f"{path}: unreadable checkpoint ({e})") from e
    if not isinstance(done, list):
        raise InputFormatError(f"{path}: checkpoint must be a list of query ids")
    return [str(x) for x in done]


class HardNegativeMiner:
    """
    Mines hard negatives for training pairs.

    Args:
        gateway: Backend access; the reranker scores the pool
        index: Candidate index the pool is drawn from
        query_embeddings: One unit row per query
        ecr_store: Original candidate traces keyed by id
        reranker_backend: Pairwise backend id used as the hardness scorer
        seed: Root seed for the random baseline and audit sampling
    """

    def __init__(self, gateway: ReasoningGateway, index: Index, query_embeddings: EmbeddingMatrix,
                 ecr_store: Dict[str, EcrTrace], reranker_backend: str, seed: int = 0):
        self.gateway = gateway
        self.index = index
        self.query_embeddings = query_embeddings
        self._query_rows = {qid: row for row, qid in enumerate(query_embeddings.ids)}
        self.ecr_store = ecr_store
        self.reranker_backend = reranker_backend
        self.seed = seed

    def log(self, msg: str):
        logger.info(msg)

    def _query_vector(self, query: Item) -> np.ndarray:
        row = self._query_rows.get(query.id)
        if row is None:
            raise InputFormatError(f"Query '{query.id}' has no embedding row")
        return self.query_embeddings.vectors[row]

    def _trace(self, item_id: str) -> EcrTrace:
        trace = self.ecr_store.get(item_id)
        if trace is None:
            raise InputFormatError(f"No ECR trace stored for '{item_id}'")
        return trace

    def _pool(self, query: Item, positive: Item, m: int) -> Tuple[List[Tuple[str, float]], Tuple[str, ...]]:
        available = self.index.size - (1 if self.index.contains(positive.id) else 0)
        warnings = ()
        if m > available:
            warnings = (f"pool_size_m {m} clamped to {available}",)
            logger.warning(f"{query.id}: {warnings[0]}")
            m = available
        if m < 1:
            return [], warnings
        ranked = top_k(self.index, self._query_vector(query), m, exclude={positive.id}, query_id=query.id)
        return list(ranked.entries), warnings

    @staticmethod
    def _check_params(m: int, k: int, alpha: float) -> None:
        if not 0 < alpha < 1:
            raise PreconditionError(f"alpha must lie in (0, 1), got {alpha}")
        if k < 1 or k > m:
            raise PreconditionError(f"Need 1 <= K <= M, got K={k}, M={m}")

    def _score_pool(self, query: Item, ids: Sequence[str], budget: Optional[TokenBudget]) -> List[float]:
        workers = self.gateway.backend(self.reranker_backend).max_in_flight

        def score(candidate_id: str) -> float:
            return self.gateway.score_pair(query, self._trace(candidate_id), self.reranker_backend,
                                           budget=budget).score

        if not ids:
            return []
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(score, ids))

    def mine_hard_negatives(self, query: Item, positive: Item, m: int = DEFAULT_M, k: int = DEFAULT_K,
                            alpha: float = DEFAULT_ALPHA,
                            budget: Optional[TokenBudget] = None) -> MinedNegatives:
        """
        Mine up to ``k`` reranker-filtered negatives from the top-``m`` pool.

        Returns:
            MinedNegatives with uniform weights; the pool clamp, if any, is in ``warnings``
        """
        self._check_params(m, k, alpha)
        if positive.id not in self.ecr_store:
            raise PreconditionError(f"Positive '{positive.id}' has no ECR trace")
        positive_score = self.gateway.score_pair(query, self._trace(positive.id), self.reranker_backend,
                                                 budget=budget).score
        pool, warnings = self._pool(query, positive, m)
        ids = [cid for cid, _ in pool]
        scored = list(zip(ids, self._score_pool(query, ids, budget)))
        accepted = select_negatives(scored, positive_score, alpha, k)
        return MinedNegatives(
            query_id=query.id,
            positive_id=positive.id,
            positive_score=positive_score,
            negatives=tuple((cid, s, 1.0) for cid, s in accepted),
            alpha_used=alpha,
            pool_size_m=len(pool),
            k_requested=k,
            strategy=STRATEGY_RERANKER,
            warnings=warnings,
        )

    def mine_embedder_negatives(self, query: Item, positive: Item, m: int = DEFAULT_M, k: int = DEFAULT_K,
                                alpha: float = DEFAULT_ALPHA) -> MinedNegatives:
        """Same walk with the query cosine as the score and a positive-aware cosine threshold."""
        self._check_params(m, k, alpha)
        if not self.index.contains(positive.id):
            raise PreconditionError(f"Positive '{positive.id}' is not in the index")
        positive_score = cosine(self._query_vector(query), self.index.vector(positive.id))
        pool, warnings = self._pool(query, positive, m)
        accepted = select_negatives(pool, positive_score, alpha, k)
        return MinedNegatives(
            query_id=query.id,
            positive_id=positive.id,
            positive_score=positive_score,
            negatives=tuple((cid, s, 1.0) for cid, s in accepted),
            alpha_used=alpha,
            pool_size_m=len(pool),
            k_requested=k,
            strategy=STRATEGY_EMBEDDER,
            warnings=warnings,
        )

    def mine_random_negatives(self, query: Item, positive: Item, m: int = DEFAULT_M,
                              k: int = DEFAULT_K) -> MinedNegatives:
        """``k`` seeded uniform draws from the top-``m`` pool, unfiltered."""
        pool, warnings = self._pool(query, positive, m)
        rng = np.random.default_rng(derive_seed(self.seed, f"random-negatives:{query.id}"))
        picks = sorted(rng.choice(len(pool), size=min(k, len(pool)), replace=False).tolist()) if pool else []
        chosen = [pool[i] for i in picks]
        return self._unfiltered(query, positive, chosen, len(pool), k, STRATEGY_RANDOM, warnings)

    def mine_naive_topk(self, query: Item, positive: Item, m: int = DEFAULT_M,
                        k: int = DEFAULT_K) -> MinedNegatives:
        """The first ``k`` pool entries, with no false-negative filter."""
        pool, warnings = self._pool(query, positive, m)
        return self._unfiltered(query, positive, pool[:k], len(pool), k, STRATEGY_NAIVE, warnings)

    def _unfiltered(self, query: Item, positive: Item, chosen: List[Tuple[str, float]], pool_size: int,
                    k: int, strategy: str, warnings: Tuple[str, ...]) -> MinedNegatives:
        positive_score = (cosine(self._query_vector(query), self.index.vector(positive.id))
                          if self.index.contains(positive.id) else 1.0)
        chosen = sorted(chosen, key=lambda pair: -pair[1])
        return MinedNegatives(
            query_id=query.id,
            positive_id=positive.id,
            positive_score=positive_score,
            negatives=tuple((cid, s, 1.0) for cid, s in chosen),
            alpha_used=1.0,
            pool_size_m=pool_size,
            k_requested=k,
            strategy=strategy,
            warnings=warnings,
        )

    def mine_corpus(self, pairs: Sequence[Tuple[Item, Item]], out_path: str,
                    checkpoint_path: Optional[str] = None, m: int = DEFAULT_M, k: int = DEFAULT_K,
                    alpha: float = DEFAULT_ALPHA, weights: str = WEIGHTS_UNIFORM,
                    weight_temp: Optional[float] = None, workers: int = 4, flush_every: int = 10,
                    max_failure_ratio: float = 0.1, progress: bool = True) -> MiningSummary:
        """
        Mine every (query, positive) pair into a dataset file.

        Records are written in input order after a header line. Query ids
        already listed in the checkpoint are skipped and their records kept.
        Pairs whose backend calls fail are recorded in a failures trailer and
        retried on the next run; more failures than ``max_failure_ratio`` of
        the input aborts the run after a final flush.

        Returns:
            MiningSummary with written/skipped counts and per-query failures
        """
        self._check_params(m, k, alpha)
        seen = set()
        for query, _ in pairs:
            if query.id in seen:
                raise InputFormatError(f"Query '{query.id}' appears in more than one training pair")
            seen.add(query.id)

        header = {"kind": "header", "alpha": alpha, "k": k, "m": m,
                  "weights": format_weight_scheme(weights, weight_temp), "reranker": self.reranker_backend}
        done_ids = set(read_checkpoint(checkpoint_path))
        records: Dict[str, MinedNegatives] = {}
        if done_ids and os.path.exists(out_path):
            previous_header, previous, _ = read_mined_dataset(out_path)
            changed = sorted(key for key in MINING_HEADER_KEYS if previous_header.get(key) != header[key])
            if changed:
                raise ConfigError(
                    f"{out_path} was mined with different settings ({', '.join(changed)}); "
                    f"use a fresh output and checkpoint or the original settings"
                )
            records = {r.query_id: r for r in previous if r.query_id in done_ids and r.query_id in seen}
        # a checkpointed id without a stored record is mined again
        done_ids = set(records)
        order = {query.id: i for i, (query, _) in enumerate(pairs)}
        pending = [(q, p) for q, p in pairs if q.id not in done_ids]
        skipped = len(pairs) - len(pending)
        if skipped:
            self.log(f"✓ Resuming: skipped {skipped} already mined queries")
        failures: Dict[str, str] = {}
        budget = TokenBudget()

        def flush():
            lines = [json.dumps(header, sort_keys=True)]
            for query_id in sorted(records, key=lambda q: order.get(q, len(order))):
                lines.append(json.dumps(records[query_id].to_dict(), sort_keys=True))
            if failures:
                items = [{"query_id": q, "error": failures[q]} for q in sorted(failures, key=order.get)]
                lines.append(json.dumps({"kind": "failures", "items": items}, sort_keys=True))
            _atomic_write(out_path, "\n".join(lines) + "\n")
            if checkpoint_path:
                _atomic_write(checkpoint_path, json.dumps(sorted(records)))

        def mine_one(pair: Tuple[Item, Item]) -> MinedNegatives:
            query, positive = pair
            mined = self.mine_hard_negatives(query, positive, m=m, k=k, alpha=alpha, budget=budget)
            if mined.negatives:
                mined = assign_weights(mined, weights, weight_temp)
            return mined

        completed_since_flush = 0
        executor = ThreadPoolExecutor(max_workers=max(1, workers))
        bar = tqdm(total=len(pending), desc="Mining", disable=not progress)
        try:
            futures = {executor.submit(mine_one, pair): pair[0].id for pair in pending}
            outstanding = set(futures)
            while outstanding:
                finished, outstanding = wait(outstanding, return_when=FIRST_COMPLETED)
                for future in finished:
                    query_id = futures[future]
                    try:
                        records[query_id] = future.result()
                    except GatewayError as e:
                        failures[query_id] = str(e)
                        self.log(f"✗ Mining failed for {query_id}: {e}")
                    bar.update(1)
                    completed_since_flush += 1
                if len(failures) > max_failure_ratio * max(1, len(pairs)):
                    flush()
                    raise MiningAbortedError(
                        f"{len(failures)} of {len(pairs)} pairs failed, above the {max_failure_ratio:.0%} limit"
                    )
                if completed_since_flush >= flush_every:
                    flush()
                    completed_since_flush = 0
        except KeyboardInterrupt:
            self.log("✗ Interrupted; flushing checkpoint")
            flush()
            raise
        finally:
            bar.close()
            executor.shutdown(wait=False, cancel_futures=True)
        flush()
        self.log(f"✓ Mined {len(records) - skipped} queries into {out_path} ({len(failures)} failures)")
        return MiningSummary(
            written=len(records),
            skipped=skipped,
            failures=tuple((q, failures[q]) for q in sorted(failures, key=order.get)),
            backend_calls=budget.backend_calls,
        )

    def estimate_false_negative_ratio(self, records: Sequence[MinedNegatives], queries: Dict[str, Item],
                                      judge_backend: str, sample_size: int,
                                      seed: Optional[int] = None) -> FalseNegativeReport:
        """
        Share of mined negatives a judge finds relevant to their query.

        A seeded uniform sample of (query, negative) pairs is scored by
        ``judge_backend``; a score of 0.5 or more counts as relevant.
        """
        if sample_size < 1:
            raise PreconditionError(f"sample_size must be >= 1, got {sample_size}")
        population = [(r.query_id, t) for r in records for t in r.negative_ids]
        if not population:
            return FalseNegativeReport(ratio_pct=0.0, judged=0, judged_relevant=0, population=0)
        if sample_size >= len(population):
            sample = population
        else:
            rng = np.random.default_rng(derive_seed(self.seed if seed is None else seed, "false-negative-audit"))
            picks = sorted(rng.choice(len(population), size=sample_size, replace=False).tolist())
            sample = [population[i] for i in picks]
        relevant = 0
        for query_id, target_id in sample:
            query = queries.get(query_id)
            if query is None:
                raise InputFormatError(f"Mined record refers to unknown query '{query_id}'")
            score = self.gateway.score_pair(query, self._trace(target_id), judge_backend).score
            if score >= JUDGE_THRESHOLD:
                relevant += 1
        ratio = 100.0 * relevant / len(sample)
        self.log(f"✓ Judged {len(sample)} negatives: {relevant} relevant ({ratio:.2f}%)")
        return FalseNegativeReport(ratio_pct=ratio, judged=len(sample), judged_relevant=relevant,
                                   population=len(population))
