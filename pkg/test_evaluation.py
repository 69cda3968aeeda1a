#!/usr/bin/env python3
"""
Tests for metrics, the synthetic benchmark, the experiment runner and the toy trainer
"""

import json
import math
import os
import random
import sys

import numpy as np
import pytest

from contrastive_loss import LossBatch, info_nce_loss
from core_model import ConfigError, InputFormatError, PreconditionError, RankedList, STAGE_RETRIEVAL
from evaluation import (
    ExperimentConfig,
    ExperimentRunner,
    RelevanceJudgments,
    SyntheticCorpus,
    SyntheticCorpusSpec,
    TrainingDivergedError,
    generate_synthetic_corpus,
    mean_over_queries,
    mine_toy_variants,
    ndcg_at_k,
    precision_at_k,
    recall_at_k,
    run_experiment,
    topk_gap_report,
    train_toy_embedder,
)
from hard_negative_miner import HardNegativeMiner, MinedNegatives, STRATEGY_RANDOM
from reasoning_gateway import BackendDescriptor, ReasoningGateway, SimBackendConfig
from vector_index import build_index, top_k

EXPERIMENT_BACKENDS = [
    {"backend_id": "sim-reasoner", "kind": "reasoner", "max_in_flight": 8},
    {"backend_id": "sim-reranker", "kind": "pairwise_reranker", "max_in_flight": 8},
]


def ranking(query_id, ids):
    return RankedList(query_id, tuple((cid, 1.0 - i / 100) for i, cid in enumerate(ids)), STAGE_RETRIEVAL, len(ids))


def stage1_rankings(corpus, k):
    index = build_index(corpus.candidate_embeddings)
    vectors = corpus.query_embeddings
    return [top_k(index, vectors.vectors[row], k, query_id=qid) for row, qid in enumerate(vectors.ids)]


def experiment(grid, sim=None, **corpus):
    settings = dict(n_candidates=300, n_queries=60, dim=16, signal_strength=0.5, seed=2)
    settings.update(corpus)
    return ExperimentConfig.from_dict({
        "corpus": settings,
        "backends": EXPERIMENT_BACKENDS,
        "sim": sim or {},
        "base": {"top_k": 10, "rng_seed": 2},
        "grid": grid,
        "workers": 2,
    })


@pytest.fixture(autouse=True)
def _no_cache_override(monkeypatch):
    monkeypatch.delenv("CASCADE_CACHE_DIR", raising=False)


# --- metrics --------------------------------------------------------------

IDS = [f"c{i}" for i in range(1, 11)]


def test_precision_counts_relevant_in_top_k():
    judgments = RelevanceJudgments.from_binary({"q": ["c2", "c5", "c9"]})
    assert precision_at_k(ranking("q", IDS), judgments, 5) == pytest.approx(0.4)
    assert precision_at_k(ranking("q", IDS), judgments, 1) == 0.0


def test_recall_counts_share_of_relevant_found():
    judgments = RelevanceJudgments.from_binary({"q": ["c2", "c5", "c9"]})
    assert recall_at_k(ranking("q", IDS), judgments, 5) == pytest.approx(2 / 3)
    single = RelevanceJudgments.from_binary({"q": ["c3"]})
    assert recall_at_k(ranking("q", IDS), single, 5) == 1.0
    assert recall_at_k(ranking("q", IDS), single, 2) == 0.0


def test_ndcg_examples():
    judgments = RelevanceJudgments.from_binary({"q": ["c3"]})
    assert ndcg_at_k(ranking("q", IDS), judgments, 5) == pytest.approx(0.5)
    assert ndcg_at_k(ranking("q", ["c3"] + IDS[:2] + IDS[3:]), judgments, 5) == pytest.approx(1.0)
    assert ndcg_at_k(ranking("q", IDS), judgments, 2) == 0.0


def test_ndcg_ignores_order_below_k():
    rng = random.Random(4)
    for _ in range(1000):
        ids = IDS[:]
        rng.shuffle(ids)
        judgments = RelevanceJudgments.from_binary({"q": rng.sample(IDS, rng.randint(1, 4))})
        k = rng.randint(1, 9)
        tail = ids[k:]
        rng.shuffle(tail)
        before = ndcg_at_k(ranking("q", ids), judgments, k)
        after = ndcg_at_k(ranking("q", ids[:k] + tail), judgments, k)
        assert before == after
        assert 0.0 <= before <= 1.0 + 1e-12


def test_metric_errors():
    judgments = RelevanceJudgments.from_binary({"q": ["c1"]})
    with pytest.raises(PreconditionError):
        precision_at_k(ranking("q", IDS), judgments, 0)
    with pytest.raises(InputFormatError):
        recall_at_k(ranking("other", IDS), judgments, 5)
    with pytest.raises(PreconditionError):
        mean_over_queries(precision_at_k, [], judgments, 5)
    with pytest.raises(InputFormatError):
        RelevanceJudgments({"q": {"c1": 0.0}})
    with pytest.raises(InputFormatError):
        RelevanceJudgments({"q": {"c1": -1.0, "c2": 1.0}})


def test_short_rankings_are_flagged():
    judgments = RelevanceJudgments.from_binary({"a": ["c1"], "b": ["c2"]})
    report = mean_over_queries(precision_at_k, [ranking("a", IDS), ranking("b", ["c2", "c3"])], judgments, 5)
    assert report.truncated
    assert report.metric == "precision"
    assert report.per_query == {"a": pytest.approx(0.2), "b": pytest.approx(0.2)}
    assert report.value == pytest.approx(0.2)


def test_judgments_round_trip(tmp_path):
    judgments = RelevanceJudgments({"q1": {"a": 1.0, "b": 0.0}, "q2": {"c": 2.0}})
    path = str(tmp_path / "judgments.jsonl")
    judgments.write(path)
    assert RelevanceJudgments.read(path).gains == judgments.gains
    assert judgments.relevant("q1") == {"a": 1.0}


# --- gap report -----------------------------------------------------------

def test_gap_report_perfect_retriever():
    judgments = RelevanceJudgments.from_binary({f"q{i}": [f"p{i}"] for i in range(5)})
    rankings = [ranking(f"q{i}", [f"p{i}"] + [f"x{j}" for j in range(9)]) for i in range(5)]
    (row,) = topk_gap_report(rankings, judgments)
    assert (row.task, row.n_queries, row.k) == ("default", 5, 10)
    assert row.p_at_1 == 1.0 and row.r_at_k == 1.0 and row.gap == 0.0
    assert row.p_at_k == pytest.approx(0.1)


def test_gap_report_positive_at_rank_two():
    judgments = RelevanceJudgments.from_binary({f"q{i}": [f"p{i}"] for i in range(4)})
    rankings = [ranking(f"q{i}", ["x", f"p{i}"] + [f"y{j}" for j in range(8)]) for i in range(4)]
    tasks = {"q0": "t2v", "q1": "t2v", "q2": "v2t", "q3": "v2t"}
    rows = topk_gap_report(rankings, judgments, tasks)
    assert [r.task for r in rows] == ["t2v", "v2t"]
    for row in rows:
        assert row.p_at_1 == 0.0 and row.r_at_k == 1.0 and row.gap == 1.0


def test_gap_report_matches_recomputation():
    corpus = generate_synthetic_corpus(SyntheticCorpusSpec(n_candidates=300, n_queries=100, dim=16,
                                                           signal_strength=0.4, seed=11))
    rankings = stage1_rankings(corpus, 10)
    (row,) = topk_gap_report(rankings, corpus.judgments, corpus.tasks())
    positive = dict(corpus.pairs)
    hits_1 = sum(r.ids[0] == positive[r.query_id] for r in rankings) / len(rankings)
    hits_10 = sum(positive[r.query_id] in r.ids for r in rankings) / len(rankings)
    assert row.task == "synthetic_t2v"
    assert row.p_at_1 == pytest.approx(hits_1)
    assert row.r_at_k == pytest.approx(hits_10)
    assert row.gap == pytest.approx(hits_10 - hits_1)
    assert row.gap >= 0


def test_gap_report_needs_rankings():
    with pytest.raises(PreconditionError):
        topk_gap_report([], RelevanceJudgments.from_binary({"q": ["a"]}))


# --- synthetic corpus -----------------------------------------------------

def test_full_signal_puts_positive_first():
    corpus = generate_synthetic_corpus(SyntheticCorpusSpec(n_candidates=200, n_queries=50, dim=16,
                                                           signal_strength=1.0, seed=1))
    report = mean_over_queries(precision_at_k, stage1_rankings(corpus, 1), corpus.judgments, 1)
    assert report.value == 1.0


def test_zero_signal_is_chance():
    n_candidates = 50
    hits = trials = 0
    for seed in range(50):
        corpus = generate_synthetic_corpus(SyntheticCorpusSpec(n_candidates=n_candidates, n_queries=20, dim=8,
                                                               signal_strength=0.0, distractor_count=0,
                                                               seed=seed))
        positive = dict(corpus.pairs)
        for r in stage1_rankings(corpus, 1):
            hits += r.ids[0] == positive[r.query_id]
            trials += 1
    p = 1 / n_candidates
    assert abs(hits / trials - p) <= 3 * math.sqrt(p * (1 - p) / trials)


def test_corpus_layout():
    spec = SyntheticCorpusSpec(n_candidates=100, n_queries=30, dim=8, distractor_count=4,
                               unlabeled_relevant_per_query=2, seed=3)
    corpus = generate_synthetic_corpus(spec)
    assert spec.clusters == 20
    assert len(corpus.candidates) == 100 and len(corpus.queries) == 30
    assert np.allclose(np.linalg.norm(corpus.candidate_embeddings.vectors, axis=1), 1.0)
    assert set(corpus.ecr_store) == {c.id for c in corpus.candidates}
    for query_id, positive_id in corpus.pairs:
        assert list(corpus.judgments.relevant(query_id)) == [positive_id]
    assert corpus.query("q00000").content_text == corpus.query("q00020").content_text


def test_same_spec_gives_identical_artifacts(tmp_path):
    spec = SyntheticCorpusSpec(n_candidates=120, n_queries=20, dim=8, seed=9)
    first, second = str(tmp_path / "a"), str(tmp_path / "b")
    generate_synthetic_corpus(spec).save(first)
    generate_synthetic_corpus(spec).save(second)
    names = sorted(os.listdir(first))
    assert names == ["candidates.crv", "corpus.jsonl", "ecr.jsonl", "judgments.jsonl", "pairs.jsonl", "queries.crv"]
    for name in names:
        with open(os.path.join(first, name), "rb") as a, open(os.path.join(second, name), "rb") as b:
            assert a.read() == b.read(), name


def test_saved_corpus_loads_back(tmp_path):
    corpus = generate_synthetic_corpus(SyntheticCorpusSpec(n_candidates=60, n_queries=10, dim=8, seed=2))
    corpus.save(str(tmp_path))
    loaded = SyntheticCorpus.load(str(tmp_path))
    assert loaded.pairs == corpus.pairs
    assert loaded.judgments.gains == corpus.judgments.gains
    assert np.array_equal(loaded.candidate_embeddings.vectors, corpus.candidate_embeddings.vectors)
    assert loaded.ecr_store["c00000"].summary == corpus.ecr_store["c00000"].summary


@pytest.mark.parametrize("settings", [
    {"signal_strength": 1.5},
    {"n_candidates": 3, "distractor_count": 4},
    {"unlabeled_relevant_per_query": 5, "distractor_count": 4},
    {"n_queries": 0},
])
def test_bad_corpus_settings(settings):
    with pytest.raises(ConfigError):
        SyntheticCorpusSpec(**settings)


def test_unknown_corpus_key():
    with pytest.raises(ConfigError):
        SyntheticCorpusSpec.from_dict({"n_videos": 10})


# --- experiment runner ----------------------------------------------------

def test_stage1_only_cell_matches_direct_metrics():
    config = experiment({"rerank_mode": ["none"]})
    (row,) = run_experiment(config, progress=False)
    corpus = generate_synthetic_corpus(config.corpus)
    rankings = stage1_rankings(corpus, 10)
    assert row["p_at_1"] == pytest.approx(mean_over_queries(precision_at_k, rankings, corpus.judgments, 1).value)
    assert row["ndcg_at_5"] == pytest.approx(mean_over_queries(ndcg_at_k, rankings, corpus.judgments, 5).value)
    assert row["stage1_recall_at_k"] == pytest.approx(
        mean_over_queries(recall_at_k, rankings, corpus.judgments, 10).value)
    assert row["backend_calls"] == 0


def test_oracle_reranker_reaches_recall():
    rows = run_experiment(experiment({"rerank_mode": ["pairwise"], "top_k": [5, 10]}), progress=False)
    assert [r["top_k"] for r in rows] == [5, 10]
    for row in rows:
        assert row["p_at_1"] == pytest.approx(row["stage1_recall_at_k"])
        assert row["backend_calls"] > 0


def test_experiment_is_deterministic():
    sim = {"sim-reranker": {"seed": 4, "fidelity": 0.6, "noise_scale": 0.2}}
    config = experiment({"rerank_mode": ["none", "pairwise"]}, sim=sim)
    assert run_experiment(config, progress=False) == run_experiment(config, progress=False)


def test_grid_order_and_outputs(tmp_path):
    config = experiment({"rerank_mode": ["none", "pairwise"], "top_k": [5, 10]}, n_queries=20)
    assert [(c.rerank_mode, c.top_k) for c in config.cells()] == [
        ("none", 5), ("none", 10), ("pairwise", 5), ("pairwise", 10)]
    out = str(tmp_path / "results")
    rows = ExperimentRunner(config).run_experiment(out, progress=False)
    assert [r["cell"] for r in rows] == [0, 1, 2, 3]
    with open(os.path.join(out, "report.jsonl"), encoding="utf-8") as f:
        assert [json.loads(line)["cell"] for line in f] == [0, 1, 2, 3]
    with open(os.path.join(out, "gap_plot.tsv"), encoding="utf-8") as f:
        lines = f.read().splitlines()
    assert lines[0] == "k\tprecision\trecall"
    assert [line.split("\t")[0] for line in lines[1:]] == ["1", "5", "10", "20", "50"]
    recalls = [float(line.split("\t")[2]) for line in lines[1:]]
    assert recalls == sorted(recalls)
    with open(os.path.join(out, "budget_plot.tsv"), encoding="utf-8") as f:
        assert len(f.read().splitlines()) == 5


@pytest.mark.parametrize("grid", [{}, {"rerank_mode": []}, {"learning_rate": [0.1]}])
def test_bad_grids(grid):
    with pytest.raises(ConfigError):
        experiment(grid)


def test_experiment_config_file(tmp_path):
    path = tmp_path / "missing.yaml"
    with pytest.raises(ConfigError):
        ExperimentConfig.load(str(path))
    path.write_text("corpus: {n_candidates: 50, n_queries: 5, dim: 4}\ngrid: {top_k: [3]}\n", encoding="utf-8")
    config = ExperimentConfig.load(str(path))
    assert config.corpus.dim == 4
    assert [c.top_k for c in config.cells()] == [3]


# --- toy trainer ----------------------------------------------------------

def single_query_setup():
    corpus = generate_synthetic_corpus(SyntheticCorpusSpec(n_candidates=40, n_queries=1, dim=6,
                                                           signal_strength=0.5, seed=8))
    query_id, positive_id = corpus.pairs[0]
    negatives = [cid for cid in corpus.candidate_embeddings.ids if cid != positive_id][:4]
    mined = MinedNegatives(query_id=query_id, positive_id=positive_id, positive_score=0.9,
                           negatives=tuple((cid, 0.1, 1.0) for cid in negatives), alpha_used=0.95,
                           pool_size_m=50, k_requested=4, strategy=STRATEGY_RANDOM)
    return corpus, mined


def test_zero_learning_rate_leaves_map_unchanged():
    corpus, mined = single_query_setup()
    (result,) = train_toy_embedder(corpus, {"random": [mined]}, epochs=3, lr=0.0).values()
    assert np.array_equal(result.weights, np.eye(6))
    assert result.final_p_at_1 == result.initial_p_at_1
    assert result.steps == 3
    assert len(result.loss_curve) == 3 and len(set(result.loss_curve)) == 1


def test_one_step_follows_the_loss_gradient():
    corpus, mined = single_query_setup()
    lr, tau = 0.05, 0.1
    result = train_toy_embedder(corpus, {"random": [mined]}, epochs=1, lr=lr, tau=tau)["random"]
    assert result.steps == 1

    rows = {cid: row for row, cid in enumerate(corpus.candidate_embeddings.ids)}
    vecs = corpus.candidate_embeddings.vectors
    x = corpus.query_embeddings.vectors[:1]
    positive = vecs[[rows[mined.positive_id]]]
    groups = ((vecs[[rows[cid] for cid in mined.negative_ids]], np.ones(4)),)

    def loss(weights):
        return info_nce_loss(LossBatch(x @ weights.T, positive, groups, tau))

    h = 1e-6
    numeric = np.zeros((6, 6))
    for i in range(6):
        for j in range(6):
            step = np.zeros((6, 6))
            step[i, j] = h
            numeric[i, j] = (loss(np.eye(6) + step) - loss(np.eye(6) - step)) / (2 * h)
    assert np.allclose((np.eye(6) - result.weights) / lr, numeric, rtol=1e-4, atol=1e-6)


def test_exploding_step_is_reported():
    corpus, mined = single_query_setup()
    with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError):
        train_toy_embedder(corpus, {"random": [mined]}, epochs=2, lr=float("inf"))


def test_trainer_arguments():
    corpus, mined = single_query_setup()
    with pytest.raises(PreconditionError):
        train_toy_embedder(corpus, {"random": [mined]}, epochs=-1)
    with pytest.raises(PreconditionError):
        train_toy_embedder(corpus, {"random": [mined]}, batch_size=0)


def test_reranker_negatives_train_at_least_as_well_as_random():
    corpus = generate_synthetic_corpus(SyntheticCorpusSpec(n_candidates=1200, n_queries=200, dim=32,
                                                           signal_strength=0.6, distractor_count=4,
                                                           unlabeled_relevant_per_query=2, seed=3))
    gateway = ReasoningGateway((BackendDescriptor("sim-reranker", "pairwise_reranker", max_in_flight=8),),
                               cache_enabled=False)
    miner = HardNegativeMiner(gateway, build_index(corpus.candidate_embeddings), corpus.query_embeddings,
                              corpus.ecr_store, "sim-reranker", seed=3)
    variants = mine_toy_variants(corpus, miner)
    assert set(variants) == {"rhnm", "rhnm_weighted", "random", "embedder"}
    assert all(len(records) == 200 for records in variants.values())
    results = train_toy_embedder(corpus, variants, epochs=30, seed=3)
    initial = {r.initial_p_at_1 for r in results.values()}
    assert len(initial) == 1
    for result in results.values():
        assert all(math.isfinite(v) for v in result.loss_curve)
        assert result.steps == 30 * math.ceil(200 / 16)
    assert results["rhnm"].final_p_at_1 >= results["random"].final_p_at_1


def test_weighted_reranker_variant_is_trained_and_reported():
    corpus = generate_synthetic_corpus(SyntheticCorpusSpec(n_candidates=300, n_queries=40, dim=16,
                                                           signal_strength=0.6, distractor_count=4, seed=5))
    gateway = ReasoningGateway((BackendDescriptor("sim-reranker", "pairwise_reranker"),), cache_enabled=False,
                               sim_configs={"sim-reranker": SimBackendConfig(seed=5, fidelity=0.9, noise_scale=0.05)})
    miner = HardNegativeMiner(gateway, build_index(corpus.candidate_embeddings), corpus.query_embeddings,
                              corpus.ecr_store, "sim-reranker", seed=5)
    variants = mine_toy_variants(corpus, miner, m=30, k=5, weight_temp=0.05)
    assert list(variants) == ["rhnm", "rhnm_weighted", "random", "embedder"]

    reweighted = 0
    for plain, weighted in zip(variants["rhnm"], variants["rhnm_weighted"]):
        assert [t for t, _, _ in weighted.negatives] == [t for t, _, _ in plain.negatives]
        weights = [w for _, _, w in weighted.negatives]
        if weights:
            assert sum(weights) == pytest.approx(len(weights))
            reweighted += any(w != pytest.approx(1.0) for w in weights)
    assert reweighted > 0

    results = train_toy_embedder(corpus, variants, epochs=3, seed=5)
    report = results["rhnm_weighted"].to_dict()
    assert report["variant"] == "rhnm_weighted"
    assert len(report["loss_curve"]) == 3
    assert all(math.isfinite(v) for v in report["loss_curve"])
    assert 0.0 <= report["final_p_at_1"] <= 1.0

    with pytest.raises(ConfigError):
        mine_toy_variants(corpus, miner, weight_temp=0.0)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
