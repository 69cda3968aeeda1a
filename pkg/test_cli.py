#!/usr/bin/env python3
"""
Tests for the command-line surface
"""

import json
import os
import sys

import pytest

from core_model import ConfigError
from evaluation import ExperimentConfig, run_experiment
from hard_negative_miner import read_mined_dataset
from interface import cli
from interface.cli import AppConfig, load_app_config, main
from vector_index import load_index

EXPERIMENT_YAML = """
corpus: {n_candidates: 150, n_queries: 20, dim: 8, signal_strength: 0.5, seed: 4}
backends:
  - {backend_id: sim-reasoner, kind: reasoner, endpoint: sim}
  - {backend_id: sim-reranker, kind: pairwise_reranker, endpoint: sim}
sim:
  sim-reranker: {seed: 4, fidelity: 0.7, noise_scale: 0.1}
base: {top_k: 10, rng_seed: 4}
grid:
  rerank_mode: [none, pairwise]
workers: 2
"""


@pytest.fixture(autouse=True)
def _isolated(monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    for var in ("CASCADE_CACHE_DIR", "CASCADE_OUTPUT_DIR", "CASCADE_LOG_LEVEL", *cli.ENV_OVERRIDES):
        monkeypatch.delenv(var, raising=False)


@pytest.fixture
def work(tmp_path, capsys):
    path = str(tmp_path / "work")
    assert main(["synth", "--n-candidates", "120", "--n-queries", "20", "--dim", "8",
                 "--seed", "3", "--out", path]) == 0
    capsys.readouterr()
    return path


def corpus_flags(work):
    return ["--corpus", os.path.join(work, "corpus.jsonl"),
            "--candidate-embeddings", os.path.join(work, "candidates.crv"),
            "--query-embeddings", os.path.join(work, "queries.crv"),
            "--ecr", os.path.join(work, "ecr.jsonl")]


def stdout_records(capsys):
    return [json.loads(line) for line in capsys.readouterr().out.splitlines() if line.strip()]


def test_synth_reports_counts(tmp_path, capsys):
    out = str(tmp_path / "synth")
    assert main(["synth", "--n-candidates", "60", "--n-queries", "5", "--dim", "4", "--out", out]) == 0
    (record,) = stdout_records(capsys)
    assert record == {"command": "synth", "out": out, "queries": 5, "candidates": 60, "pairs": 5}
    assert os.path.exists(os.path.join(out, "ecr.jsonl"))


def test_build_index(work, tmp_path, capsys):
    out = str(tmp_path / "index.crv")
    assert main(["build-index", "--embeddings", os.path.join(work, "candidates.crv"), "--out", out]) == 0
    (record,) = stdout_records(capsys)
    assert record["size"] == 120 and record["dim"] == 8
    assert load_index(out).size == 120


def test_bad_magic_is_an_input_error(tmp_path, capsys):
    bad = tmp_path / "bad.crv"
    bad.write_bytes(b"XXXX" + bytes(32))
    assert main(["build-index", "--embeddings", str(bad), "--out", str(tmp_path / "i.crv")]) == 2
    assert "✗" in capsys.readouterr().err


def test_missing_file_is_an_input_error(tmp_path):
    assert main(["build-index", "--embeddings", str(tmp_path / "nope.crv"), "--out", str(tmp_path / "i")]) == 2


def test_retrieve_one_query(work, capsys):
    assert main(["retrieve", *corpus_flags(work), "--query-id", "q00003", "--top-k", "5", "--verify"]) == 0
    (record,) = stdout_records(capsys)
    assert record["query_id"] == "q00003"
    assert len(record["final"]["entries"]) == 5
    assert record["final"]["entries"] == record["stage1"]["entries"]


def test_unknown_query_id(work):
    assert main(["retrieve", *corpus_flags(work), "--query-id", "nobody"]) == 2


def test_pipeline_is_deterministic(work, tmp_path, capsys):
    argv = ["pipeline", *corpus_flags(work), "--mode", "pairwise", "--backend", "sim", "--seed", "7",
            "--no-cache", "--top-k", "5"]
    assert main(argv) == 0
    first = capsys.readouterr().out
    report = str(tmp_path / "reports" / "run.jsonl")
    assert main(argv + ["--report", report]) == 0
    second = capsys.readouterr().out
    assert first == second
    assert len(first.splitlines()) == 20
    with open(report, encoding="utf-8") as f:
        assert f.read() == second


def test_rerank_listwise_with_qar(work, capsys):
    assert main(["rerank", *corpus_flags(work), "--mode", "listwise", "--qar", "on", "--no-cache",
                 "--query-id", "q00001", "--top-k", "5"]) == 0
    (record,) = stdout_records(capsys)
    assert sorted(i for i, _ in record["final"]["entries"]) == sorted(i for i, _ in record["stage1"]["entries"])


def test_mine_then_resume(work, tmp_path, capsys):
    out = str(tmp_path / "mined.jsonl")
    checkpoint = str(tmp_path / "mined.ckpt")
    argv = ["mine", *corpus_flags(work), "--pairs", os.path.join(work, "pairs.jsonl"), "--alpha", "0.95",
            "--out", out, "--checkpoint", checkpoint, "--backend", "sim", "--no-cache"]
    assert main(argv) == 0
    (record,) = stdout_records(capsys)
    assert (record["written"], record["skipped"], record["failures"]) == (20, 0, 0)
    with open(out, encoding="utf-8") as f:
        header = json.loads(f.readline())
    assert header["kind"] == "header" and header["alpha"] == 0.95
    _, records, failures = read_mined_dataset(out)
    assert len(records) == 20 and failures == []

    assert main(argv) == 0
    captured = capsys.readouterr()
    assert "skipped: 20" in captured.err
    assert json.loads(captured.out)["backend_calls"] == 0


def test_audit(work, tmp_path, capsys):
    mined = str(tmp_path / "mined.jsonl")
    assert main(["mine", *corpus_flags(work), "--pairs", os.path.join(work, "pairs.jsonl"),
                 "--out", mined, "--no-cache"]) == 0
    capsys.readouterr()
    assert main(["audit", *corpus_flags(work), "--mined", mined, "--judge", "sim-judge",
                 "--sample", "50", "--no-cache"]) == 0
    (record,) = stdout_records(capsys)
    assert record["command"] == "audit" and record["judge"] == "sim-judge"
    assert record["judged"] <= 50
    assert 0.0 <= record["ratio_pct"] <= 100.0


def test_experiment_matches_library(tmp_path, capsys):
    path = tmp_path / "experiment.yaml"
    path.write_text(EXPERIMENT_YAML, encoding="utf-8")
    out = str(tmp_path / "results")
    assert main(["experiment", "--experiment", str(path), "--out", out, "--no-cache", "--quiet"]) == 0
    rows = stdout_records(capsys)
    assert rows == run_experiment(ExperimentConfig.load(str(path)), progress=False)
    assert sorted(os.listdir(out)) == ["budget_plot.tsv", "gap_plot.tsv", "report.jsonl"]


def test_toy_train_mines_in_process(work, capsys):
    assert main(["toy-train", "--workdir", work, "--epochs", "2", "--backend", "sim", "--no-cache"]) == 0
    records = stdout_records(capsys)
    assert [r["variant"] for r in records] == ["rhnm", "rhnm_weighted", "random", "embedder"]
    for record in records:
        assert len(record["loss_curve"]) == 2
        assert record["steps"] == 4


def test_toy_train_from_mined_file(work, tmp_path, capsys):
    mined = str(tmp_path / "mined.jsonl")
    assert main(["mine", *corpus_flags(work), "--pairs", os.path.join(work, "pairs.jsonl"),
                 "--out", mined, "--no-cache"]) == 0
    capsys.readouterr()
    assert main(["toy-train", "--workdir", work, "--epochs", "1", "--mined", f"rhnm={mined}"]) == 0
    (record,) = stdout_records(capsys)
    assert record["variant"] == "rhnm"
    assert main(["toy-train", "--workdir", work, "--mined", mined]) == 3


def test_missing_config_exits_with_config_error(tmp_path):
    assert main(["--config", str(tmp_path / "missing.yaml"), "synth", "--out", str(tmp_path / "x")]) == 3


def test_bad_log_level(tmp_path):
    assert main(["--log-level", "LOUD", "synth", "--out", str(tmp_path / "x")]) == 3


def test_interrupt_exit_code(monkeypatch, tmp_path):
    def interrupted(app, args):
        raise KeyboardInterrupt

    monkeypatch.setattr(cli, "cmd_synth", interrupted)
    assert main(["synth", "--out", str(tmp_path / "x")]) == 130


def test_config_file_beats_environment(tmp_path):
    path = tmp_path / "cascade.yaml"
    path.write_text("defaults: {top_k: 12}\npaths: {output_dir: from-file}\n", encoding="utf-8")
    env = {"CASCADE_TOP_K": "25", "CASCADE_ALPHA": "0.8", "CASCADE_OUTPUT_DIR": "from-env",
           "CASCADE_LOG_LEVEL": "DEBUG"}
    app = load_app_config(str(path), environ=env)
    assert app.defaults.top_k == 12
    assert app.defaults.alpha == 0.8
    assert app.paths["output_dir"] == "from-file"
    assert app.logging_level == "DEBUG"

    bare = tmp_path / "bare.yaml"
    bare.write_text("logging_level: WARNING\n", encoding="utf-8")
    app = load_app_config(str(bare), environ={"CASCADE_OUTPUT_DIR": "from-env"})
    assert app.paths["output_dir"] == "from-env"
    assert app.defaults.top_k == 10
    assert app.logging_level == "WARNING"


def test_default_config_loads():
    app = load_app_config(environ={})
    ids = [b.backend_id for b in app.backends]
    assert "sim-reranker" in ids and "sim-judge" in ids
    assert app.defaults.rerank_mode == "none"
    assert app.paths["templates"].endswith(os.path.join("config", "templates.yaml"))


@pytest.mark.parametrize("text,env", [
    ("defaults: {top_k: 0}\n", {}),
    ("defaults: {learning_rate: 0.1}\n", {}),
    ("- just\n- a list\n", {}),
    ("logging_level: INFO\n", {"CASCADE_TOP_K": "ten"}),
    ("backends:\n  - {backend_id: a, kind: reasoner}\n  - {backend_id: a, kind: reasoner}\n", {}),
])
def test_bad_configs(tmp_path, text, env):
    path = tmp_path / "cascade.yaml"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(ConfigError):
        load_app_config(str(path), environ=env)


def test_duplicate_backends_rejected():
    with pytest.raises(ConfigError):
        AppConfig(paths={}, backends=tuple(cli.BackendDescriptor(b, "reasoner") for b in ("x", "x")),
                  defaults=cli.PipelineConfig())


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
