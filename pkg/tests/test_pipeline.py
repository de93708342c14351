from __future__ import annotations

import json

import pytest

from conftest import read_tree, small_config
from ideaevo.errors import ConfigError, FormatError, RunHalted
from ideaevo.llm_provider import FaultInjector
from ideaevo.pipeline import RunConfig, load_config, resume, run


def tags_of(run_dir):
    return [json.loads(line)["tag"] for line in (run_dir / "transcript.jsonl").read_text().splitlines()]


def first_index(tags, prefix):
    return next(i for i, t in enumerate(tags) if t.startswith(prefix))


def test_config_validation_fails_fast(tmp_path):
    with pytest.raises(ConfigError):
        small_config(tmp_path, rounds=0)
    with pytest.raises(ConfigError):
        small_config(tmp_path, target_disciplines=["Physics"], disciplines=["Chemistry"])
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"topic": "x", "target_disciplines": ["Physics"], "colour": "red"})
    with pytest.raises(ConfigError):
        small_config(tmp_path, evolution={"crossover_rate": 2.0})
    assert not (tmp_path / "transcript.jsonl").exists()


def test_load_config_interpolation_and_seed_override(tmp_path, monkeypatch):
    monkeypatch.setenv("MY_TOPIC", "grokking")
    monkeypatch.setenv("EVOSCI_SEED", "17")
    path = tmp_path / "c.yaml"
    path.write_text("topic: ${MY_TOPIC}\ntarget_disciplines: [Physics]\nseed: 3\nprovider:\n  kind: mock\n")
    cfg = load_config(path)
    assert cfg.topic == "grokking" and cfg.seed == 17
    assert load_config(path, seed=5).seed == 5
    path.write_text("topic: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_single_round_structure(tmp_path):
    out = tmp_path / "run"
    summary = run(small_config(out, rounds=1))
    assert summary.rounds_completed == 1 and summary.ideas == 2
    assert sorted(p.name for p in (out / "rounds").iterdir()) == ["round_001.json"]
    tags = tags_of(out)
    stages = ["graph.classify", "topic.classify", "topic.expert", "topic.entities", "problems.generate",
              "problems.focus", "problems.select", "collab.delegate", "collab.task.BackgroundInvestigation",
              "collab.task.ProblemAnalysis", "collab.task.IdeaGeneration", "collab.task.IterativeRefinement",
              "collab.seed_ideas", "collab.refine", "review.ICLR", "meta.ICLR", "review.NeurIPS", "meta.NeurIPS",
              "loop.handoff"]
    positions = [first_index(tags, s) for s in stages]
    assert positions == sorted(positions)
    record = json.loads((out / "rounds" / "round_001.json").read_text())
    for key in ("selected_cluster", "tasks", "ideas", "meta_reviews", "fitness", "evolution_log", "duration"):
        assert key in record
    evo = [json.loads(line) for line in (out / record["evolution_log"]).read_text().splitlines()]
    assert [r["op"] for r in evo][:3] == ["fitness", "selection", "inheritance"]
    assert record["state_log"][3]["prior"] == [t["id"] for t in record["tasks"] if t["depth"] == 0][:3]


def test_identical_runs_are_byte_identical(tmp_path):
    out = tmp_path / "run"
    run(small_config(out))
    first = read_tree(out)
    run(small_config(out))
    assert read_tree(out) == first


def test_resume_after_outage_matches_uninterrupted_run(tmp_path):
    ref = tmp_path / "ref"
    run(small_config(ref, rounds=3))
    tags = tags_of(ref)
    round2 = [i for i, t in enumerate(tags) if t == "problems.generate"][1]
    round2_review = next(i for i, t in enumerate(tags) if i > round2 and t.startswith("review."))
    out = tmp_path / "halted"
    with pytest.raises(RunHalted) as info:
        run(small_config(out, rounds=3), backend_wrapper=lambda b: FaultInjector(b, outage_from=round2_review))
    done = info.value.completed_rounds
    assert done == 1
    before = {p: b for p, b in read_tree(out).items() if p.startswith("rounds/")}
    summary = resume(out / "checkpoint.json")
    assert summary.rounds_completed == 3 and summary.resumed_from == done
    after = read_tree(out)
    for p, b in before.items():
        assert after[p] == b  # completed rounds untouched
    expected = read_tree(ref)
    assert set(after) == set(expected)
    for p in expected:
        if p != "config.json":
            assert after[p] == expected[p], p


def test_resume_completed_run_is_noop(tmp_path):
    out = tmp_path / "run"
    run(small_config(out, rounds=1))
    before = read_tree(out)
    summary = resume(out)
    assert summary.rounds_completed == 1
    assert read_tree(out) == before


def test_corrupted_checkpoint_fails_fast(tmp_path):
    out = tmp_path / "run"
    run(small_config(out, rounds=1))
    cp = out / "checkpoint.json"
    cp.write_text(cp.read_text()[:50])
    before = (out / "transcript.jsonl").read_bytes()
    with pytest.raises(FormatError):
        resume(cp)
    assert (out / "transcript.jsonl").read_bytes() == before
    doc = json.loads(read_tree(tmp_path / "run")["config.json"])
    assert doc["rounds"] == 1


def test_checkpoint_version_mismatch(tmp_path):
    out = tmp_path / "run"
    run(small_config(out, rounds=1))
    cp = out / "checkpoint.json"
    doc = json.loads(cp.read_text())
    doc["version"] = 999
    cp.write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        resume(cp)


def test_evaluation_scope_all_feeds_more_evaluations(tmp_path):
    latest = tmp_path / "latest"
    every = tmp_path / "all"
    run(small_config(latest, rounds=3, target_disciplines=["Physics"]))
    run(small_config(every, rounds=3, target_disciplines=["Physics"], evaluation_scope="all"))
    def fit(d):
        return json.loads((d / "evolution" / "round_003.jsonl").read_text().splitlines()[0])["support"]

    n_latest = sum(len(v) for v in fit(latest).values())
    n_all = sum(len(v) for v in fit(every).values())
    assert n_all > n_latest
