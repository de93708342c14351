from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import read_tree, small_config
from ideaevo.analysis import (TermLexicon, analyze_run, inter_round_continuity, intra_round_convergence,
                              load_lexicon, markdown_report, quality_groups, term_growth)
from ideaevo.errors import FormatError, ValidationError
from ideaevo.pipeline import run

S = 1 / math.sqrt(2)


def brute_intra(vecs):
    pairs = list(itertools.combinations(range(len(vecs)), 2))
    total = 0.0
    for i, j in pairs:
        a, b = np.asarray(vecs[i], float), np.asarray(vecs[j], float)
        total += float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
    return total / len(pairs)


def test_intra_examples():
    assert intra_round_convergence({1: [[1, 0]] * 3}) == {1: pytest.approx(1.0)}
    assert intra_round_convergence({1: [[1, 0], [0, 1]]}) == {1: 0.0}
    got = intra_round_convergence({1: [[1, 0], [0, 1], [S, S]]})[1]
    assert got == pytest.approx(0.4714, abs=1e-4)
    assert got == pytest.approx(brute_intra([[1, 0], [0, 1], [S, S]]), abs=1e-12)
    assert intra_round_convergence({1: [[1, 0]], 2: [[1, 0], [1, 0]]}) == {2: pytest.approx(1.0)}


def test_inter_examples():
    assert inter_round_continuity({1: [[1, 0], [0, 1]], 2: [[1, 0], [0, 1]]})[0][2] == pytest.approx(1.0)
    assert inter_round_continuity({1: [[1, 0]], 2: [[0, 1]]}) == [(1, 2, 0.0)]
    assert inter_round_continuity({1: [[1, 0]]}) == []


@pytest.mark.parametrize("seed", range(3))
def test_inter_matches_direct_recomputation(seed):
    rng = np.random.default_rng(seed)
    rounds = {r: [x / np.linalg.norm(x) for x in rng.normal(size=(4, 6))] for r in (1, 2, 3)}
    got = inter_round_continuity(rounds)
    assert [(a, b) for a, b, _ in got] == [(1, 2), (2, 3)]
    for a, b, v in got:
        ma, mb = sum(rounds[a]) / 4, sum(rounds[b]) / 4
        assert v == pytest.approx(float(ma @ mb / (np.linalg.norm(ma) * np.linalg.norm(mb))), abs=1e-12)


def test_term_growth_examples():
    lex = TermLexicon.from_terms(["phase transition"])
    rounds = {1: ["A Phase  Transition view"], 2: ["nothing"], 3: ["more"]}
    assert term_growth(rounds, lex) == {1: 1, 2: 1, 3: 1}
    assert term_growth({1: ["x"], 2: ["y"]}, lex) == {1: 0, 2: 0}
    assert term_growth({1: ["phase transitions"]}, lex) == {1: 0}  # whole phrase only
    with pytest.raises(ValidationError):
        term_growth({1: ["x"]}, TermLexicon())


@given(st.dictionaries(st.integers(1, 12), st.lists(st.sampled_from(
    ["entropy", "graph", "phase transition", "noise", "Entropy and noise", "lattice"]), max_size=4), min_size=1))
@settings(max_examples=100, deadline=None)
def test_term_growth_monotone(rounds):
    lex = TermLexicon.from_terms(["entropy", "phase transition", "lattice", "noise"])
    counts = [term_growth(rounds, lex)[r] for r in sorted(rounds)]
    assert counts == sorted(counts)


def test_lexicon_normalization_and_loading(tmp_path):
    lex = TermLexicon({"Phase  Transition": "def", "phase transition": None})
    assert list(lex.terms) == ["phase transition"]
    with pytest.raises(ValidationError):
        TermLexicon.from_terms(["  "])
    (tmp_path / "l.txt").write_text("# comment\nentropy\tdisorder measure\nlattice\n")
    assert load_lexicon(tmp_path / "l.txt").terms == {"entropy": "disorder measure", "lattice": None}
    (tmp_path / "l.json").write_text('["a", {"term": "B", "definition": "x"}]')
    assert load_lexicon(tmp_path / "l.json").terms == {"a": None, "b": "x"}
    (tmp_path / "bad.json").write_text('["a", ')
    with pytest.raises(FormatError):
        load_lexicon(tmp_path / "bad.json")


def jump_rows():
    """20 ideas whose novelty means are exactly 4.90 then 5.40."""
    first = [4.4, 5.4] * 5
    second = [5.0, 5.8] * 5
    return [{"novelty": v, "iclr_overall": 4.0, "neurips_overall": 3.0} for v in first + second]


def test_quality_groups_emergent_jump():
    q = quality_groups(jump_rows(), group_size=10, margin=0.1)
    assert [round(g["novelty"], 10) for g in q.groups] == [4.9, 5.4]
    assert q.emergent_group == 2
    assert q.improvements == {"novelty": "4.90 → 5.40"}


def test_quality_groups_flat_and_partial():
    rows = [{"novelty": 5.0, "iclr_overall": 5.0, "neurips_overall": 3.0}] * 30
    assert quality_groups(rows).emergent_group is None
    q = quality_groups(rows[:4])
    assert q.partial and len(q.groups) == 1 and q.groups[0]["n"] == 4


def test_quality_groups_match_direct_averages():
    rng = np.random.default_rng(0)
    rows = [{"novelty": float(rng.integers(1, 11)), "iclr_overall": float(rng.integers(1, 11)),
             "neurips_overall": float(rng.integers(1, 7))} for _ in range(50)]
    q = quality_groups(rows, group_size=10)
    for g in q.groups:
        block = rows[(g["group"] - 1) * 10: g["group"] * 10]
        for m in ("novelty", "iclr_overall", "neurips_overall"):
            assert g[m] == pytest.approx(sum(r[m] for r in block) / len(block), abs=1e-12)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("analysis") / "run"
    run(small_config(out, rounds=3, ideas_per_round=3))
    return out


def test_analyze_run_is_pure_and_reproducible(run_dir, tmp_path):
    before = read_tree(run_dir)
    a = analyze_run(run_dir, group_size=3).csvs()
    b = analyze_run(run_dir, group_size=3).csvs()
    assert a == b and read_tree(run_dir) == before
    assert a["intra_round.csv"].splitlines()[0] == "round,intra_round_similarity"
    assert len(a["intra_round.csv"].splitlines()) == 4 and len(a["inter_round.csv"].splitlines()) == 3
    for line in a["intra_round.csv"].splitlines()[1:] + a["inter_round.csv"].splitlines()[1:]:
        assert -1.0 <= float(line.split(",")[-1]) <= 1.0


def test_markdown_report_mentions_group_indexing(run_dir):
    text = markdown_report(run_dir)
    assert "group index, not a round index" in text
    assert text.startswith("# Run report")
