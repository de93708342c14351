from __future__ import annotations

import json

import numpy as np
import pytest

from conftest import unit
from ideaevo.agent_corpus import (PersonaRole, ScientistProfile, assemble_team, build_from_raw,
                                  build_persona_prompt, load_dataset, make_persona, select_assistants,
                                  select_prime)
from ideaevo.embedding_space import cosine, normalize
from ideaevo.errors import FormatError, IntegrityError, ValidationError
from ideaevo.pipeline import bundled


def prof(alias, vec, **kw):
    return ScientistProfile(alias=alias, profile_embedding=normalize(vec), paper_count=60,
                            collaborators=["ScientistX"], **kw)


def seeded_profiles(n, dim=6, seed=0):
    rng = np.random.default_rng(seed)
    return [prof(f"Scientist{i}", rng.normal(size=dim)) for i in range(n)]


def test_load_three_profiles(tmp_path, embedder):
    recs = [{"alias": f"Scientist{i}", "topics": ["optics"], "paper_count": 80, "collaborators": ["Scientist9"],
             "profile_embedding": [1.0, float(i)]} for i in range(3)]
    (tmp_path / "p.json").write_text(json.dumps(recs))
    out = load_dataset(tmp_path / "p.json", embedder)
    assert [p.alias for p in out] == ["Scientist0", "Scientist1", "Scientist2"]
    for p in out:
        assert abs(np.linalg.norm(p.profile_embedding) - 1) < 1e-9


def test_duplicate_alias(tmp_path):
    recs = [{"alias": "Scientist0"}, {"alias": "Scientist0"}]
    (tmp_path / "p.json").write_text(json.dumps(recs))
    with pytest.raises(IntegrityError):
        load_dataset(tmp_path / "p.json")


def test_missing_embedding_is_backfilled_without_identity(tmp_path, embedder):
    rec = {"alias": "Scientist0", "topics": ["spin glass"], "affiliations": ["Lab A"], "paper_count": 70}
    (tmp_path / "p.jsonl").write_text(json.dumps(rec) + "\n")
    (p,) = load_dataset(tmp_path / "p.jsonl", embedder)
    assert abs(np.linalg.norm(p.profile_embedding) - 1) < 1e-9
    np.testing.assert_array_equal(p.profile_embedding, embedder.embed_text(p.sentence(with_identity=False)))
    assert "Scientist0" not in p.sentence(with_identity=False)


def test_bad_jsonl_reports_offset(tmp_path):
    good = json.dumps({"alias": "A", "profile_embedding": [1, 0]}) + "\n"
    (tmp_path / "p.jsonl").write_text(good + "{broken\n")
    with pytest.raises(FormatError) as info:
        load_dataset(tmp_path / "p.jsonl")
    assert info.value.offset >= len(good)


def test_bundled_dataset_loads():
    profiles = load_dataset(bundled("scientists.json"))
    assert len(profiles) >= 10 and len({p.alias for p in profiles}) == len(profiles)


def test_select_prime_examples():
    a, b = prof("Scientist0", [1, 0]), prof("Scientist1", [0, 1])
    assert select_prime([1, 0], [b, a]) is a
    tie = [prof("Scientist7", [1, 1]), prof("Scientist3", [1, 1])]
    assert select_prime([1, 0], tie).alias == "Scientist3"
    with pytest.raises(ValidationError):
        select_prime([1, 0], [])


@pytest.mark.parametrize("seed", range(5))
def test_select_prime_matches_exhaustive_scan(seed):
    profiles = seeded_profiles(10, seed=seed)
    topic = np.random.default_rng(seed + 50).normal(size=6)
    best, best_sim = None, -2.0
    for p in profiles:
        s = float(np.dot(p.profile_embedding, topic) / np.linalg.norm(topic))
        if s > best_sim:
            best, best_sim = p, s
    assert select_prime(topic, profiles) is best


def test_select_assistants_examples():
    profiles = seeded_profiles(5, seed=3)
    assert select_assistants([1, 0, 0, 0, 0, 0], profiles, 0) == []
    target = np.random.default_rng(9).normal(size=6)
    oracle = sorted(profiles, key=lambda p: -cosine(p.profile_embedding, target))
    assert select_assistants(target, profiles, 2) == oracle[:2]
    assert select_assistants(target, profiles, 2, exclude=oracle[0].alias)[0] is oracle[1]


def test_select_assistants_short_supply_warns():
    warnings = []
    out = select_assistants([1, 0], [prof("A", [1, 0]), prof("B", [0, 1])], 5, exclude="A", warnings=warnings)
    assert [p.alias for p in out] == ["B"]
    assert warnings and warnings[0]["available"] == 1


def test_selection_invariant_under_rescaling():
    profiles = seeded_profiles(8, seed=11)
    scaled = [ScientistProfile(alias=p.alias, profile_embedding=p.profile_embedding * (i + 1) * 3.7)
              for i, p in enumerate(profiles)]
    topic = np.random.default_rng(4).normal(size=6)
    assert select_prime(topic, profiles).alias == select_prime(topic, scaled).alias
    assert ([p.alias for p in select_assistants(topic, profiles, 3)]
            == [p.alias for p in select_assistants(topic, scaled, 3)])


def test_persona_prompts():
    mentor = make_persona(PersonaRole.MENTOR, name="Mentor")
    assert "responsibilit" in mentor.system_prompt.lower()
    p = prof("Scientist4", [1, 0], affiliations=["Institute of Optics", "Lab for Waves"])
    prime = make_persona(PersonaRole.PRIME, p)
    assert "Institute of Optics" in prime.system_prompt and "Lab for Waves" in prime.system_prompt
    assert "Your name is Scientist4" in prime.system_prompt
    assert build_persona_prompt(prime) == build_persona_prompt(prime)


def test_team_has_unique_aliases_and_size():
    profiles = seeded_profiles(12, seed=2)
    team = assemble_team(unit(1, 0, 0, 0, 0, 0), unit(0, 1, 0, 0, 0, 0), profiles, team_size=4)
    assert len(team.assistants) == 3
    assert len(set(team.aliases())) == 4
    assert team.mentor.role is PersonaRole.MENTOR and team.prime.role is PersonaRole.PRIME


def test_build_from_raw_applies_filters(embedder):
    authors = [{"id": "a", "affiliations": ["U1"]}, {"id": "b", "affiliations": ["U2"]}]
    authors += [{"id": f"c{i}"} for i in range(60)]
    papers = [{"id": f"p{i}", "authors": ["a"] + [f"c{j}" for j in range(60)], "keywords": ["optics"]}
              for i in range(55)]
    papers += [{"id": f"q{i}", "authors": ["b", "a"], "keywords": ["waves"]} for i in range(10)]
    profiles = build_from_raw({"authors": authors, "papers": papers}, embedder)
    by_alias = {p.alias: p for p in profiles}
    assert all(p.paper_count >= 50 and len(p.collaborators) >= 1 for p in profiles)
    # "b" has only 10 papers and one co-author; the c* authors have 55 papers and 60 co-authors
    assert len(profiles) == 61
    assert by_alias["Scientist0"].topics[0] == "optics"
