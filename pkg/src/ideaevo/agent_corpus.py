"""Scientist profiles, role personas and team assembly."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embedding_space import Embedder, cosine, normalize
from .errors import ConfigError, FormatError, IntegrityError, ValidationError
from .prompts import render

log = logging.getLogger(__name__)

MIN_PAPERS = 50
MIN_COLLABORATORS = 50
DEFAULT_TEAM_SIZE = 3


@dataclass
class ScientistProfile:
    alias: str
    affiliations: list[str] = field(default_factory=list)
    topics: list[str] = field(default_factory=list)
    paper_count: int = 0
    citation_count: int = 0
    collaborators: list[str] = field(default_factory=list)
    profile_embedding: np.ndarray | None = None

    def sentence(self, with_identity: bool = True) -> str:
        parts = [f"you belong to the following affiliations {self.affiliations!r}",
                 f"you have researched on the following topics {self.topics!r}",
                 f"you have published {self.paper_count} papers",
                 f"you have {self.citation_count} citations"]
        if with_identity:
            return (f"Your name is {self.alias}, " + ", ".join(parts)
                    + f", and you have previously collaborated with these individuals {self.collaborators!r}.")
        return ", ".join(parts) + "."

    def to_dict(self) -> dict:
        d = {"alias": self.alias, "affiliations": self.affiliations, "topics": self.topics,
             "paper_count": self.paper_count, "citation_count": self.citation_count,
             "collaborators": self.collaborators}
        if self.profile_embedding is not None:
            d["profile_embedding"] = [float(x) for x in self.profile_embedding]
        return d


class PersonaRole(str, Enum):
    MENTOR = "Mentor"
    PRIME = "PrimeResearcher"
    ASSISTANT = "AssistantResearcher"
    REVIEWER = "Reviewer"
    EXPERT = "DomainExpert"


_TEMPLATE = {PersonaRole.MENTOR: "mentor", PersonaRole.PRIME: "prime_researcher",
             PersonaRole.ASSISTANT: "assistant_researcher", PersonaRole.REVIEWER: "reviewer",
             PersonaRole.EXPERT: "domain_expert"}


@dataclass
class AgentPersona:
    role: PersonaRole
    profile: ScientistProfile | None = None
    discipline: str | None = None
    name: str = ""
    system_prompt: str = ""

    @property
    def alias(self) -> str:
        return self.profile.alias if self.profile else self.name or self.role.value

    @property
    def embedding(self) -> np.ndarray | None:
        return self.profile.profile_embedding if self.profile else None


def build_persona_prompt(persona: AgentPersona, template_dir=None) -> str:
    name = _TEMPLATE.get(persona.role)
    if name is None:
        raise ConfigError(f"no template for role {persona.role!r}")
    sentence = persona.profile.sentence() if persona.profile else ""
    return render(name, template_dir, profile_sentence=sentence,
                  discipline=persona.discipline or "")


def make_persona(role: PersonaRole, profile: ScientistProfile | None = None, *,
                 discipline: str | None = None, name: str = "", template_dir=None) -> AgentPersona:
    p = AgentPersona(role=PersonaRole(role), profile=profile, discipline=discipline, name=name)
    p.system_prompt = build_persona_prompt(p, template_dir)
    return p


# --------------------------------------------------------------------------
# dataset ingestion


def _embed_profile(profile: ScientistProfile, embedder: Embedder | None) -> None:
    if profile.profile_embedding is not None:
        profile.profile_embedding = normalize(profile.profile_embedding)
        return
    embedder = embedder or Embedder()
    # identity fields stay out of the behaviour embedding
    profile.profile_embedding = embedder.embed_text(profile.sentence(with_identity=False))


def _read_records(path: Path) -> list[dict]:
    raw = path.read_bytes()
    text = raw.decode("utf-8", errors="strict")
    try:
        if text.lstrip().startswith("["):
            return json.loads(text)
        records, offset = [], 0
        for line in text.splitlines(keepends=True):
            if line.strip():
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise FormatError(f"bad profile record: {exc.msg}", offset + exc.pos) from exc
            offset += len(line.encode("utf-8"))
        return records
    except json.JSONDecodeError as exc:
        raise FormatError(f"dataset does not parse: {exc.msg}",
                          len(text[: exc.pos].encode("utf-8"))) from exc


def load_dataset(path, embedder: Embedder | None = None) -> list[ScientistProfile]:
    """Load pre-filtered scientist profiles from a JSON array or JSON-lines file."""
    path = Path(path)
    records = _read_records(path)
    profiles, seen = [], set()
    for i, rec in enumerate(records):
        try:
            p = ScientistProfile(
                alias=str(rec["alias"]), affiliations=list(rec.get("affiliations", [])),
                topics=list(rec.get("topics", [])), paper_count=int(rec.get("paper_count", 0)),
                citation_count=int(rec.get("citation_count", 0)),
                collaborators=list(rec.get("collaborators", [])),
                profile_embedding=(np.asarray(rec["profile_embedding"], dtype=float)
                                   if rec.get("profile_embedding") is not None else None))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"profile record {i} malformed: {exc!r}") from exc
        if p.alias in seen:
            raise IntegrityError("aliases unique", p.alias)
        seen.add(p.alias)
        _embed_profile(p, embedder)
        profiles.append(p)
    return profiles


def save_dataset(profiles: Sequence[ScientistProfile], path) -> None:
    Path(path).write_text(json.dumps([p.to_dict() for p in profiles], indent=1), encoding="utf-8")


def build_from_raw(raw, embedder: Embedder | None = None, *, min_papers: int = MIN_PAPERS,
                   min_collaborators: int = MIN_COLLABORATORS, max_topics: int = 10) -> list[ScientistProfile]:
    """Build anonymized profiles from author/paper tables.

    ``raw`` (a dict or a JSON file path) holds ``authors``: ``[{id, affiliations}]``
    and ``papers``: ``[{id, authors, citations, keywords}]``. Authors with fewer
    than ``min_papers`` papers or ``min_collaborators`` distinct co-authors are
    dropped; aliases ``Scientist<i>`` follow sorted author id.
    """
    if not isinstance(raw, dict):
        raw = json.loads(Path(raw).read_text(encoding="utf-8"))
    papers_of: dict[str, list[dict]] = {}
    coauthors: dict[str, set[str]] = {}
    for paper in raw.get("papers", []):
        authors = list(dict.fromkeys(str(a) for a in paper.get("authors", [])))
        for a in authors:
            papers_of.setdefault(a, []).append(paper)
            coauthors.setdefault(a, set()).update(x for x in authors if x != a)
    authors = {str(a["id"]): a for a in raw.get("authors", [])}
    kept = sorted(a for a in authors
                  if len(papers_of.get(a, [])) >= min_papers and len(coauthors.get(a, ())) >= min_collaborators)
    alias = {a: f"Scientist{i}" for i, a in enumerate(kept)}
    profiles = []
    for a in kept:
        topics = Counter(k for p in papers_of[a] for k in p.get("keywords", []))
        p = ScientistProfile(
            alias=alias[a], affiliations=list(authors[a].get("affiliations", [])),
            topics=[t for t, _ in sorted(topics.items(), key=lambda kv: (-kv[1], kv[0]))[:max_topics]],
            paper_count=len(papers_of[a]),
            citation_count=sum(int(p.get("citations", 0)) for p in papers_of[a]),
            collaborators=sorted((alias[c] for c in coauthors[a] if c in alias),
                                 key=lambda s: int(s[len("Scientist"):])))
        _embed_profile(p, embedder)
        profiles.append(p)
    return profiles


# --------------------------------------------------------------------------
# selection


def _ranked(target, profiles: Iterable[ScientistProfile]) -> list[tuple[float, ScientistProfile]]:
    scored = [(cosine(p.profile_embedding, target), p) for p in profiles]
    return sorted(scored, key=lambda sp: (-sp[0], sp[1].alias))


def select_prime(topic_embedding, profiles: Sequence[ScientistProfile]) -> ScientistProfile:
    if not profiles:
        raise ValidationError("select_prime needs at least one profile")
    return _ranked(topic_embedding, profiles)[0][1]


def select_assistants(problem_cluster_embedding, profiles: Sequence[ScientistProfile], n: int,
                      exclude: str | Iterable[str] | None = None,
                      warnings: list | None = None) -> list[ScientistProfile]:
    """Top-``n`` profiles by cosine to the problem cluster, skipping excluded aliases."""
    if n < 0:
        raise ValidationError("n must be >= 0")
    if not profiles:
        raise ValidationError("select_assistants needs at least one profile")
    if n == 0:
        return []
    excluded = {exclude} if isinstance(exclude, str) else set(exclude or ())
    pool = [p for p in profiles if p.alias not in excluded]
    if n > len(pool):
        msg = {"op": "select_assistants", "requested": n, "available": len(pool)}
        log.warning("only %d assistants available, %d requested", len(pool), n)
        if warnings is not None:
            warnings.append(msg)
    return [p for _, p in _ranked(problem_cluster_embedding, pool)[:n]]


@dataclass
class Team:
    mentor: AgentPersona
    prime: AgentPersona
    assistants: list[AgentPersona]
    reviewers: list[AgentPersona]

    def researchers(self) -> list[AgentPersona]:
        return [self.prime, *self.assistants]

    def aliases(self) -> list[str]:
        return [p.alias for p in self.researchers()]


def assemble_team(topic_embedding, cluster_embedding, profiles: Sequence[ScientistProfile], *,
                  team_size: int = DEFAULT_TEAM_SIZE, n_reviewers: int = 3, template_dir=None,
                  warnings: list | None = None) -> Team:
    if team_size < 1:
        raise ValidationError("team_size must be >= 1")
    prime = select_prime(topic_embedding, profiles)
    assistants = select_assistants(cluster_embedding, profiles, team_size - 1, exclude=prime.alias,
                                   warnings=warnings)
    return Team(
        mentor=make_persona(PersonaRole.MENTOR, name="Mentor", template_dir=template_dir),
        prime=make_persona(PersonaRole.PRIME, prime, template_dir=template_dir),
        assistants=[make_persona(PersonaRole.ASSISTANT, p, template_dir=template_dir) for p in assistants],
        reviewers=[make_persona(PersonaRole.REVIEWER, name=f"Reviewer{i + 1}", template_dir=template_dir)
                   for i in range(n_reviewers)],
    )


def select_experts(disciplines: Sequence[str], topic: str, profiles: Sequence[ScientistProfile],
                   embedder: Embedder, template_dir=None) -> dict[str, AgentPersona]:
    """One domain expert per discipline, best match to ``"<discipline> <topic>"``, no alias reused."""
    used: set[str] = set()
    experts = {}
    for d in disciplines:
        pool = [p for p in profiles if p.alias not in used] or list(profiles)
        best = select_prime(embedder.embed_text(f"{d} {topic}"), pool)
        used.add(best.alias)
        experts[d] = make_persona(PersonaRole.EXPERT, best, discipline=d, template_dir=template_dir)
    return experts
