"""Topic grounding, problem generation and problem-cluster selection."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .embedding_space import EntityCluster, aggregate_embedding, cluster_vectors, cosine
from .errors import (GenerationError, GroundingError, ParseError, ProviderError, SchemaError,
                     ValidationError)
from .graph_store import KnowledgeGraph, SemanticType, label_key
from .llm_provider import TEMPERATURES, ChatRequest, Field, extract_structured, validate
from .prompts import bullet_list, render

log = logging.getLogger(__name__)

DEFAULT_PROBLEMS_PER_ROUND = 10
DEFAULT_QA_ROUNDS = 2

PROBLEM_SCHEMA = {"statement": str, "description": str, "guidance": str,
                  "entities": Field(list, required=False)}
ENTITY_SCHEMA = {"label": str, "semantic_type": Field(str, required=False),
                 "relevant": Field(bool, required=False)}


@dataclass
class Problem:
    id: str
    statement: str
    description: str
    guidance: str
    discipline: str
    source_entities: frozenset[str]
    embedding: np.ndarray
    round: int = 1

    def to_dict(self) -> dict:
        return {"id": self.id, "statement": self.statement, "description": self.description,
                "guidance": self.guidance, "discipline": self.discipline,
                "source_entities": sorted(self.source_entities), "round": self.round,
                "embedding": [float(x) for x in self.embedding]}

    @classmethod
    def from_dict(cls, d: dict) -> "Problem":
        return cls(id=d["id"], statement=d["statement"], description=d["description"],
                   guidance=d["guidance"], discipline=d["discipline"],
                   source_entities=frozenset(d["source_entities"]),
                   embedding=np.asarray(d["embedding"], dtype=float), round=d.get("round", 1))


@dataclass
class ProblemCluster:
    id: str
    focus: str
    problems: list[Problem]
    embedding: np.ndarray

    def __post_init__(self):
        if not self.problems:
            raise ValidationError(f"problem cluster {self.id} is empty")

    def to_dict(self) -> dict:
        return {"id": self.id, "focus": self.focus, "problems": [p.id for p in self.problems],
                "embedding": [float(x) for x in self.embedding]}


# --------------------------------------------------------------------------
# topic analysis


class Retriever(Protocol):
    def search(self, query: str, k: int = 3) -> list[str]: ...


class NullRetriever:
    def search(self, query: str, k: int = 3) -> list[str]:
        return []


class FixtureRetriever:
    """Literature notes from a JSON file mapping a query key to snippets.

    A query matches every key it contains (case-insensitive); results keep
    file order.
    """

    def __init__(self, path_or_data):
        if isinstance(path_or_data, (str, Path)):
            path_or_data = json.loads(Path(path_or_data).read_text(encoding="utf-8"))
        self.data = {str(k): list(v) for k, v in path_or_data.items()}

    def search(self, query: str, k: int = 3) -> list[str]:
        q = query.casefold()
        hits = [s for key, snippets in self.data.items() if key.casefold() in q for s in snippets]
        return hits[:k]


@dataclass
class GroundingReport:
    topic: str
    core_disciplines: list[str]
    exchanges: dict[str, list[str]] = field(default_factory=dict)
    candidates: dict[str, list[tuple[str, str, bool]]] = field(default_factory=dict)
    ingested: dict[str, list[str]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"topic": self.topic, "core_disciplines": self.core_disciplines,
                "exchanges": self.exchanges,
                "candidates": {d: [list(c) for c in cs] for d, cs in self.candidates.items()},
                "ingested": self.ingested}


def _semantic_type(value) -> SemanticType:
    try:
        return SemanticType.parse(value or "Other")
    except ValidationError:
        return SemanticType.OTHER


def parse_entity_candidates(text: str) -> list[tuple[str, str, bool]]:
    payload = extract_structured(text, {"entities": Field(list)})
    out = []
    for rec in payload["entities"]:
        try:
            rec = validate(rec, ENTITY_SCHEMA)
        except SchemaError:
            continue
        out.append((rec["label"].strip(), _semantic_type(rec.get("semantic_type")).value,
                    bool(rec.get("relevant", True))))
    return out


def analyze_topic(topic: str, targets: Sequence, *, graph: KnowledgeGraph, client, experts: dict,
                  mentor, embedder=None, qa_rounds: int = DEFAULT_QA_ROUNDS,
                  retriever: Retriever | None = None, seed: int = 0, template_dir=None) -> GroundingReport:
    """Ground ``topic`` in graph disciplines and grow the graph through expert discussions.

    ``experts`` maps discipline name to a DomainExpert persona. Entities the
    discussions surface are classified, filtered on relevance and ingested;
    new entities are embedded and cross links recomputed when ``embedder`` is given.
    """
    if not topic or not topic.strip():
        raise ValidationError("topic must be non-empty")
    target_ds = [graph.discipline(t) for t in targets]
    retriever = retriever or NullRetriever()
    names = [d.name for d in sorted(graph.disciplines.values(), key=lambda d: d.id)]

    req = ChatRequest.build(mentor.system_prompt,
                            render("topic_classify", template_dir, topic=topic, disciplines=", ".join(names)),
                            tag="topic.classify", temperature=TEMPERATURES["mentor"], seed=seed,
                            hints={"topic": topic, "disciplines": names})
    text = client.complete(req).text
    try:
        chosen = extract_structured(text, {"disciplines": Field(list)})["disciplines"]
    except (ParseError, SchemaError) as exc:
        raise GroundingError(f"topic classifier output unusable: {exc}") from exc
    core = []
    for name in chosen:
        d = graph.find_discipline(str(name))
        if d is not None and d.name not in core:
            core.append(d.name)
    if not core:
        raise GroundingError(f"classifier mapped {topic!r} to no known discipline")
    report = GroundingReport(topic=topic, core_disciplines=core)

    for d in target_ds:
        expert = experts[d.name]
        notes = retriever.search(f"{d.name} {topic}")
        history: list[str] = []
        for ex in range(1, qa_rounds + 1):
            user = render("expert_question", template_dir, topic=topic, discipline=d.name, exchange=ex,
                          total=qa_rounds, retrieved=bullet_list(notes), history=bullet_list(history))
            r = ChatRequest.build(expert.system_prompt, user, tag="topic.expert",
                                  temperature=TEMPERATURES["researcher"], seed=seed,
                                  hints={"topic": topic, "discipline": d.name, "exchange": ex})
            history.append(client.complete(r).text.strip())
        report.exchanges[d.name] = history
        er = ChatRequest.build(mentor.system_prompt,
                               render("expert_entities", template_dir, topic=topic, discipline=d.name,
                                      history=bullet_list(history)),
                               tag="topic.entities", temperature=TEMPERATURES["mentor"], seed=seed,
                               hints={"topic": topic, "discipline": d.name, "history": history})
        try:
            cands = parse_entity_candidates(client.complete(er).text)
        except (ParseError, SchemaError) as exc:
            log.warning("entity extraction for %s unusable: %s", d.name, exc)
            cands = []
        report.candidates[d.name] = cands
        report.ingested[d.name] = [e.id for e in graph.ingest_entities(d, cands)]
    if embedder is not None:
        graph.embed_missing(embedder)
        graph.link_cross_entities()
    return report


# --------------------------------------------------------------------------
# problem generation


def assemble_problem_prompt(topic: str, discipline, top: EntityCluster, *, graph: KnowledgeGraph,
                            mentor_prompt: str, count: int = DEFAULT_PROBLEMS_PER_ROUND,
                            handoff: str = "", seed: int = 0, round: int = 1,
                            template_dir=None) -> ChatRequest:
    """Problem-generation request built from the topic, the discipline and its top entity cluster."""
    if not topic or not topic.strip():
        raise ValidationError("topic must be non-empty")
    d = graph.discipline(discipline)
    if top.discipline != d.id:
        raise ValidationError(f"cluster {top.id} belongs to {top.discipline}, not {d.id}")
    labels = [graph.entities[m].label for m in sorted(top.members) if m in graph.entities]
    user = render("problem_generation", template_dir, topic=topic, discipline=d.name,
                  entities="; ".join(labels), count=count, handoff=handoff or "(first round)")
    return ChatRequest.build(mentor_prompt, user, tag="problems.generate",
                             temperature=TEMPERATURES["mentor"], seed=seed,
                             hints={"topic": topic, "discipline": d.name, "labels": labels,
                                    "count": count, "round": round})


def _valid_records(payload: dict, schema) -> tuple[list[dict], list[str]]:
    good, errors = [], []
    for i, rec in enumerate(payload):
        try:
            good.append(validate(rec, schema))
        except SchemaError as exc:
            errors.append(f"record {i}: {exc}")
    return good, errors


def request_records(client, request: ChatRequest, key: str, schema, count: int,
                    what: str) -> list[dict]:
    """Ask for ``count`` records under ``key``; one repair round-trip, then GenerationError."""
    text = client.complete(request).text
    records: list[dict] = []
    for attempt in range(2):
        try:
            payload = extract_structured(text, {key: Field(list)})
            records, errors = _valid_records(payload[key], schema)
        except (ParseError, SchemaError) as exc:
            records, errors = [], [str(exc)]
        if len(records) >= count:
            return records[:count]
        if attempt == 0:
            note = (f"Only {len(records)} of the {count} {what} were usable. Problems: "
                    f"{'; '.join(errors) or 'too few records'}. Return all {count} again in the same JSON format.")
            text = client.complete(request.followup(text, note, tag=request.tag + ".repair")).text
    raise GenerationError(f"{what}: fewer than {count} valid records", len(records))


def generate_problems(request: ChatRequest, count: int, *, client, top: EntityCluster,
                      graph: KnowledgeGraph, embedder, round: int = 1) -> list[Problem]:
    if count < 1:
        raise ValidationError("count must be positive")
    records = request_records(client, request, "problems", PROBLEM_SCHEMA, count, "problems")
    by_label = {label_key(graph.entities[m].label): m for m in top.members if m in graph.entities}
    problems = []
    for i, rec in enumerate(records):
        named = {by_label[label_key(str(x))] for x in rec.get("entities") or [] if label_key(str(x)) in by_label}
        sources = frozenset(named) or frozenset(by_label.values()) or frozenset(top.members)
        problems.append(Problem(
            id=f"p{round:03d}.{i:02d}", statement=rec["statement"].strip(),
            description=rec["description"].strip(), guidance=rec["guidance"].strip(),
            discipline=top.discipline, source_entities=sources,
            embedding=embedder.embed_text(f"{rec['statement']} {rec['description']}"), round=round))
    return problems


def cluster_problems(problems: Sequence[Problem], *, client=None, k: int | None = None, seed: int = 0,
                     round: int = 1, mentor_prompt: str = "", template_dir=None) -> list[ProblemCluster]:
    """Partition problems by embedding and label each group with its shared focus."""
    if not problems:
        raise ValidationError("cluster_problems needs at least one problem")
    by_id = {p.id: p for p in problems}
    if k is None:
        k = max(1, math.ceil(math.sqrt(len(problems))))
    groups = cluster_vectors(list(by_id), {p.id: p.embedding for p in problems}, k, seed=seed)
    clusters = []
    for i, g in enumerate(groups):
        members = [by_id[pid] for pid in g]
        focus = members[0].statement[:80]
        if client is not None:
            req = ChatRequest.build(mentor_prompt or "You organize research problems.",
                                    render("problem_focus", template_dir,
                                           problems=bullet_list(p.statement for p in members)),
                                    tag="problems.focus", temperature=TEMPERATURES["mentor"], seed=seed,
                                    hints={"statements": [p.statement for p in members]})
            try:
                focus = extract_structured(client.complete(req).text, {"focus": str})["focus"].strip()
            except (ProviderError, ParseError, SchemaError) as exc:
                log.warning("focus label fell back for group %d: %s", i, exc)
        clusters.append(ProblemCluster(id=f"P{round:03d}.{i:02d}", focus=focus, problems=members,
                                       embedding=aggregate_embedding([p.embedding for p in members])))
    return clusters


RUBRIC_SCHEMA = {"id": str, "relevance": Field(float, lo=1, hi=10),
                 "interdisciplinary": Field(float, lo=1, hi=10), "extensibility": Field(float, lo=1, hi=10)}


def select_cluster(clusters: Sequence[ProblemCluster], topic_embedding, *, client=None, topic: str = "",
                   mentor_prompt: str = "", seed: int = 0, template_dir=None,
                   warnings: list | None = None) -> ProblemCluster:
    """Rubric-scored choice of the cluster to pursue; cosine to the topic when the rubric is unavailable."""
    if not clusters:
        raise ValidationError("select_cluster needs at least one cluster")
    ordered = sorted(clusters, key=lambda c: c.id)
    if len(ordered) == 1:
        return ordered[0]
    scores: dict[str, float] | None = None
    if client is not None:
        listing = "\n".join(f"[{c.id}] {c.focus}: " + " | ".join(p.statement for p in c.problems)
                            for c in ordered)
        req = ChatRequest.build(mentor_prompt or "You choose research directions.",
                                render("cluster_rubric", template_dir, topic=topic, clusters=listing),
                                tag="problems.select", temperature=TEMPERATURES["mentor"], seed=seed,
                                hints={"ids": [c.id for c in ordered], "topic": topic})
        try:
            payload = extract_structured(client.complete(req).text,
                                         {"scores": Field(list, items=RUBRIC_SCHEMA)})
            scores = {r["id"]: (r["relevance"] + r["interdisciplinary"] + r["extensibility"]) / 3.0
                      for r in payload["scores"]}
            if not all(c.id in scores for c in ordered):
                raise SchemaError("scores", "missing cluster ids")
        except (ProviderError, ParseError, SchemaError) as exc:
            log.warning("cluster rubric unavailable, using cosine fallback: %s", exc)
            if warnings is not None:
                warnings.append({"op": "select_cluster", "fallback": "cosine", "reason": str(exc)})
            scores = None
    if scores is None:
        scores = {c.id: cosine(c.embedding, topic_embedding) for c in ordered}
    best = ordered[0]
    for c in ordered[1:]:
        if scores[c.id] > scores[best.id]:
            best = c
    return best
