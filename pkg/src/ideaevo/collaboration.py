"""Lead-and-collaborate task execution, research state, hierarchical memory, and ideas."""

from __future__ import annotations

import logging
import re
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .embedding_space import cosine
from .errors import ParseError, ProviderError, SchemaError, ValidationError
from .graph_store import KnowledgeGraph, label_key
from .llm_provider import TEMPERATURES, ChatRequest, Field, extract_structured
from .problem_space import ProblemCluster, request_records
from .prompts import bullet_list, render

log = logging.getLogger(__name__)

DEFAULT_MAX_DEPTH = 2
DEFAULT_DEDUP_THRESHOLD = 0.95
DEFAULT_WINDOW = 2
DEFAULT_SUMMARY_BUDGET = 120


class Stage(str, Enum):
    BACKGROUND = "BackgroundInvestigation"
    ANALYSIS = "ProblemAnalysis"
    IDEATION = "IdeaGeneration"
    REFINEMENT = "IterativeRefinement"
    SUBTASK = "Subtask"


CANONICAL_STAGES = (Stage.BACKGROUND, Stage.ANALYSIS, Stage.IDEATION, Stage.REFINEMENT)
_STAGE_TEMPLATE = {Stage.BACKGROUND: "background_investigation", Stage.ANALYSIS: "problem_analysis",
                   Stage.IDEATION: "idea_generation", Stage.REFINEMENT: "iterative_refinement"}


class Status(str, Enum):
    PENDING = "Pending"
    RUNNING = "Running"
    DONE = "Done"
    FAILED = "Failed"


@dataclass
class Task:
    id: str
    description: str
    assignee: str
    stage: Stage
    depth: int = 0
    parent: str | None = None
    status: Status = Status.PENDING
    response: str | None = None

    def to_dict(self) -> dict:
        return {"id": self.id, "description": self.description, "assignee": self.assignee,
                "stage": self.stage.value, "depth": self.depth, "parent": self.parent,
                "status": self.status.value, "response": self.response}


@dataclass
class ResearchState:
    """Context for one task: its description, earlier task responses, subtask responses, assignee.

    Response lists hold ``(task_id, text)`` pairs in execution order.
    """

    task_description: str
    prior_responses: list[tuple[str, str]] = field(default_factory=list)
    subtask_responses: list[tuple[str, str]] = field(default_factory=list)
    assignee: str = ""


class MemoryStore:
    """Short-term window of raw exchanges, per-task long-term summaries, entity notes."""

    def __init__(self, window: int = DEFAULT_WINDOW):
        if window < 0:
            raise ValidationError("window must be >= 0")
        self.window = window
        self.short_term: deque[tuple[str, str]] = deque(maxlen=window)
        self.long_term: list[dict] = []
        self.entity_memory: dict[str, list[str]] = {}

    def remember(self, task_id: str, text: str) -> None:
        self.short_term.append((task_id, text))

    def add_summary(self, task_id: str, text: str, kind: str = "task") -> None:
        if kind == "task" and self.summary_for(task_id) is not None:
            raise ValidationError(f"task {task_id} already summarized")
        self.long_term.append({"kind": kind, "task_id": task_id, "text": text})

    def summary_for(self, task_id: str) -> str | None:
        for rec in self.long_term:
            if rec["kind"] == "task" and rec["task_id"] == task_id:
                return rec["text"]
        return None

    def note_entity(self, label: str, note: str) -> None:
        self.entity_memory.setdefault(label, []).append(note)

    def compact(self, responses: Sequence[tuple[str, str]]) -> list[str]:
        """Newest ``window`` responses verbatim; earlier ones replaced by their summaries."""
        cut = max(0, len(responses) - self.window)
        out = []
        for i, (tid, text) in enumerate(responses):
            if i < cut:
                out.append(f"[{tid} summary] {self.summary_for(tid) or text}")
            else:
                out.append(f"[{tid}] {text}")
        return out

    def to_dict(self) -> dict:
        return {"window": self.window, "short_term": [list(x) for x in self.short_term],
                "long_term": self.long_term, "entity_memory": self.entity_memory}


@dataclass
class Idea:
    id: str
    title: str
    body: str
    source_problem: str
    round: int
    seed: bool
    lineage: frozenset[str]
    embedding: np.ndarray

    def __post_init__(self):
        self.lineage = frozenset(self.lineage)
        if not self.title.strip() or not self.body.strip():
            raise ValidationError(f"idea {self.id} needs a title and a body")
        if self.round < 1:
            raise ValidationError("idea round must be >= 1")

    def to_dict(self) -> dict:
        return {"id": self.id, "title": self.title, "body": self.body,
                "source_problem": self.source_problem, "round": self.round, "seed": self.seed,
                "lineage": sorted(self.lineage), "embedding": [float(x) for x in self.embedding]}

    @classmethod
    def from_dict(cls, d: dict) -> "Idea":
        return cls(id=d["id"], title=d["title"], body=d["body"], source_problem=d.get("source_problem", ""),
                   round=int(d.get("round", 1)), seed=bool(d.get("seed", False)),
                   lineage=frozenset(d.get("lineage", [])),
                   embedding=np.asarray(d["embedding"], dtype=float))


# --------------------------------------------------------------------------
# pure helpers


def decompose(selected: ProblemCluster, prime_alias: str, *, round: int = 1,
              template_dir=None) -> list[Task]:
    """The four canonical stage tasks, in order, all led by the Prime Researcher."""
    guidance = " ".join(p.guidance for p in selected.problems)
    tasks = []
    for i, stage in enumerate(CANONICAL_STAGES, start=1):
        desc = render(_STAGE_TEMPLATE[stage], template_dir, focus=selected.focus, guidance=guidance)
        tasks.append(Task(id=f"t{round:03d}.{i}", description=desc, assignee=prime_alias, stage=stage))
    return tasks


def assemble_research_prompt(topic: str, selected: ProblemCluster, state: ResearchState,
                             memory: MemoryStore, *, system_prompt: str, tag: str = "collab.task",
                             seed: int = 0, template_dir=None, hints: dict | None = None) -> ChatRequest:
    problems = bullet_list(f"{p.statement} ({p.description})" for p in selected.problems)
    user = render("research", template_dir, topic=topic, focus=selected.focus, problems=problems,
                  task=state.task_description,
                  prior=bullet_list(memory.compact(state.prior_responses)),
                  subtasks=bullet_list(f"[{tid}] {text}" for tid, text in state.subtask_responses))
    return ChatRequest.build(system_prompt, user, tag=tag, temperature=TEMPERATURES["researcher"],
                             seed=seed, hints=hints or {})


def mentioned_labels(text: str, labels: Sequence[str]) -> list[str]:
    low = " ".join(text.split()).casefold()
    out = []
    for label in labels:
        key = label_key(label)
        if key and re.search(r"(?<!\w)" + re.escape(key) + r"(?!\w)", low):
            out.append(label)
    return out


IDEA_SCHEMA = {"title": str, "body": str, "problem_id": Field(str, required=False),
               "entities": Field(list, required=False)}
REFINE_SCHEMA = {"id": str, "novelty": Field(float, lo=1, hi=10), "feasibility": Field(float, lo=1, hi=10),
                 "interdisciplinary": Field(float, lo=1, hi=10)}


def dedup_ideas(ideas: Sequence[Idea], threshold: float = DEFAULT_DEDUP_THRESHOLD) -> list[Idea]:
    """Drop any idea whose cosine to an earlier-id survivor exceeds ``threshold``."""
    kept: list[Idea] = []
    for idea in sorted(ideas, key=lambda i: i.id):
        if all(cosine(idea.embedding, k.embedding) <= threshold for k in kept):
            kept.append(idea)
    return kept


def refine_ideas(seeds: Sequence[Idea], *, client=None, threshold: float = DEFAULT_DEDUP_THRESHOLD,
                 fallback_centroid=None, system_prompt: str = "", seed: int = 0, template_dir=None,
                 warnings: list | None = None) -> list[Idea]:
    """Deduplicate, then rank by the mean rubric score (novelty, feasibility, interdisciplinary value).

    Without a usable rubric the ranking falls back to cosine distance from
    ``fallback_centroid`` (the top-fitness entity cluster).
    """
    if not seeds:
        raise ValidationError("refine_ideas needs at least one idea")
    kept = dedup_ideas(seeds, threshold)
    means: dict[str, float] | None = None
    if client is not None:
        listing = "\n".join(f"[{i.id}] {i.title}: {i.body}" for i in kept)
        req = ChatRequest.build(system_prompt or "You rank research ideas.",
                                render("refine_rubric", template_dir, ideas=listing), tag="collab.refine",
                                temperature=TEMPERATURES["researcher"], seed=seed,
                                hints={"ids": [i.id for i in kept], "titles": [i.title for i in kept]})
        try:
            payload = extract_structured(client.complete(req).text, {"scores": Field(list, items=REFINE_SCHEMA)})
            means = {r["id"]: (r["novelty"] + r["feasibility"] + r["interdisciplinary"]) / 3.0
                     for r in payload["scores"]}
            if not all(i.id in means for i in kept):
                raise SchemaError("scores", "missing idea ids")
        except (ProviderError, ParseError, SchemaError) as exc:
            log.warning("refinement rubric unavailable, embedding fallback: %s", exc)
            if warnings is not None:
                warnings.append({"op": "refine_ideas", "fallback": "embedding", "reason": str(exc)})
            means = None
    if means is not None:
        return sorted(kept, key=lambda i: (-means[i.id], i.id))
    if fallback_centroid is None:
        return kept
    return sorted(kept, key=lambda i: (1.0 - cosine(i.embedding, fallback_centroid), i.id))


# --------------------------------------------------------------------------
# session


class CollaborationSession:
    """One round of team work on a selected problem cluster.

    Holds the team, memory and task forest; :meth:`run` executes the four
    canonical tasks with delegation, phased integration and state accumulation.
    """

    def __init__(self, *, topic: str, selected: ProblemCluster, team, client, embedder,
                 graph: KnowledgeGraph | None = None, round: int = 1, seed: int = 0,
                 max_depth: int = DEFAULT_MAX_DEPTH, max_subtasks: int = 2, window: int = DEFAULT_WINDOW,
                 summary_budget: int = DEFAULT_SUMMARY_BUDGET, template_dir=None):
        self.topic = topic
        self.selected = selected
        self.team = team
        self.client = client
        self.embedder = embedder
        self.graph = graph
        self.round = round
        self.seed = seed
        self.max_depth = max_depth
        self.max_subtasks = max_subtasks
        self.summary_budget = summary_budget
        self.template_dir = template_dir
        self.memory = MemoryStore(window)
        self.tasks: dict[str, Task] = {}
        self.done_roots: list[tuple[str, str]] = []
        self.state_log: list[dict] = []
        self.warnings: list[dict] = []
        self._sub_counter: dict[str, int] = {}

    # -- lookup ----------------------------------------------------------

    def persona(self, alias: str):
        for p in [self.team.prime, *self.team.assistants]:
            if p.alias == alias:
                return p
        raise ValidationError(f"{alias} is not on the team")

    def cluster_labels(self) -> list[str]:
        if self.graph is None:
            return []
        ids = sorted({e for p in self.selected.problems for e in p.source_entities})
        return [self.graph.entities[i].label for i in ids if i in self.graph.entities]

    # -- delegation ------------------------------------------------------

    def delegate(self, task: Task) -> list[Task]:
        """Split ``task`` via the assignee's LLM call; subtasks go to the best-matching teammate."""
        if task.depth >= self.max_depth:
            return []
        delegator = self.persona(task.assignee)
        team_lines = bullet_list(f"{p.alias}: {p.profile.sentence(with_identity=False) if p.profile else ''}"
                                 for p in self.team.assistants)
        req = ChatRequest.build(delegator.system_prompt,
                                render("delegate", self.template_dir, task=task.description, team=team_lines,
                                       max_subtasks=self.max_subtasks),
                                tag="collab.delegate", temperature=TEMPERATURES["researcher"], seed=self.seed,
                                hints={"task": task.description, "task_id": task.id,
                                       "max_subtasks": self.max_subtasks, "depth": task.depth})
        try:
            payload = extract_structured(self.client.complete(req).text,
                                         {"subtasks": Field(list, items={"description": str})})
        except (ProviderError, ParseError, SchemaError) as exc:
            self.warnings.append({"op": "delegate", "task": task.id, "reason": str(exc)})
            log.warning("delegation of %s failed, executing directly: %s", task.id, exc)
            return []
        # no delegating back up to the Prime keeps the task forest acyclic
        pool = [p for p in self.team.assistants if p.alias != task.assignee and p.embedding is not None]
        subtasks = []
        for rec in payload["subtasks"][: self.max_subtasks]:
            n = self._sub_counter.get(task.id, 0) + 1
            self._sub_counter[task.id] = n
            desc = rec["description"].strip()
            assignee = task.assignee
            if pool:
                target = self.embedder.embed_text(desc)
                assignee = min(pool, key=lambda p: (-cosine(p.embedding, target), p.alias)).alias
            sub = Task(id=f"{task.id}.{n}", description=desc, assignee=assignee, stage=Stage.SUBTASK,
                       depth=task.depth + 1, parent=task.id)
            self.tasks[sub.id] = sub
            subtasks.append(sub)
        return subtasks

    # -- execution -------------------------------------------------------

    def summarize(self, task: Task, text: str) -> str:
        req = ChatRequest.build("You write compact research notes.",
                                render("summarize", self.template_dir, budget=self.summary_budget,
                                       task=task.description, response=text),
                                tag="memory.summarize", temperature=TEMPERATURES["summarizer"], seed=self.seed,
                                max_tokens=max(16, 2 * self.summary_budget),
                                hints={"response": text, "budget": self.summary_budget})
        try:
            out = self.client.complete(req).text.strip()
        except ProviderError:
            out = ""
        words = (out or text).split()
        return " ".join(words[: self.summary_budget])

    def execute_task(self, task: Task, state: ResearchState) -> str | None:
        persona = self.persona(task.assignee)
        stage_tag = task.stage.value
        req = assemble_research_prompt(
            self.topic, self.selected, state, self.memory, system_prompt=persona.system_prompt,
            tag=f"collab.task.{stage_tag}", seed=self.seed, template_dir=self.template_dir,
            hints={"task_id": task.id, "stage": stage_tag, "labels": self.cluster_labels(),
                   "topic": self.topic})
        task.status = Status.RUNNING
        try:
            text = self.client.complete(req).text.strip()
        except ProviderError as exc:
            task.status = Status.FAILED
            self.warnings.append({"op": "execute_task", "task": task.id, "reason": str(exc)})
            return None
        task.response = text
        task.status = Status.DONE
        self.memory.remember(task.id, text)
        self.memory.add_summary(task.id, self.summarize(task, text))
        if self.graph is not None:
            labels = [e.label for e in self.graph.entities.values()]
            for label in mentioned_labels(text, labels):
                self.memory.note_entity(label, f"{task.id}: {text[:160]}")
                ent = self.graph.find_entity(label)
                if ent is not None:
                    ent.frequency += 1
        return text

    def integrate_phase(self, completed: Sequence[Task]) -> str:
        if not completed:
            return ""
        if any(t.status not in (Status.DONE, Status.FAILED) for t in completed):
            raise ValidationError("integrate_phase needs terminal tasks")
        outcomes = "\n".join(f"[{t.id}] " + (t.response if t.status is Status.DONE else "(failed)")
                             for t in completed)
        req = ChatRequest.build(self.team.prime.system_prompt,
                                render("integrate", self.template_dir, outcomes=outcomes),
                                tag="collab.integrate", temperature=TEMPERATURES["researcher"], seed=self.seed,
                                hints={"task_ids": [t.id for t in completed]})
        try:
            summary = self.client.complete(req).text.strip()
        except ProviderError:
            summary = "\n\n".join(t.response for t in completed if t.status is Status.DONE)
        missing = [t.id for t in completed if t.id not in summary]
        if missing and summary:
            summary += "\nCovers: " + ", ".join(missing)
        self.memory.add_summary(",".join(t.id for t in completed), summary, kind="phase")
        return summary

    def run_task(self, task: Task) -> str | None:
        """Delegate, run subtasks depth-first, integrate them, then execute ``task`` itself."""
        task.status = Status.RUNNING
        subtasks = self.delegate(task) if task.depth < self.max_depth else []
        for sub in subtasks:
            self.run_task(sub)
        if subtasks:
            self.integrate_phase(subtasks)
        state = ResearchState(task_description=task.description, prior_responses=list(self.done_roots),
                              subtask_responses=[(s.id, s.response) for s in subtasks if s.status is Status.DONE],
                              assignee=task.assignee)
        if task.depth == 0:
            self.state_log.append({"task": task.id, "prior": [tid for tid, _ in state.prior_responses],
                                   "subtasks": [tid for tid, _ in state.subtask_responses]})
        text = self.execute_task(task, state)
        if task.depth == 0 and text is not None:
            self.done_roots.append((task.id, text))
        return text

    def run(self) -> list[Task]:
        roots = decompose(self.selected, self.team.prime.alias, round=self.round, template_dir=self.template_dir)
        for t in roots:
            self.tasks[t.id] = t
        for t in roots:
            self.run_task(t)
        return roots

    # -- ideas -----------------------------------------------------------

    def generate_seed_ideas(self, count: int, state: ResearchState | None = None) -> list[Idea]:
        state = state or ResearchState("seed idea generation", prior_responses=list(self.done_roots),
                                       assignee=self.team.prime.alias)
        problems = {p.id: p for p in self.selected.problems}
        labels = self.cluster_labels()
        req = ChatRequest.build(
            self.team.prime.system_prompt,
            render("seed_ideas", self.template_dir, topic=self.topic, focus=self.selected.focus,
                   problems=bullet_list(f"[{p.id}] {p.statement}" for p in self.selected.problems),
                   findings=bullet_list(self.memory.compact(state.prior_responses)), count=count),
            tag="collab.seed_ideas", temperature=TEMPERATURES["researcher"], seed=self.seed,
            hints={"count": count, "problem_ids": sorted(problems), "labels": labels, "topic": self.topic,
                   "round": self.round, "focus": self.selected.focus})
        records = request_records(self.client, req, "ideas", IDEA_SCHEMA, count, "ideas")
        ideas = []
        for j, rec in enumerate(records):
            pid = rec.get("problem_id") if rec.get("problem_id") in problems else sorted(problems)[0]
            lineage: set[str] = set()
            if self.graph is not None:
                for name in rec.get("entities") or []:
                    ent = self.graph.find_entity(str(name))
                    if ent is not None:
                        lineage.add(ent.id)
                if not lineage:
                    lineage = {e for e in problems[pid].source_entities if e in self.graph.entities}
            else:
                lineage = set(problems[pid].source_entities)
            ideas.append(Idea(id=f"i{self.round:03d}.{j:02d}", title=rec["title"].strip(), body=rec["body"].strip(),
                              source_problem=pid, round=self.round, seed=True, lineage=frozenset(lineage),
                              embedding=self.embedder.embed_text(f"{rec['title']} {rec['body']}")))
        return ideas
