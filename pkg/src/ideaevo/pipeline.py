"""End-to-end run controller: graph build, topic grounding, then per-round
problem generation, team research, review and cluster evolution.

Rounds are the unit of persistence. After every completed round the
controller writes the round record and a checkpoint holding the graph, the
cluster populations, the hand-off text and the state of the deterministic
clock and mock backend. A round interrupted by a provider outage is thrown
away as a whole, and :func:`resume` repeats it from the last checkpoint.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping

import yaml

from . import agent_corpus
from .agent_corpus import PersonaRole, assemble_team, make_persona, select_experts
from .collaboration import CollaborationSession, Idea, refine_ideas
from .embedding_space import (EmbeddingCache, Embedder, EntityCluster, HTTPEmbeddingProvider,
                              HashingEmbeddingProvider, cluster_entities, top_cluster)
from .errors import (ConfigError, FormatError, GenerationError, ParseError, ProviderError, RequestError,
                     ReviewError, RunHalted, SchemaError, ValidationError)
from .evolution import EvolutionConfig, evolution_step, write_log
from .graph_store import KnowledgeGraph, wiki_ingest
from .llm_provider import (TEMPERATURES, ChatRequest, GenerativeBackend, HTTPBackend, LLMClient,
                           LogicalClock, ProviderConfig, SystemClock, Transcript)
from .problem_space import (FixtureRetriever, NullRetriever, analyze_topic, assemble_problem_prompt,
                            cluster_problems, generate_problems, parse_entity_candidates, select_cluster)
from .prompts import bullet_list, render
from .review import Evaluation, review_panel

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
SEED_ENV = "EVOSCI_SEED"
HALTING = (ProviderError, RequestError, GenerationError)


def bundled(name: str) -> Path:
    return Path(str(resources.files("ideaevo") / "data" / name))


# --------------------------------------------------------------------------
# configuration


@dataclass
class ProviderSettings:
    kind: str = "mock"
    base_url: str = "https://api.openai.com/v1"
    model_id: str = "gpt-4o"
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    parallelism: int = 1
    sigma: float = 0.2

    def provider_config(self) -> ProviderConfig:
        return ProviderConfig(base_url=self.base_url, model_id=self.model_id, api_key_env=self.api_key_env,
                              timeout=self.timeout, max_retries=self.max_retries, parallelism=self.parallelism)


@dataclass
class EmbeddingSettings:
    kind: str = "hash"
    dim: int = 64
    base_url: str = "https://api.openai.com/v1"
    model_id: str = "text-embedding-3-small"
    api_key_env: str = "OPENAI_API_KEY"


@dataclass
class ReviewSettings:
    templates: list[str] = field(default_factory=lambda: ["ICLR", "NeurIPS"])
    reviewers: int = 3
    reflections: int = 1
    meta_mode: str = "llm"


@dataclass
class RunConfig:
    topic: str
    target_disciplines: list[str]
    rounds: int = 10
    ideas_per_round: int = 5
    team_size: int = 3
    seed: int = 0
    output_dir: str = "runs/default"
    disciplines: list[str] = field(default_factory=list)
    wiki_source: str = "bundled"
    scientists: str = "bundled"
    retrieval: str | None = None
    tau: float = 0.8
    problems_per_round: int = 10
    qa_rounds: int = 2
    max_depth: int = 2
    max_subtasks: int = 2
    memory_window: int = 2
    dedup_threshold: float = 0.95
    evaluation_scope: str = "latest"
    provider: ProviderSettings = field(default_factory=ProviderSettings)
    embedding: EmbeddingSettings = field(default_factory=EmbeddingSettings)
    evolution: EvolutionConfig = field(default_factory=EvolutionConfig)
    review: ReviewSettings = field(default_factory=ReviewSettings)

    def __post_init__(self):
        for name, cls in (("provider", ProviderSettings), ("embedding", EmbeddingSettings),
                          ("evolution", EvolutionConfig), ("review", ReviewSettings)):
            value = getattr(self, name)
            if isinstance(value, Mapping):
                try:
                    setattr(self, name, cls(**value))
                except TypeError as exc:
                    raise ConfigError(f"bad {name} settings: {exc}") from exc
                except ValidationError as exc:
                    raise ConfigError(f"bad {name} settings: {exc}") from exc
        self.target_disciplines = list(self.target_disciplines)
        self.disciplines = list(self.disciplines) or list(self.target_disciplines)
        self.validate()

    def validate(self) -> None:
        if not str(self.topic).strip():
            raise ConfigError("topic must be non-empty")
        if not self.target_disciplines:
            raise ConfigError("target_disciplines must name at least one discipline")
        missing = [d for d in self.target_disciplines if d not in self.disciplines]
        if missing:
            raise ConfigError(f"target disciplines {missing} are not among the graph disciplines")
        for name in ("rounds", "ideas_per_round", "team_size", "problems_per_round"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.evaluation_scope not in ("latest", "all"):
            raise ConfigError("evaluation_scope is 'latest' or 'all'")
        if self.provider.kind not in ("mock", "http"):
            raise ConfigError(f"unknown provider kind {self.provider.kind!r}")
        if self.embedding.kind not in ("hash", "http"):
            raise ConfigError(f"unknown embedding kind {self.embedding.kind!r}")
        if self.review.reviewers < 1 or self.review.reflections < 0:
            raise ConfigError("review needs >= 1 reviewer and >= 0 reflections")
        if self.review.meta_mode not in ("llm", "mean"):
            raise ConfigError("meta_mode is 'llm' or 'mean'")
        if not self.review.templates:
            raise ConfigError("at least one review template is required")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("tau must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(data) - known)
        if extra:
            raise ConfigError(f"unknown config keys {extra}")
        try:
            return cls(**dict(data))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def _interpolate(value):
    if isinstance(value, str):
        return os.path.expandvars(value)
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    if isinstance(value, dict):
        return {k: _interpolate(v) for k, v in value.items()}
    return value


def load_config(path, **overrides) -> RunConfig:
    """Read a YAML run config; ``${VAR}`` references expand from the environment.

    ``EVOSCI_SEED`` in the environment overrides the file's seed, and explicit
    ``overrides`` win over both.
    """
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    data = _interpolate(data)
    if os.environ.get(SEED_ENV):
        try:
            data["seed"] = int(os.environ[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    data.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(data)


# --------------------------------------------------------------------------
# component construction


def make_embedder(settings: EmbeddingSettings, seed: int = 0) -> Embedder:
    if settings.kind == "hash":
        return Embedder(HashingEmbeddingProvider(dim=settings.dim, seed=seed))
    return Embedder(HTTPEmbeddingProvider(settings.base_url, settings.model_id, settings.api_key_env))


def make_backend(config: RunConfig):
    if config.provider.kind == "mock":
        return GenerativeBackend(seed=config.seed, sigma=config.provider.sigma)
    return HTTPBackend(config.provider.provider_config())


def _wiki_source(config: RunConfig):
    return str(bundled("wiki")) if config.wiki_source == "bundled" else config.wiki_source


def classify_candidates(discipline_name: str, candidates, *, client, seed: int = 0,
                        template_dir=None) -> list[tuple[str, str, bool]]:
    """Semantic type and relevance for each wiki candidate, by one model call."""
    if not candidates:
        return []
    listing = bullet_list(f"{label}: {ctx}" for label, ctx in candidates)
    req = ChatRequest.build("You curate a scientific knowledge graph.",
                            render("entity_classify", template_dir, discipline=discipline_name, candidates=listing),
                            tag="graph.classify", temperature=TEMPERATURES["summarizer"], seed=seed,
                            hints={"discipline": discipline_name, "labels": [label for label, _ in candidates]})
    try:
        return parse_entity_candidates(client.complete(req).text)
    except (ParseError, SchemaError) as exc:
        log.warning("classification for %s unusable, candidates kept as Other: %s", discipline_name, exc)
        return [(label, "Other", True) for label, _ in candidates]


def build_graph(disciplines, *, client, embedder: Embedder, source="bundled", tau: float = 0.8,
                seed: int = 0) -> KnowledgeGraph:
    """Disciplines plus their classified wiki entities, embedded and cross-linked."""
    graph = KnowledgeGraph(tau=tau, embeddings=EmbeddingCache())
    source = str(bundled("wiki")) if source == "bundled" else source
    for name in disciplines:
        d = graph.add_discipline(name)
        cands = wiki_ingest(d, source)
        graph.ingest_entities(d, classify_candidates(d.name, cands, client=client, seed=seed))
    graph.embed_missing(embedder)
    graph.link_cross_entities()
    return graph


# --------------------------------------------------------------------------
# the controller


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False) + "\n"


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


@dataclass
class RunSummary:
    output_dir: str
    rounds_completed: int
    ideas: int
    failures: list[dict]
    resumed_from: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


class Pipeline:
    """Owns every component of one run and the output directory.

    ``backend_wrapper`` lets a caller decorate the backend (fault injection in
    tests); it receives the backend and returns the one to use.
    """

    def __init__(self, config: RunConfig, *, backend_wrapper: Callable | None = None, template_dir=None):
        config.validate()
        self.config = config
        self.out = Path(config.output_dir)
        self.template_dir = template_dir
        self.inner_backend = make_backend(config)
        self.backend = backend_wrapper(self.inner_backend) if backend_wrapper else self.inner_backend
        mock = config.provider.kind == "mock"
        self.clock = LogicalClock() if mock else SystemClock()
        self.transcript = Transcript(self.out / "transcript.jsonl")
        self.client = LLMClient(self.backend, config.provider.provider_config(), transcript=self.transcript,
                                clock=self.clock, sleep=(lambda s: None) if mock else None,
                                jitter_seed=config.seed)
        self.embedder = make_embedder(config.embedding, config.seed)
        self.graph: KnowledgeGraph | None = None
        self.populations: dict[str, list[EntityCluster]] = {}
        self.handoff = ""
        self.ideas: list[dict] = []
        self.evaluations: list[dict] = []
        self.failures: list[dict] = []
        self.completed = 0
        self.setup_done = False
        self.grounding: dict = {}
        self._profiles = None

    # -- paths -----------------------------------------------------------

    @property
    def checkpoint_path(self) -> Path:
        return self.out / "checkpoint.json"

    def round_path(self, r: int) -> Path:
        return self.out / "rounds" / f"round_{r:03d}.json"

    # -- shared pieces ---------------------------------------------------

    @property
    def profiles(self):
        if self._profiles is None:
            src = bundled("scientists.json") if self.config.scientists == "bundled" else self.config.scientists
            self._profiles = agent_corpus.load_dataset(src, self.embedder)
        return self._profiles

    def mentor(self):
        return make_persona(PersonaRole.MENTOR, name="Mentor", template_dir=self.template_dir)

    def topic_embedding(self):
        return self.embedder.embed_text(self.config.topic)

    # -- checkpointing ---------------------------------------------------

    def _state(self) -> dict:
        graph_file = None
        if self.graph is not None:
            ckdir = self.out / "checkpoint"
            ckdir.mkdir(parents=True, exist_ok=True)
            graph_file = f"graph_r{self.completed:03d}.json"
            self.graph.snapshot(ckdir / graph_file)
        backend_state = self.inner_backend.state_dict() if hasattr(self.inner_backend, "state_dict") else {}
        return {"version": CHECKPOINT_VERSION, "setup_done": self.setup_done, "completed_rounds": self.completed,
                "graph_file": graph_file, "populations": {d: [c.to_dict() for c in cs]
                                                           for d, cs in self.populations.items()},
                "handoff": self.handoff, "ideas": self.ideas, "evaluations": self.evaluations,
                "failures": self.failures, "grounding": self.grounding,
                "clock": self.clock.state_dict(), "backend": backend_state,
                "transcript_length": len(self.transcript)}

    def write_checkpoint(self) -> None:
        state = self._state()
        _atomic_write(self.checkpoint_path, _dump(state))
        ckdir = self.out / "checkpoint"
        if ckdir.exists():
            for f in ckdir.iterdir():
                if state["graph_file"] and not f.name.startswith(state["graph_file"]):
                    f.unlink()

    def load_checkpoint(self, path) -> None:
        path = Path(path)
        raw = path.read_bytes()
        try:
            state = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"checkpoint {path} does not parse", getattr(exc, "pos", None)) from exc
        if not isinstance(state, dict) or state.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"checkpoint schema version {state.get('version') if isinstance(state, dict) else None!r} "
                              f"is not {CHECKPOINT_VERSION}")
        try:
            self.setup_done = bool(state["setup_done"])
            self.completed = int(state["completed_rounds"])
            self.graph = (KnowledgeGraph.load(path.parent / "checkpoint" / state["graph_file"])
                          if state["graph_file"] else None)
            self.populations = {d: [EntityCluster.from_dict(c) for c in cs]
                                for d, cs in state["populations"].items()}
            self.handoff = state["handoff"]
            self.ideas = state["ideas"]
            self.evaluations = state["evaluations"]
            self.failures = state["failures"]
            self.grounding = state.get("grounding", {})
            self.clock.load_state(state["clock"])
            if hasattr(self.inner_backend, "load_state"):
                self.inner_backend.load_state(state["backend"])
            self.transcript.truncate(int(state["transcript_length"]))
        except (KeyError, TypeError, ValueError, OSError) as exc:
            raise FormatError(f"checkpoint {path} is malformed: {exc!r}") from exc

    # -- stages ----------------------------------------------------------

    def setup(self) -> None:
        """Graph build from recorded pages, then topic grounding with domain experts."""
        cfg = self.config
        self.graph = build_graph(cfg.disciplines, client=self.client, embedder=self.embedder,
                                 source=_wiki_source(cfg), tau=cfg.tau, seed=cfg.seed)
        experts = select_experts(cfg.target_disciplines, cfg.topic, self.profiles, self.embedder,
                                 template_dir=self.template_dir)
        retriever = FixtureRetriever(cfg.retrieval) if cfg.retrieval else NullRetriever()
        report = analyze_topic(cfg.topic, cfg.target_disciplines, graph=self.graph, client=self.client,
                               experts=experts, mentor=self.mentor(), embedder=self.embedder,
                               qa_rounds=cfg.qa_rounds, retriever=retriever, seed=cfg.seed,
                               template_dir=self.template_dir)
        self.grounding = report.to_dict()
        self.setup_done = True

    def population(self, discipline_id: str) -> list[EntityCluster]:
        if discipline_id not in self.populations:
            ents = self.graph.entities_of(discipline_id)
            self.populations[discipline_id] = cluster_entities(
                ents, None, self.graph.vectors([e.id for e in ents]), discipline=discipline_id,
                seed=self.config.seed, id_prefix=discipline_id)
        return self.populations[discipline_id]

    def _handoff(self, r: int, ideas: list[Idea], metas: dict[str, Evaluation], prime_prompt: str) -> str:
        rows = []
        for idea in ideas:
            ev = metas.get(idea.id)
            score = f"overall {ev.overall:.2f}" if ev else "not reviewed"
            rows.append(f"{idea.title} ({score})")
        best = max((i for i in ideas if i.id in metas), key=lambda i: (metas[i.id].overall, i.id), default=None)
        req = ChatRequest.build(prime_prompt, render("loop_handoff", self.template_dir, round=r, ideas=bullet_list(rows)),
                                tag="loop.handoff", temperature=TEMPERATURES["summarizer"], seed=self.config.seed,
                                hints={"round": r, "titles": [i.title for i in ideas],
                                       "best": best.title if best else ""})
        return self.client.complete(req).text.strip()

    def run_round(self, r: int) -> dict:
        cfg = self.config
        graph = self.graph
        t0 = self.clock.now()
        failures: list[dict] = []
        warnings: list[dict] = []
        disc = graph.discipline(cfg.target_disciplines[(r - 1) % len(cfg.target_disciplines)])
        topic_emb = self.topic_embedding()
        population = self.population(disc.id)
        top = top_cluster(population, topic_emb)
        mentor = self.mentor()

        request = assemble_problem_prompt(cfg.topic, disc, top, graph=graph, mentor_prompt=mentor.system_prompt,
                                          count=cfg.problems_per_round, handoff=self.handoff, seed=cfg.seed,
                                          round=r, template_dir=self.template_dir)
        problems = generate_problems(request, cfg.problems_per_round, client=self.client, top=top, graph=graph,
                                     embedder=self.embedder, round=r)
        pclusters = cluster_problems(problems, client=self.client, seed=cfg.seed, round=r,
                                     mentor_prompt=mentor.system_prompt, template_dir=self.template_dir)
        selected = select_cluster(pclusters, topic_emb, client=self.client, topic=cfg.topic,
                                  mentor_prompt=mentor.system_prompt, seed=cfg.seed,
                                  template_dir=self.template_dir, warnings=warnings)

        team = assemble_team(topic_emb, selected.embedding, self.profiles, team_size=cfg.team_size,
                             n_reviewers=cfg.review.reviewers, template_dir=self.template_dir, warnings=warnings)
        session = CollaborationSession(topic=cfg.topic, selected=selected, team=team, client=self.client,
                                       embedder=self.embedder, graph=graph, round=r, seed=cfg.seed,
                                       max_depth=cfg.max_depth, max_subtasks=cfg.max_subtasks,
                                       window=cfg.memory_window, template_dir=self.template_dir)
        roots = session.run()

        try:
            seeds = session.generate_seed_ideas(2 * cfg.ideas_per_round)
        except GenerationError as exc:
            failures.append({"round": r, "stage": "seed_ideas", "error": str(exc),
                             "parsed_count": exc.parsed_count, "missing": cfg.ideas_per_round})
            seeds = []
        ideas: list[Idea] = []
        if seeds:
            top_fit = max(population, key=lambda c: ((c.fitness if c.fitness is not None else 0.5), c.id))
            ideas = refine_ideas(seeds, client=self.client, threshold=cfg.dedup_threshold,
                                 fallback_centroid=top_fit.centroid, system_prompt=team.prime.system_prompt,
                                 seed=cfg.seed, template_dir=self.template_dir,
                                 warnings=warnings)[: cfg.ideas_per_round]
            if len(ideas) < cfg.ideas_per_round:
                failures.append({"round": r, "stage": "refine", "error": "too few distinct ideas after dedup",
                                 "missing": cfg.ideas_per_round - len(ideas)})

        reviews: dict[str, dict[str, list[dict]]] = {}
        metas: dict[str, dict[str, Evaluation]] = {t: {} for t in cfg.review.templates}
        for idea in ideas:
            for style in cfg.review.templates:
                try:
                    singles, meta = review_panel(idea, style, team.reviewers, client=self.client,
                                                 reflections=cfg.review.reflections, meta_mode=cfg.review.meta_mode,
                                                 seed=cfg.seed, template_dir=self.template_dir)
                except ReviewError as exc:
                    failures.append({"round": r, "stage": "review", "idea": idea.id, "template": style,
                                     "error": str(exc)})
                    continue
                reviews.setdefault(idea.id, {})[style] = [e.to_dict() for e in singles]
                metas[style][idea.id] = meta

        primary = cfg.review.templates[0]
        handoff = self._handoff(r, ideas, metas[primary], team.prime.system_prompt)

        round_evals = [{"idea": i.to_dict(), "template": primary, "meta": metas[primary][i.id].to_dict()}
                       for i in ideas if i.id in metas[primary]]
        pool = self.evaluations + round_evals if cfg.evaluation_scope == "all" else round_evals
        evals = [(Idea.from_dict(e["idea"]), Evaluation.from_dict(e["meta"])) for e in pool]
        protected = {m for d, cs in self.populations.items() if d != disc.id for c in cs for m in c.members}
        result = evolution_step(graph, population, evals, cfg.evolution, seed=cfg.seed, round=r,
                                protected=protected, inventor=self._inventor() if
                                cfg.evolution.variation_mode == "invent" else None)
        evo_path = self.out / "evolution" / f"round_{r:03d}.jsonl"
        evo_path.parent.mkdir(parents=True, exist_ok=True)

        record = {
            "round": r, "discipline": disc.name, "top_cluster": top.id,
            "problems": [p.to_dict() | {"embedding": None} for p in problems],
            "problem_clusters": [c.to_dict() | {"embedding": None} for c in pclusters],
            "selected_cluster": selected.id, "team": team.aliases(),
            "tasks": [session.tasks[k].to_dict() for k in sorted(session.tasks)],
            "root_tasks": [t.id for t in roots], "state_log": session.state_log,
            "ideas": [i.to_dict() | {"embedding": None} for i in ideas],
            "reviews": reviews,
            "meta_reviews": {s: {k: v.to_dict() for k, v in sorted(m.items())} for s, m in metas.items()},
            "handoff": handoff,
            "fitness": {f.cluster: f.fitness for f in result.fitness},
            "population": [c.id for c in result.clusters], "pruned": result.pruned,
            "evolution_log": str(evo_path.relative_to(self.out)),
            "failures": failures, "warnings": warnings + session.warnings + result.events,
            "duration": round(self.clock.now() - t0, 6),
        }
        # commit: nothing below can fail on provider errors
        write_log(result.log, evo_path)
        self.populations[disc.id] = result.clusters
        self.handoff = handoff
        self.ideas.extend(i.to_dict() for i in ideas)
        self.evaluations.extend(round_evals)
        self.failures.extend(failures)
        return record

    def _inventor(self):
        def invent(discipline_name: str, graph: KnowledgeGraph):
            labels = [e.label for e in graph.entities_of(graph.discipline(discipline_name).id)]
            req = ChatRequest.build(self.mentor().system_prompt,
                                    render("expert_entities", self.template_dir, topic=self.config.topic,
                                           discipline=discipline_name, history=bullet_list(labels)),
                                    tag="evolution.invent", temperature=TEMPERATURES["mentor"],
                                    seed=self.config.seed, hints={"discipline": discipline_name, "labels": labels})
            try:
                cands = parse_entity_candidates(self.client.complete(req).text)
            except (ParseError, SchemaError):
                return []
            # the step ingests the same labels again; matching labels merge, so that is a no-op
            graph.ingest_entities(discipline_name, cands)
            graph.embed_missing(self.embedder)
            return cands
        return invent

    # -- driver ----------------------------------------------------------

    def _halt(self, exc: Exception) -> RunHalted:
        return RunHalted(f"run halted: {exc}", str(self.checkpoint_path), self.completed)

    def execute(self, resumed_from: int | None = None) -> RunSummary:
        cfg = self.config
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "rounds").mkdir(exist_ok=True)
        if resumed_from is None:
            _atomic_write(self.out / "config.json", _dump(cfg.to_dict()))
            self.write_checkpoint()
        if not self.setup_done:
            try:
                self.setup()
            except HALTING as exc:
                raise self._halt(exc) from exc
            _atomic_write(self.out / "grounding.json", _dump(self.grounding))
            self.write_checkpoint()
        for r in range(self.completed + 1, cfg.rounds + 1):
            # a failed round is discarded whole; the graph copy keeps memory consistent too
            before = self.graph.copy()
            try:
                record = self.run_round(r)
            except HALTING as exc:
                self.graph.restore_from(before)
                raise self._halt(exc) from exc
            _atomic_write(self.round_path(r), _dump(record))
            self.completed = r
            self.graph.snapshot(self.out / "graph.json")
            self.write_checkpoint()
        self.export()
        return RunSummary(str(self.out), self.completed, len(self.ideas), list(self.failures), resumed_from)

    def export(self) -> None:
        _atomic_write(self.out / "ideas.json", _dump(self.ideas))
        _atomic_write(self.out / "evaluations.json", _dump(self.evaluations))
        if self.graph is not None:
            self.graph.snapshot(self.out / "graph.json")


def run(config: RunConfig, *, backend_wrapper: Callable | None = None, fresh: bool = True,
        template_dir=None) -> RunSummary:
    """Execute a whole run into ``config.output_dir``.

    With ``fresh`` an existing output directory is cleared first so that
    repeated invocations produce identical trees.
    """
    out = Path(config.output_dir)
    if fresh and out.exists():
        shutil.rmtree(out)
    return Pipeline(config, backend_wrapper=backend_wrapper, template_dir=template_dir).execute()


def resume(checkpoint_path, *, backend_wrapper: Callable | None = None, template_dir=None) -> RunSummary:
    """Continue a run from its checkpoint; completed rounds are never repeated."""
    checkpoint_path = Path(checkpoint_path)
    if checkpoint_path.is_dir():
        checkpoint_path = checkpoint_path / "checkpoint.json"
    if not checkpoint_path.exists():
        raise FormatError(f"no checkpoint at {checkpoint_path}")
    try:
        raw_cfg = json.loads((checkpoint_path.parent / "config.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"run config next to {checkpoint_path} is unreadable") from exc
    cfg = RunConfig.from_dict({**raw_cfg, "output_dir": str(checkpoint_path.parent)})
    p = Pipeline(cfg, backend_wrapper=backend_wrapper, template_dir=template_dir)
    p.load_checkpoint(checkpoint_path)
    return p.execute(resumed_from=p.completed)
